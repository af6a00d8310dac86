//! Ownership verification keys: per-service key pairs derived from the
//! shared seed, the metadata a service stores so sibling devices can
//! re-derive the private half, and the signed messages that rotate a
//! service's bound public key after a re-share.
//!
//! Derivation: pick a random 32-byte value `r`, feed `KDF(seed, r)` to the
//! scalar range check, and retry with a fresh `r` on the rare out-of-range
//! result. The metadata MAC is keyed by the derived private scalar and
//! covers `r` and the service identifier, which is what lets a device
//! detect metadata replayed from a different service or minted under a
//! different seed.
//!
//! All derivations are pure given immutable seed records; concurrent use is
//! safe.

use p256::PublicKey;
use rand::CryptoRng;
use serde::{Deserialize, Serialize};
use subtle::ConstantTimeEq;

use crate::codec::{self, length_prefixed};
use crate::crypto::{self, CryptoError, EcKeyPair, KdfInput};
use crate::seed_exchange::SeedRecord;

/// Retry budget for the derive loop; out-of-range candidates occur with
/// probability below 2^-32 per draw, so hitting this cap means something is
/// deeply wrong.
const MAX_DERIVE_RETRIES: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum OvkError {
    /// Metadata does not verify under the key derived from this seed for
    /// this service: either it belongs to another service (the homograph
    /// defense) or to a seed this device does not hold.
    #[error("metadata does not match this service and seed")]
    WrongService,
    /// Update construction requires strictly increasing seed epochs.
    #[error("seed epochs not increasing")]
    EpochOrder,
    /// No held seed verifies the service's current metadata.
    #[error("no held seed matches the registered metadata")]
    NoMatchingSeed,
    /// Previous and next keys must target the same service.
    #[error("update halves target different services")]
    ServiceMismatch,
    /// The derive loop exhausted its retry budget.
    #[error("key derivation failed repeatedly")]
    Internal,
}

/// The triple a service stores beside an OVPK: the public random value, a
/// MAC binding it to the service under the derived private key, and the
/// declared authenticator count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OvkMetadata {
    #[serde(with = "codec::bytes32")]
    pub r: [u8; 32],
    #[serde(with = "codec::bytes32")]
    pub m: [u8; 32],
    pub n: u32,
}

/// A candidate `(r, m)` pair relayed by the service during migration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidatePair {
    #[serde(with = "codec::bytes32")]
    pub r: [u8; 32],
    #[serde(with = "codec::bytes32")]
    pub m: [u8; 32],
}

/// An ownership key pair derived for one service, with the metadata that
/// reproduces it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerivedOvk {
    pub keypair: EcKeyPair,
    pub metadata: OvkMetadata,
    pub service_id: String,
    pub seed_epoch: u64,
}

impl DerivedOvk {
    pub fn public(&self) -> &PublicKey {
        self.keypair.public()
    }
}

/// MAC input binding `r` to a service identifier, length-prefixed so field
/// boundaries cannot shift.
fn metadata_mac_payload(r: &[u8; 32], service_id: &str) -> Vec<u8> {
    length_prefixed("ovk/metadata", &[r, service_id.as_bytes()])
}

/// Derives the key pair determined by `(seed, r)` for `service_id`, if the
/// KDF output lands in the valid scalar range.
fn derive_with_random(
    seed: &SeedRecord,
    service_id: &str,
    r: &[u8; 32],
    n: u32,
) -> Result<DerivedOvk, CryptoError> {
    let input = KdfInput::new(seed.seed.bytes(), r).expect("seed and r are 32 bytes");
    let candidate = crypto::kdf(&input);
    let keypair = EcKeyPair::from_candidate(&candidate)?;
    let m = crypto::mac(&keypair.secret_bytes(), &metadata_mac_payload(r, service_id));
    Ok(DerivedOvk {
        keypair,
        metadata: OvkMetadata { r: *r, m, n },
        service_id: service_id.to_string(),
        seed_epoch: seed.epoch,
    })
}

/// Derives a fresh ownership key for `service_id`: generates a random `r`,
/// retrying while the KDF output falls outside the scalar range. The
/// declared count `n` comes from the seed's negotiation party count.
pub fn derive_fresh<R: CryptoRng + ?Sized>(
    seed: &SeedRecord,
    service_id: &str,
    rng: &mut R,
) -> Result<DerivedOvk, OvkError> {
    for _ in 0..MAX_DERIVE_RETRIES {
        let mut r = [0u8; 32];
        rng.fill_bytes(&mut r);
        match derive_with_random(seed, service_id, &r, seed.party_count()) {
            Ok(derived) => return Ok(derived),
            Err(CryptoError::OutOfRange) => continue,
            Err(_) => return Err(OvkError::Internal),
        }
    }
    Err(OvkError::Internal)
}

/// Re-derives the ownership key from service-provided metadata and checks
/// the MAC. Failure means the metadata was not minted for this `(seed,
/// service_id)` pair and the caller must abort without contacting the
/// service further.
pub fn derive_from_metadata(
    seed: &SeedRecord,
    service_id: &str,
    metadata: &OvkMetadata,
) -> Result<DerivedOvk, OvkError> {
    let derived = derive_with_random(seed, service_id, &metadata.r, metadata.n)
        .map_err(|_| OvkError::WrongService)?;
    let expected = crypto::mac(
        &derived.keypair.secret_bytes(),
        &metadata_mac_payload(&metadata.r, service_id),
    );
    if expected.ct_eq(&metadata.m).into() {
        Ok(derived)
    } else {
        Err(OvkError::WrongService)
    }
}

fn registration_payload(public_key: &PublicKey, service_id: &str) -> Vec<u8> {
    length_prefixed(
        "ovk/registration",
        &[&crypto::point_sec1(public_key), service_id.as_bytes()],
    )
}

/// Signs a new device public key for enrollment under this ownership key.
pub fn sign_registration(ovk: &DerivedOvk, new_public_key: &PublicKey) -> [u8; 64] {
    ovk.keypair.sign(&registration_payload(new_public_key, &ovk.service_id))
}

/// Service-side check of an enrollment signature.
pub fn verify_registration(
    ovpk: &PublicKey,
    service_id: &str,
    new_public_key: &PublicKey,
    signature: &[u8],
) -> bool {
    crypto::verify(ovpk, &registration_payload(new_public_key, service_id), signature)
}

/// Proposal of a replacement ownership public key, signed by the previous
/// private key and attributable to the registered credential that sent it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpdatingMessage {
    #[serde(with = "codec::point")]
    pub new_ovpk: PublicKey,
    pub new_metadata: OvkMetadata,
    #[serde(with = "codec::bytes64")]
    pub signature: [u8; 64],
    pub sender_credential_id: String,
}

fn update_payload(new_ovpk: &PublicKey, new_metadata: &OvkMetadata, service_id: &str) -> Vec<u8> {
    length_prefixed(
        "ovk/update",
        &[
            &crypto::point_sec1(new_ovpk),
            &new_metadata.r,
            &new_metadata.m,
            &new_metadata.n.to_be_bytes(),
            service_id.as_bytes(),
        ],
    )
}

/// Builds the updating message replacing `prev` with `next`. Both halves
/// must target the same service and epochs must strictly increase.
pub fn build_update(
    prev: &DerivedOvk,
    next: &DerivedOvk,
    sender_credential_id: impl Into<String>,
) -> Result<UpdatingMessage, OvkError> {
    if prev.service_id != next.service_id {
        return Err(OvkError::ServiceMismatch);
    }
    if prev.seed_epoch >= next.seed_epoch {
        return Err(OvkError::EpochOrder);
    }
    let payload = update_payload(next.public(), &next.metadata, &next.service_id);
    Ok(UpdatingMessage {
        new_ovpk: *next.public(),
        new_metadata: next.metadata.clone(),
        signature: prev.keypair.sign(&payload),
        sender_credential_id: sender_credential_id.into(),
    })
}

/// Service-side check that an updating message was signed by the holder of
/// the currently bound ownership key.
pub fn verify_update(current_ovpk: &PublicKey, service_id: &str, msg: &UpdatingMessage) -> bool {
    crypto::verify(
        current_ovpk,
        &update_payload(&msg.new_ovpk, &msg.new_metadata, service_id),
        &msg.signature,
    )
}

/// Picks the seed pair for an update: the previous seed is whichever held
/// seed verifies the service's current metadata, the new seed is the one
/// with the latest epoch. Devices may hold many seeds after repeated
/// re-shares; the MAC identifies the right one.
pub fn select_update_seed<'a>(
    seeds: &'a [SeedRecord],
    service_id: &str,
    prev_metadata: &OvkMetadata,
) -> Result<(&'a SeedRecord, &'a SeedRecord), OvkError> {
    let prev = seeds
        .iter()
        .find(|seed| derive_from_metadata(seed, service_id, prev_metadata).is_ok())
        .ok_or(OvkError::NoMatchingSeed)?;
    let newest = seeds
        .iter()
        .max_by_key(|seed| seed.epoch)
        .ok_or(OvkError::NoMatchingSeed)?;
    Ok((prev, newest))
}

/// Derives the replacement key for an update. If the service relayed
/// candidate `(r, m)` pairs from earlier updaters, the first pair that
/// verifies under the new seed is reused so all honest devices propose a
/// byte-identical key; otherwise (empty list, or only candidates minted
/// under some other seed) a fresh random value is generated.
pub fn derive_for_update<R: CryptoRng + ?Sized>(
    new_seed: &SeedRecord,
    service_id: &str,
    candidates: &[CandidatePair],
    rng: &mut R,
) -> Result<DerivedOvk, OvkError> {
    for candidate in candidates {
        let metadata = OvkMetadata {
            r: candidate.r,
            m: candidate.m,
            n: new_seed.party_count(),
        };
        if let Ok(derived) = derive_from_metadata(new_seed, service_id, &metadata) {
            return Ok(derived);
        }
    }
    derive_fresh(new_seed, service_id, rng)
}
