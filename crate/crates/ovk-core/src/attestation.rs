//! Device attestation: a simplified manufacturer PKI.
//!
//! A manufacturer embeds an attestation key in each device and issues a
//! fixed-field certificate for it. Devices sign statements about freshly
//! generated keys (an authentication key, an ownership public key, or a DH
//! share used during seed exchange). Relying services evaluate statements
//! against a trust policy along two axes: whether the model derives
//! ownership keys as specified (criterion 1) and whether the model, and
//! every peer model sharing the seed, stores the seed securely
//! (criterion 2).
//!
//! Statements and policies are immutable after construction; verification
//! is pure.

use std::collections::BTreeSet;

use p256::PublicKey;
use rand::CryptoRng;
use serde::{Deserialize, Serialize};

use crate::codec::{self, length_prefixed};
use crate::crypto::{self, EcKeyPair};

/// What object a statement attests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttestedKind {
    AuthnKey,
    Ovpk,
    DhShare,
}

impl AttestedKind {
    fn wire_byte(self) -> u8 {
        match self {
            AttestedKind::AuthnKey => 1,
            AttestedKind::Ovpk => 2,
            AttestedKind::DhShare => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AttestationError {
    #[error("invalid attestation input: {0}")]
    InvalidInput(String),
}

/// Manufacturer-issued certificate binding an attestation public key to a
/// device model. Fixed fields rather than X.509: chain semantics only.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManufacturerCert {
    pub manufacturer_id: String,
    pub model_name: String,
    #[serde(with = "codec::point")]
    pub subject_point: PublicKey,
    #[serde(with = "codec::bytes64")]
    pub signature: [u8; 64],
}

impl ManufacturerCert {
    fn payload(manufacturer_id: &str, model_name: &str, subject: &PublicKey) -> Vec<u8> {
        length_prefixed(
            "ovk/device-cert",
            &[
                manufacturer_id.as_bytes(),
                model_name.as_bytes(),
                &crypto::point_sec1(subject),
            ],
        )
    }

    /// Whether this certificate was issued by the holder of `root`.
    pub fn verifies_under(&self, root: &PublicKey) -> bool {
        let payload = Self::payload(&self.manufacturer_id, &self.model_name, &self.subject_point);
        crypto::verify(root, &payload, &self.signature)
    }
}

/// A manufacturer root: issues device certificates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manufacturer {
    pub id: String,
    root: EcKeyPair,
}

impl Manufacturer {
    pub fn new<R: CryptoRng + ?Sized>(id: impl Into<String>, rng: &mut R) -> Self {
        Self { id: id.into(), root: EcKeyPair::generate(rng) }
    }

    pub fn root_point(&self) -> &PublicKey {
        self.root.public()
    }

    /// Mints a device of the given model with a fresh embedded attestation
    /// key and a certificate for it.
    pub fn issue_device<R: CryptoRng + ?Sized>(
        &self,
        model_name: impl Into<String>,
        rng: &mut R,
    ) -> DeviceIdentity {
        let model_name = model_name.into();
        let attestation_keypair = EcKeyPair::generate(rng);
        let subject_point = *attestation_keypair.public();
        let payload = ManufacturerCert::payload(&self.id, &model_name, &subject_point);
        let signature = self.root.sign(&payload);
        DeviceIdentity {
            model_name: model_name.clone(),
            attestation_keypair,
            device_certificate: ManufacturerCert {
                manufacturer_id: self.id.clone(),
                model_name,
                subject_point,
                signature,
            },
        }
    }
}

/// The attestation identity embedded in one device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceIdentity {
    pub model_name: String,
    attestation_keypair: EcKeyPair,
    pub device_certificate: ManufacturerCert,
}

/// Device-signed claim about a freshly generated key.
///
/// `peer_models` lists the other device models sharing the seed and is only
/// populated for ownership-key statements. `challenge_echo` binds the
/// statement to the session that requested it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttestationStatement {
    pub kind: AttestedKind,
    #[serde(with = "codec::point")]
    pub subject_point: PublicKey,
    pub model_name: String,
    #[serde(default)]
    pub peer_models: Vec<String>,
    #[serde(with = "codec::bytes")]
    pub challenge_echo: Vec<u8>,
    #[serde(with = "codec::bytes64")]
    pub signature: [u8; 64],
    pub certificate: ManufacturerCert,
}

fn statement_payload(
    kind: AttestedKind,
    subject: &PublicKey,
    model_name: &str,
    peer_models: &[String],
    challenge_echo: &[u8],
) -> Vec<u8> {
    let subject = crypto::point_sec1(subject);
    let kind_byte = [kind.wire_byte()];
    let count = (peer_models.len() as u32).to_be_bytes();
    let mut fields: Vec<&[u8]> = vec![&kind_byte, &subject, model_name.as_bytes(), &count];
    for peer in peer_models {
        fields.push(peer.as_bytes());
    }
    fields.push(challenge_echo);
    length_prefixed("ovk/attestation", &fields)
}

/// Signs a statement about `subject_point` with the device's embedded
/// attestation key. `peer_models` must be empty unless `kind` is
/// [`AttestedKind::Ovpk`].
pub fn attest(
    device: &DeviceIdentity,
    kind: AttestedKind,
    subject_point: &PublicKey,
    peer_models: &[String],
    challenge_echo: &[u8],
) -> Result<AttestationStatement, AttestationError> {
    if kind != AttestedKind::Ovpk && !peer_models.is_empty() {
        return Err(AttestationError::InvalidInput(
            "peer models only accompany ownership-key statements".into(),
        ));
    }
    let payload =
        statement_payload(kind, subject_point, &device.model_name, peer_models, challenge_echo);
    Ok(AttestationStatement {
        kind,
        subject_point: *subject_point,
        model_name: device.model_name.clone(),
        peer_models: peer_models.to_vec(),
        challenge_echo: challenge_echo.to_vec(),
        signature: device.attestation_keypair.sign(&payload),
        certificate: device.device_certificate.clone(),
    })
}

/// Whether a statement is internally consistent: its signature verifies
/// under its own certificate's subject key and the certificate names the
/// same model the statement claims. Says nothing about trust.
pub fn statement_self_consistent(stmt: &AttestationStatement) -> bool {
    if stmt.certificate.model_name != stmt.model_name {
        return false;
    }
    let payload = statement_payload(
        stmt.kind,
        &stmt.subject_point,
        &stmt.model_name,
        &stmt.peer_models,
        &stmt.challenge_echo,
    );
    crypto::verify(&stmt.certificate.subject_point, &payload, &stmt.signature)
}

/// Service-side trust configuration.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrustPolicy {
    /// Base64url uncompressed SEC1 encodings of trusted manufacturer roots.
    pub roots: BTreeSet<String>,
    /// Models asserting they derive ownership keys as specified.
    pub compliant_models: BTreeSet<String>,
    /// Models asserting they keep the seed in secure storage.
    pub secure_storage_models: BTreeSet<String>,
}

impl TrustPolicy {
    pub fn trust_root(&mut self, root: &PublicKey) {
        self.roots.insert(codec::b64(&crypto::point_sec1(root)));
    }

    fn root_points(&self) -> impl Iterator<Item = PublicKey> + '_ {
        self.roots.iter().filter_map(|encoded| {
            let raw = codec::b64_decode(encoded).ok()?;
            crypto::point_from_sec1(&raw).ok()
        })
    }
}

/// Outcome of evaluating a statement against a policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrustVerdict {
    /// Certificate chains to a trusted root, the statement signature
    /// verifies, and the challenge echo matches the expected challenge.
    pub chain_ok: bool,
    /// Model is on the derivation-compliance list.
    pub criterion1: bool,
    /// Model and every peer model are on the secure-storage list.
    pub criterion2: bool,
}

impl TrustVerdict {
    pub fn fully_trusted(&self) -> bool {
        self.chain_ok && self.criterion1 && self.criterion2
    }
}

/// Evaluates a statement. Failures are encoded in the verdict, never as
/// errors. Removing a model from either policy list can only turn verdict
/// fields false, never true.
pub fn verify_statement(
    stmt: &AttestationStatement,
    policy: &TrustPolicy,
    expected_challenge: &[u8],
) -> TrustVerdict {
    let chain_ok = stmt.challenge_echo == expected_challenge
        && statement_self_consistent(stmt)
        && policy.root_points().any(|root| stmt.certificate.verifies_under(&root));
    let criterion1 = policy.compliant_models.contains(&stmt.model_name);
    let criterion2 = policy.secure_storage_models.contains(&stmt.model_name)
        && stmt.peer_models.iter().all(|peer| policy.secure_storage_models.contains(peer));
    TrustVerdict { chain_ok, criterion1, criterion2 }
}
