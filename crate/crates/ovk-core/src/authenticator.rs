//! The device-side state machine: seed store with retention policy,
//! credential store, the local unlock gate, and the four user flows
//! (account registration, login with seamless enrollment, update sending,
//! retention enforcement).
//!
//! The unlock flag simulates local authentication in front of secure
//! storage: every operation that touches the seed store or a private key
//! requires it. Seeds and private scalars never leave this struct through a
//! transport; only public points, signatures, and sealed envelopes do.

use std::collections::BTreeMap;

use rand::CryptoRng;
use serde::{Deserialize, Serialize};

use crate::attestation::{self, AttestedKind, DeviceIdentity};
use crate::crypto::EcKeyPair;
use crate::ovk::{self, DerivedOvk, OvkError, UpdatingMessage};
use crate::seed_exchange::SeedRecord;
use crate::wire::{
    AuthnRequest, ClientError, EnrollRequest, Message, RegisterRequest, ServiceClient,
    StartAuthnRequest, StartAuthnResponse, UpdateAck, authn_challenge_payload,
};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DeviceError {
    /// The operation touches secrets and the device is locked.
    #[error("device is locked")]
    DeviceLocked,
    /// No seed is stored yet.
    #[error("no seed available")]
    NoSeed,
    /// A credential for this service already exists on this device.
    #[error("already registered with this service")]
    AlreadyRegistered,
    /// No credential for this service exists on this device.
    #[error("no credential for this service")]
    NoCredential,
    /// Service metadata does not verify under any held seed; the flow
    /// aborts before any registration message is sent.
    #[error("service metadata does not match any held seed")]
    WrongService,
    /// No held seed verifies the service's current metadata during an
    /// update.
    #[error("no held seed matches the registered metadata")]
    NoMatchingSeed,
    /// Seed epochs must strictly increase.
    #[error("seed epoch not increasing")]
    EpochOrder,
    /// Seed deletion needs user consent that was not granted.
    #[error("seed deletion requires user consent")]
    ConsentRequired,
    /// The service answered with an error frame.
    #[error("service error {code}: {message}")]
    Service { code: String, message: String },
    /// Transport or encoding failure.
    #[error("transport failure: {0}")]
    Transport(String),
    /// The service answered with an unexpected frame kind, or its response
    /// is missing data the flow requires.
    #[error("protocol violation: {0}")]
    Protocol(String),
}

impl DeviceError {
    pub fn is_service_code(&self, expected: &str) -> bool {
        matches!(self, DeviceError::Service { code, .. } if code == expected)
    }
}

impl From<ClientError> for DeviceError {
    fn from(err: ClientError) -> Self {
        match err {
            ClientError::Service { code, message } => DeviceError::Service { code, message },
            ClientError::Wire(e) => DeviceError::Transport(e.to_string()),
            ClientError::Transport(e) => DeviceError::Transport(e),
        }
    }
}

impl From<OvkError> for DeviceError {
    fn from(err: OvkError) -> Self {
        match err {
            OvkError::WrongService => DeviceError::WrongService,
            OvkError::NoMatchingSeed => DeviceError::NoMatchingSeed,
            OvkError::EpochOrder => DeviceError::EpochOrder,
            other => DeviceError::Protocol(other.to_string()),
        }
    }
}

/// How a device limits the number of stored seeds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum RetentionMode {
    /// Keep at most this many seeds; deleting the oldest needs consent.
    MaxCount { limit: usize },
    /// Every seed expires this long after it is stored.
    Expiry { lifetime_secs: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetentionPolicy {
    #[serde(flatten)]
    pub mode: RetentionMode,
    /// Whether the user has consented to count-based deletion prompts.
    pub prompt_consent: bool,
}

impl Default for RetentionPolicy {
    fn default() -> Self {
        Self { mode: RetentionMode::MaxCount { limit: 8 }, prompt_consent: true }
    }
}

/// Outcome of a retention pass.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RetentionReport {
    pub deleted_epochs: Vec<u64>,
    /// A seed is close to its expiry; prompt the user to re-share.
    pub renewal_due: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredCredential {
    pub credential_id: String,
    pub username: String,
    keypair: EcKeyPair,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegistrationReceipt {
    pub credential_id: String,
    /// Declared device capacity the service recorded.
    pub capacity: u32,
}

/// Result of a login attempt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LoginOutcome {
    /// Existing credential answered the challenge.
    Session { update_ack: Option<UpdateAck> },
    /// No credential existed; the device enrolled seamlessly and then
    /// authenticated.
    Enrolled { credential_id: String },
    /// The service revoked this device's credential (it missed a key
    /// rotation). The stale credential has been dropped; the next login
    /// re-enrolls seamlessly if a matching seed is held.
    CredentialRevoked,
}

/// Result of sending an updating message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum UpdateOutcome {
    /// Majority reached; the service committed immediately.
    Committed { revoked: Vec<String> },
    /// Vote recorded; the migration commits at the deadline.
    Pending { deadline: u64 },
    /// The service already trusts the newest held seed; nothing to send.
    AlreadyCurrent,
}

/// One emulated authenticator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Authenticator {
    identity: DeviceIdentity,
    /// Seed records in strictly increasing epoch order.
    seeds: Vec<SeedRecord>,
    /// One credential per service origin.
    credentials: BTreeMap<String, StoredCredential>,
    /// Session-scoped: local authentication never persists.
    #[serde(skip)]
    unlocked: bool,
    retention: RetentionPolicy,
    /// Updates sent but not yet known committed, re-sent verbatim on the
    /// next login so the proposal stays byte-identical.
    pending_updates: BTreeMap<String, UpdatingMessage>,
}

impl Authenticator {
    pub fn new(identity: DeviceIdentity, retention: RetentionPolicy) -> Self {
        Self {
            identity,
            seeds: Vec::new(),
            credentials: BTreeMap::new(),
            unlocked: false,
            retention,
            pending_updates: BTreeMap::new(),
        }
    }

    /// Simulated local authentication: the flag is set iff verification
    /// succeeded. Every secret-touching operation checks it.
    pub fn unlock(&mut self, pin_or_biometric_ok: bool) {
        self.unlocked = pin_or_biometric_ok;
    }

    pub fn is_unlocked(&self) -> bool {
        self.unlocked
    }

    pub fn identity(&self) -> &DeviceIdentity {
        &self.identity
    }

    pub fn model_name(&self) -> &str {
        &self.identity.model_name
    }

    pub fn seed_epochs(&self) -> Vec<u64> {
        self.seeds.iter().map(|s| s.epoch).collect()
    }

    pub fn credential_for(&self, service_id: &str) -> Option<&StoredCredential> {
        self.credentials.get(service_id)
    }

    pub fn has_pending_update(&self, service_id: &str) -> bool {
        self.pending_updates.contains_key(service_id)
    }

    fn require_unlocked(&self) -> Result<(), DeviceError> {
        if self.unlocked { Ok(()) } else { Err(DeviceError::DeviceLocked) }
    }

    /// Every secret byte string this device holds (seeds and credential
    /// private scalars). Test harnesses scan transport captures for these;
    /// not part of the public contract.
    #[doc(hidden)]
    pub fn secrecy_scan_material(&self) -> Vec<Vec<u8>> {
        let mut material: Vec<Vec<u8>> = self
            .seeds
            .iter()
            .map(|record| record.seed.bytes().to_vec())
            .collect();
        material.extend(
            self.credentials
                .values()
                .map(|credential| credential.keypair.secret_bytes().to_vec()),
        );
        material
    }

    /// Stores a freshly agreed seed. Epochs must strictly increase; the
    /// expiry stamp comes from the retention policy.
    pub fn store_seed(&mut self, mut record: SeedRecord, now: u64) -> Result<(), DeviceError> {
        self.require_unlocked()?;
        if let Some(last) = self.seeds.last()
            && record.epoch <= last.epoch
        {
            return Err(DeviceError::EpochOrder);
        }
        if let RetentionMode::Expiry { lifetime_secs } = self.retention.mode {
            record.expires_at = Some(now + lifetime_secs);
        }
        self.seeds.push(record);
        Ok(())
    }

    fn latest_seed(&self) -> Result<&SeedRecord, DeviceError> {
        self.seeds.last().ok_or(DeviceError::NoSeed)
    }

    fn start_authn(
        &self,
        client: &mut dyn ServiceClient,
        username: &str,
    ) -> Result<StartAuthnResponse, DeviceError> {
        let response = client.call(&Message::StartAuthnReq(StartAuthnRequest {
            username: username.to_string(),
        }))?;
        match response {
            Message::StartAuthnRsp(body) => Ok(body),
            other => Err(DeviceError::Protocol(format!("unexpected {}", other.kind()))),
        }
    }

    /// Creates a new account: sends the fresh public key, a fresh ownership
    /// public key with its metadata, and attestations of both.
    pub fn register_account<R: CryptoRng + ?Sized>(
        &mut self,
        client: &mut dyn ServiceClient,
        username: &str,
        rng: &mut R,
    ) -> Result<RegistrationReceipt, DeviceError> {
        self.require_unlocked()?;
        let service_id = client.origin().to_string();
        if self.credentials.contains_key(&service_id) {
            return Err(DeviceError::AlreadyRegistered);
        }
        let seed = self.latest_seed()?.clone();

        let start = self.start_authn(client, username)?;
        let challenge = start.challenge;

        let keypair = EcKeyPair::generate(rng);
        let key_attestation = attestation::attest(
            &self.identity,
            AttestedKind::AuthnKey,
            keypair.public(),
            &[],
            &challenge,
        )
        .map_err(|e| DeviceError::Protocol(e.to_string()))?;

        let derived = ovk::derive_fresh(&seed, &service_id, rng)?;
        let ovpk_attestation = attestation::attest(
            &self.identity,
            AttestedKind::Ovpk,
            derived.public(),
            &seed.peer_models,
            &challenge,
        )
        .map_err(|e| DeviceError::Protocol(e.to_string()))?;

        let response = client.call(&Message::RegisterReq(RegisterRequest {
            username: username.to_string(),
            public_key: *keypair.public(),
            key_attestation,
            ovpk: *derived.public(),
            metadata: derived.metadata.clone(),
            ovpk_attestation,
        }))?;
        let body = match response {
            Message::RegisterRsp(body) => body,
            other => return Err(DeviceError::Protocol(format!("unexpected {}", other.kind()))),
        };

        self.credentials.insert(
            service_id,
            StoredCredential {
                credential_id: body.credential_id.clone(),
                username: username.to_string(),
                keypair,
            },
        );
        Ok(RegistrationReceipt {
            credential_id: body.credential_id,
            capacity: derived.metadata.n,
        })
    }

    /// Derives the ownership key from service metadata, trying held seeds
    /// newest first. Failure is the misdirected-registration defense: the
    /// metadata was not minted for this service under any seed we hold.
    fn derive_for_service(
        &self,
        service_id: &str,
        metadata: &ovk::OvkMetadata,
    ) -> Result<DerivedOvk, DeviceError> {
        self.seeds
            .iter()
            .rev()
            .find_map(|seed| ovk::derive_from_metadata(seed, service_id, metadata).ok())
            .ok_or(DeviceError::WrongService)
    }

    /// Signs in. With a stored credential this is challenge-response (plus
    /// any due updating message); without one the device seamlessly enrolls
    /// a fresh key authorized by the ownership key, then authenticates.
    pub fn login_or_enroll<R: CryptoRng + ?Sized>(
        &mut self,
        client: &mut dyn ServiceClient,
        username: &str,
        rng: &mut R,
    ) -> Result<LoginOutcome, DeviceError> {
        self.require_unlocked()?;
        let service_id = client.origin().to_string();
        let start = self.start_authn(client, username)?;

        if self.credentials.contains_key(&service_id) {
            // A failed update preparation never blocks the login itself.
            let update = self.prepare_update(&service_id, &start, rng).unwrap_or_default();
            let credential = self.credentials.get(&service_id).expect("checked above");
            let request = AuthnRequest {
                username: username.to_string(),
                credential_id: credential.credential_id.clone(),
                challenge: start.challenge,
                signature: credential
                    .keypair
                    .sign(&authn_challenge_payload(&start.challenge, &service_id)),
                update: update.clone(),
            };
            match client.call(&Message::AuthnReq(request)) {
                Ok(Message::AuthnRsp(body)) => {
                    if update.is_some() {
                        self.note_update_ack(&service_id, update, body.update_ack.as_ref());
                    }
                    Ok(LoginOutcome::Session { update_ack: body.update_ack })
                }
                Ok(other) => Err(DeviceError::Protocol(format!("unexpected {}", other.kind()))),
                Err(err) => {
                    let err: DeviceError = err.into();
                    if err.is_service_code("RevokedCredential") {
                        // Key rotation happened without this device; the
                        // stale credential is useless now.
                        self.credentials.remove(&service_id);
                        self.pending_updates.remove(&service_id);
                        return Ok(LoginOutcome::CredentialRevoked);
                    }
                    Err(err)
                }
            }
        } else {
            let metadata = start.metadata.clone().ok_or_else(|| {
                DeviceError::Protocol("service returned no ownership metadata".into())
            })?;
            let derived = self.derive_for_service(&service_id, &metadata)?;

            let keypair = EcKeyPair::generate(rng);
            let key_attestation = attestation::attest(
                &self.identity,
                AttestedKind::AuthnKey,
                keypair.public(),
                &[],
                &start.challenge,
            )
            .map_err(|e| DeviceError::Protocol(e.to_string()))?;
            let ovk_signature = ovk::sign_registration(&derived, keypair.public());

            let response = client.call(&Message::EnrollReq(EnrollRequest {
                username: username.to_string(),
                public_key: *keypair.public(),
                key_attestation,
                ovk_signature,
            }))?;
            let body = match response {
                Message::EnrollRsp(body) => body,
                other => {
                    return Err(DeviceError::Protocol(format!("unexpected {}", other.kind())));
                }
            };
            self.credentials.insert(
                service_id.clone(),
                StoredCredential {
                    credential_id: body.credential_id.clone(),
                    username: username.to_string(),
                    keypair,
                },
            );

            // Authenticate with the fresh credential to complete sign-in.
            let start = self.start_authn(client, username)?;
            let credential = self.credentials.get(&service_id).expect("just inserted");
            let request = AuthnRequest {
                username: username.to_string(),
                credential_id: credential.credential_id.clone(),
                challenge: start.challenge,
                signature: credential
                    .keypair
                    .sign(&authn_challenge_payload(&start.challenge, &service_id)),
                update: None,
            };
            match client.call(&Message::AuthnReq(request))? {
                Message::AuthnRsp(_) => Ok(LoginOutcome::Enrolled {
                    credential_id: body.credential_id,
                }),
                other => Err(DeviceError::Protocol(format!("unexpected {}", other.kind()))),
            }
        }
    }

    /// Builds (or replays) the updating message due for this service, if
    /// any: a pending one is re-sent verbatim while the service still
    /// trusts the old key; otherwise one is built when the device holds a
    /// newer seed than the one the service trusts. A pending message whose
    /// migration already committed (the service metadata now matches our
    /// newest seed, or no held seed at all) is stale and gets dropped.
    fn prepare_update<R: CryptoRng + ?Sized>(
        &mut self,
        service_id: &str,
        start: &StartAuthnResponse,
        rng: &mut R,
    ) -> Result<Option<UpdatingMessage>, DeviceError> {
        let Some(metadata) = &start.metadata else {
            return Ok(None);
        };
        let selected = ovk::select_update_seed(&self.seeds, service_id, metadata);
        let (prev_seed, new_seed) = match selected {
            Ok(pair) => pair,
            Err(error) => {
                // The service trusts a key no held seed can derive; any
                // pending proposal of ours lost its migration.
                self.pending_updates.remove(service_id);
                return Err(error.into());
            }
        };
        if prev_seed.epoch == new_seed.epoch {
            // The service is already on the newest seed.
            self.pending_updates.remove(service_id);
            return Ok(None);
        }
        if let Some(pending) = self.pending_updates.get(service_id) {
            return Ok(Some(pending.clone()));
        }
        let prev = ovk::derive_from_metadata(prev_seed, service_id, metadata)?;
        let candidates = start.candidates.clone().unwrap_or_default();
        let next = ovk::derive_for_update(new_seed, service_id, &candidates, rng)?;
        let credential = self.credentials.get(service_id).ok_or(DeviceError::NoCredential)?;
        let message = ovk::build_update(&prev, &next, credential.credential_id.clone())?;
        Ok(Some(message))
    }

    fn note_update_ack(
        &mut self,
        service_id: &str,
        sent: Option<UpdatingMessage>,
        ack: Option<&UpdateAck>,
    ) {
        match ack {
            Some(UpdateAck::Committed { .. }) => {
                self.pending_updates.remove(service_id);
            }
            Some(UpdateAck::Pending { .. }) => {
                if let Some(message) = sent {
                    self.pending_updates.insert(service_id.to_string(), message);
                }
            }
            None => {}
        }
    }

    /// Explicitly sends the updating message for this service, signing in
    /// as a side effect. Aborts with [`DeviceError::NoMatchingSeed`] when
    /// no held seed verifies the service's current metadata.
    pub fn send_update<R: CryptoRng + ?Sized>(
        &mut self,
        client: &mut dyn ServiceClient,
        username: &str,
        rng: &mut R,
    ) -> Result<UpdateOutcome, DeviceError> {
        self.require_unlocked()?;
        let service_id = client.origin().to_string();
        if !self.credentials.contains_key(&service_id) {
            return Err(DeviceError::NoCredential);
        }
        if self.seeds.is_empty() {
            return Err(DeviceError::NoSeed);
        }

        let start = self.start_authn(client, username)?;
        let update = self.prepare_update(&service_id, &start, rng)?;
        let Some(update) = update else {
            return Ok(UpdateOutcome::AlreadyCurrent);
        };

        let credential = self.credentials.get(&service_id).expect("checked above");
        let request = AuthnRequest {
            username: username.to_string(),
            credential_id: credential.credential_id.clone(),
            challenge: start.challenge,
            signature: credential
                .keypair
                .sign(&authn_challenge_payload(&start.challenge, &service_id)),
            update: Some(update.clone()),
        };
        let response = client.call(&Message::AuthnReq(request))?;
        let body = match response {
            Message::AuthnRsp(body) => body,
            other => return Err(DeviceError::Protocol(format!("unexpected {}", other.kind()))),
        };
        self.note_update_ack(&service_id, Some(update), body.update_ack.as_ref());
        match body.update_ack {
            Some(UpdateAck::Committed { revoked }) => Ok(UpdateOutcome::Committed { revoked }),
            Some(UpdateAck::Pending { deadline }) => Ok(UpdateOutcome::Pending { deadline }),
            None => Err(DeviceError::Protocol("service ignored the updating message".into())),
        }
    }

    /// Applies the retention policy, returning which epochs were deleted
    /// and whether a renewal prompt is due.
    pub fn enforce_retention(&mut self, now: u64) -> Result<RetentionReport, DeviceError> {
        let mut report = RetentionReport::default();
        match self.retention.mode {
            RetentionMode::MaxCount { limit } => {
                if self.seeds.len() > limit {
                    if !self.retention.prompt_consent {
                        return Err(DeviceError::ConsentRequired);
                    }
                    let excess = self.seeds.len() - limit;
                    for record in self.seeds.drain(..excess) {
                        report.deleted_epochs.push(record.epoch);
                    }
                }
            }
            RetentionMode::Expiry { lifetime_secs } => {
                let margin = lifetime_secs / 10;
                let mut kept = Vec::with_capacity(self.seeds.len());
                for record in self.seeds.drain(..) {
                    match record.expires_at {
                        Some(expiry) if expiry <= now => report.deleted_epochs.push(record.epoch),
                        Some(expiry) => {
                            if expiry.saturating_sub(now) <= margin {
                                report.renewal_due = true;
                            }
                            kept.push(record);
                        }
                        None => kept.push(record),
                    }
                }
                self.seeds = kept;
            }
        }
        Ok(report)
    }
}
