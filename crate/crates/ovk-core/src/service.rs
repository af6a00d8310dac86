//! The relying-party state machine: accounts, single-use challenges, the
//! four endpoints (start-authn, register, enroll, authn with piggybacked
//! update), and ownership-key migration.
//!
//! Migration works as a vote among registered credentials. The first valid
//! updating message opens a migration window and freezes enrollment; each
//! further message from a distinct active credential supports the proposal
//! carrying the same replacement key (byte-equal new OVPK and metadata). A
//! proposal backed by more than half of the credentials that were active at
//! open commits immediately; otherwise the window's deadline commits the
//! proposal with the most supporters, earliest-received first on ties.
//! Credentials that did not support the winner are revoked.
//!
//! All state changes for one account are totally ordered (callers hold the
//! state under a lock); `first_seen` positions come from a per-state
//! sequence counter, so tie-breaks are deterministic. Time never comes from
//! the system clock here: every entry point takes `now`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use p256::PublicKey;
use rand::CryptoRng;
use serde::{Deserialize, Serialize};

use crate::attestation::{AttestationStatement, AttestedKind, TrustPolicy, verify_statement};
use crate::codec;
use crate::crypto::{self};
use crate::ovk::{self, CandidatePair, OvkMetadata, UpdatingMessage};
use crate::wire::{
    AuthnRequest, EnrollRequest, EnrolledBody, ErrorBody, Message, OvkState, RegisterRequest,
    RegisteredBody, SessionBody, StartAuthnResponse, UpdateAck, authn_challenge_payload,
};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ServiceError {
    #[error("username already registered")]
    DuplicateUser,
    #[error("no such account")]
    UnknownUser,
    #[error("attestation rejected by trust policy: {0}")]
    UntrustedAttestation(String),
    #[error("malformed ownership metadata")]
    MalformedMetadata,
    #[error("registered key count would exceed the declared limit")]
    NLimitExceeded,
    #[error("ownership signature does not verify under the bound key")]
    BadOwnershipSignature,
    #[error("enrollment is frozen while a key migration is open")]
    MigrationInProgress,
    #[error("challenge signature invalid")]
    BadSignature,
    #[error("challenge missing, expired, or already consumed")]
    StaleChallenge,
    #[error("credential has been revoked")]
    RevokedCredential,
    #[error("no such credential")]
    UnknownCredential,
    #[error("updating message signature invalid")]
    BadUpdateSignature,
    #[error("updating message malformed")]
    MalformedUpdate,
    #[error("store corrupt: {0}")]
    CorruptStore(String),
}

impl ServiceError {
    /// Stable wire code; the CLI and clients match on these names.
    pub fn code(&self) -> &'static str {
        match self {
            ServiceError::DuplicateUser => "DuplicateUser",
            ServiceError::UnknownUser => "UnknownUser",
            ServiceError::UntrustedAttestation(_) => "UntrustedAttestation",
            ServiceError::MalformedMetadata => "MalformedMetadata",
            ServiceError::NLimitExceeded => "NLimitExceeded",
            ServiceError::BadOwnershipSignature => "BadOwnershipSignature",
            ServiceError::MigrationInProgress => "MigrationInProgress",
            ServiceError::BadSignature => "BadSignature",
            ServiceError::StaleChallenge => "StaleChallenge",
            ServiceError::RevokedCredential => "RevokedCredential",
            ServiceError::UnknownCredential => "UnknownCredential",
            ServiceError::BadUpdateSignature => "BadUpdateSignature",
            ServiceError::MalformedUpdate => "MalformedUpdate",
            ServiceError::CorruptStore(_) => "CorruptStore",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceConfig {
    /// Origin string acting as the service identifier.
    pub origin: String,
    /// Length of the migration window opened by the first updating message.
    pub migration_period_secs: u64,
    pub challenge_ttl_secs: u64,
}

impl ServiceConfig {
    pub fn new(origin: impl Into<String>) -> Self {
        Self {
            origin: origin.into(),
            migration_period_secs: 24 * 60 * 60,
            challenge_ttl_secs: 300,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CredentialStatus {
    Active,
    Revoked,
}

/// How a credential's binding to the account's ownership key was
/// established. Only enrollment bindings carry a verifiable signature; the
/// first credential is bound by the account-registration context itself and
/// migration survivors are re-bound by their winning vote.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "by", rename_all = "snake_case")]
pub enum CredentialBinding {
    Registration,
    Enrollment {
        #[serde(with = "codec::bytes64")]
        ovk_signature: [u8; 64],
    },
    Rebound,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CredentialRecord {
    pub credential_id: String,
    #[serde(with = "codec::point")]
    pub public_key: PublicKey,
    pub binding: CredentialBinding,
    pub status: CredentialStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    #[serde(with = "codec::point")]
    pub new_ovpk: PublicKey,
    pub new_metadata: OvkMetadata,
    pub supporters: BTreeSet<String>,
    pub first_seen_seq: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MigrationState {
    pub opened_at: u64,
    pub deadline: u64,
    /// Credential ids active when the window opened; the majority
    /// denominator. Enrollment is frozen, so this set cannot grow.
    pub electorate: BTreeSet<String>,
    pub proposals: Vec<Proposal>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Account {
    pub username: String,
    #[serde(with = "codec::point")]
    pub ovpk: PublicKey,
    pub metadata: OvkMetadata,
    pub credentials: Vec<CredentialRecord>,
    pub migration: Option<MigrationState>,
    next_credential: u64,
}

impl Account {
    fn active_ids(&self) -> BTreeSet<String> {
        self.credentials
            .iter()
            .filter(|c| c.status == CredentialStatus::Active)
            .map(|c| c.credential_id.clone())
            .collect()
    }

    pub fn active_count(&self) -> usize {
        self.credentials
            .iter()
            .filter(|c| c.status == CredentialStatus::Active)
            .count()
    }

    pub fn credential(&self, id: &str) -> Option<&CredentialRecord> {
        self.credentials.iter().find(|c| c.credential_id == id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChallengeRecord {
    #[serde(with = "codec::bytes32")]
    pub value: [u8; 32],
    pub username: String,
    pub issued_at: u64,
    pub ttl_secs: u64,
    pub consumed: bool,
}

/// Result of a committed migration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommitReport {
    pub username: String,
    pub revoked: Vec<String>,
    pub retained: Vec<String>,
    pub by_majority: bool,
    pub committed_at: u64,
}

/// Full state of one relying service. Wrap in `Arc<Mutex<..>>` to serve
/// concurrent callers; the lock provides the per-account total order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceState {
    config: ServiceConfig,
    policy: TrustPolicy,
    accounts: BTreeMap<String, Account>,
    /// Challenge records keyed by base64url of the challenge value.
    challenges: BTreeMap<String, ChallengeRecord>,
    /// Secret for deriving unpredictable challenge values from `seq`.
    #[serde(with = "codec::bytes32")]
    challenge_key: [u8; 32],
    /// Mutation sequence; orders proposals and challenge derivation.
    seq: u64,
}

impl ServiceState {
    pub fn new<R: CryptoRng + ?Sized>(config: ServiceConfig, policy: TrustPolicy, rng: &mut R) -> Self {
        let mut challenge_key = [0u8; 32];
        rng.fill_bytes(&mut challenge_key);
        Self {
            config,
            policy,
            accounts: BTreeMap::new(),
            challenges: BTreeMap::new(),
            challenge_key,
            seq: 0,
        }
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    pub fn policy(&self) -> &TrustPolicy {
        &self.policy
    }

    pub fn account(&self, username: &str) -> Option<&Account> {
        self.accounts.get(username)
    }

    fn next_seq(&mut self) -> u64 {
        self.seq += 1;
        self.seq
    }

    fn issue_challenge(&mut self, username: &str, now: u64) -> [u8; 32] {
        // Prune dead records so the store does not grow without bound.
        self.challenges
            .retain(|_, c| !c.consumed && now < c.issued_at + c.ttl_secs);

        let seq = self.next_seq();
        let value = crypto::mac(
            &self.challenge_key,
            &codec::length_prefixed("ovk/challenge", &[&seq.to_be_bytes(), username.as_bytes()]),
        );
        self.challenges.insert(
            codec::b64(&value),
            ChallengeRecord {
                value,
                username: username.to_string(),
                issued_at: now,
                ttl_secs: self.config.challenge_ttl_secs,
                consumed: false,
            },
        );
        value
    }

    /// Consumes a challenge: it must exist, belong to `username`, be
    /// unexpired, and never have been consumed. Consumption happens before
    /// any signature check, so one challenge can authorize at most one
    /// attempt even under concurrent use.
    fn take_challenge(&mut self, value: &[u8], username: &str, now: u64) -> Result<(), ServiceError> {
        let record = self
            .challenges
            .get_mut(&codec::b64(value))
            .ok_or(ServiceError::StaleChallenge)?;
        if record.username != username
            || record.consumed
            || now >= record.issued_at + record.ttl_secs
        {
            return Err(ServiceError::StaleChallenge);
        }
        record.consumed = true;
        Ok(())
    }

    fn check_attestation(
        &self,
        stmt: &AttestationStatement,
        kind: AttestedKind,
        expected_subject: &PublicKey,
        challenge: &[u8],
    ) -> Result<(), ServiceError> {
        if stmt.kind != kind {
            return Err(ServiceError::UntrustedAttestation("wrong statement kind".into()));
        }
        if stmt.subject_point != *expected_subject {
            return Err(ServiceError::UntrustedAttestation(
                "statement subject does not match the presented key".into(),
            ));
        }
        let verdict = verify_statement(stmt, &self.policy, challenge);
        if !verdict.chain_ok {
            return Err(ServiceError::UntrustedAttestation("certificate chain rejected".into()));
        }
        if !verdict.criterion1 {
            return Err(ServiceError::UntrustedAttestation(format!(
                "model {} is not on the compliant list",
                stmt.model_name
            )));
        }
        if !verdict.criterion2 {
            return Err(ServiceError::UntrustedAttestation(format!(
                "model {} or a peer model lacks vetted secure storage",
                stmt.model_name
            )));
        }
        Ok(())
    }

    /// Commits any migration whose deadline has passed. Runs lazily at the
    /// top of every account-touching operation and from [`finalize_due`].
    fn maybe_finalize(&mut self, username: &str, now: u64) -> Option<CommitReport> {
        let account = self.accounts.get_mut(username)?;
        let due = account
            .migration
            .as_ref()
            .is_some_and(|migration| now >= migration.deadline);
        if due {
            Some(finalize_account(account, now, false))
        } else {
            None
        }
    }

    /// Sweeps all accounts for due migrations; the scenario engine calls
    /// this after advancing the clock.
    pub fn finalize_due(&mut self, now: u64) -> Vec<CommitReport> {
        let usernames: Vec<String> = self.accounts.keys().cloned().collect();
        usernames
            .iter()
            .filter_map(|username| self.maybe_finalize(username, now))
            .collect()
    }

    /// Challenge issuance. Unknown usernames receive a response of the same
    /// shape as an account without ownership metadata, so the endpoint does
    /// not confirm account existence.
    pub fn start_authn(&mut self, username: &str, now: u64) -> StartAuthnResponse {
        self.maybe_finalize(username, now);
        let challenge = self.issue_challenge(username, now);
        match self.accounts.get(username) {
            None => StartAuthnResponse {
                challenge,
                state: OvkState::Stable,
                credential_ids: None,
                ovpk: None,
                metadata: None,
                candidates: None,
            },
            Some(account) => {
                let migrating = account.migration.is_some();
                let candidates = match &account.migration {
                    Some(migration) => migration
                        .proposals
                        .iter()
                        .map(|p| CandidatePair { r: p.new_metadata.r, m: p.new_metadata.m })
                        .collect(),
                    None => Vec::new(),
                };
                StartAuthnResponse {
                    challenge,
                    state: if migrating { OvkState::Migrating } else { OvkState::Stable },
                    credential_ids: Some(account.active_ids().into_iter().collect()),
                    ovpk: Some(account.ovpk),
                    metadata: Some(account.metadata.clone()),
                    candidates: Some(candidates),
                }
            }
        }
    }

    /// Account creation: binds the first public key, the ownership public
    /// key, and its metadata, gated on both attestations passing the trust
    /// policy against a live challenge.
    pub fn register(&mut self, request: &RegisterRequest, now: u64) -> Result<RegisteredBody, ServiceError> {
        if self.accounts.contains_key(&request.username) {
            return Err(ServiceError::DuplicateUser);
        }
        if request.metadata.n < 1 {
            return Err(ServiceError::MalformedMetadata);
        }
        let challenge = request.key_attestation.challenge_echo.clone();
        if request.ovpk_attestation.challenge_echo != challenge {
            return Err(ServiceError::UntrustedAttestation(
                "attestations answer different challenges".into(),
            ));
        }
        self.take_challenge(&challenge, &request.username, now)?;
        self.check_attestation(
            &request.key_attestation,
            AttestedKind::AuthnKey,
            &request.public_key,
            &challenge,
        )?;
        self.check_attestation(
            &request.ovpk_attestation,
            AttestedKind::Ovpk,
            &request.ovpk,
            &challenge,
        )?;

        let credential_id = "cred-1".to_string();
        self.accounts.insert(
            request.username.clone(),
            Account {
                username: request.username.clone(),
                ovpk: request.ovpk,
                metadata: request.metadata.clone(),
                credentials: vec![CredentialRecord {
                    credential_id: credential_id.clone(),
                    public_key: request.public_key,
                    binding: CredentialBinding::Registration,
                    status: CredentialStatus::Active,
                }],
                migration: None,
                next_credential: 2,
            },
        );
        Ok(RegisteredBody { credential_id })
    }

    /// Seamless enrollment of an additional public key, authorized by an
    /// ownership signature instead of an interactive ceremony.
    pub fn enroll(&mut self, request: &EnrollRequest, now: u64) -> Result<EnrolledBody, ServiceError> {
        self.maybe_finalize(&request.username, now);
        let service_id = self.config.origin.clone();
        let Some(account) = self.accounts.get(&request.username) else {
            return Err(ServiceError::UnknownUser);
        };
        if account.migration.is_some() {
            return Err(ServiceError::MigrationInProgress);
        }
        let ovpk = account.ovpk;
        let capacity = account.metadata.n as usize;
        let active = account.active_count();

        let challenge = request.key_attestation.challenge_echo.clone();
        self.take_challenge(&challenge, &request.username, now)?;
        self.check_attestation(
            &request.key_attestation,
            AttestedKind::AuthnKey,
            &request.public_key,
            &challenge,
        )?;
        if !ovk::verify_registration(&ovpk, &service_id, &request.public_key, &request.ovk_signature)
        {
            return Err(ServiceError::BadOwnershipSignature);
        }
        if active >= capacity {
            return Err(ServiceError::NLimitExceeded);
        }

        let account = self.accounts.get_mut(&request.username).expect("checked above");
        let credential_id = format!("cred-{}", account.next_credential);
        account.next_credential += 1;
        account.credentials.push(CredentialRecord {
            credential_id: credential_id.clone(),
            public_key: request.public_key,
            binding: CredentialBinding::Enrollment { ovk_signature: request.ovk_signature },
            status: CredentialStatus::Active,
        });
        Ok(EnrolledBody { credential_id })
    }

    /// Challenge-response authentication; a piggybacked updating message is
    /// processed only after the signature verifies.
    pub fn authn(&mut self, request: &AuthnRequest, now: u64) -> Result<SessionBody, ServiceError> {
        self.maybe_finalize(&request.username, now);
        self.take_challenge(&request.challenge, &request.username, now)?;

        let service_id = self.config.origin.clone();
        let Some(account) = self.accounts.get(&request.username) else {
            // Same code as a bad credential id: authentication reveals no
            // more about account existence than necessary.
            return Err(ServiceError::UnknownCredential);
        };
        let credential = account
            .credential(&request.credential_id)
            .ok_or(ServiceError::UnknownCredential)?;
        if credential.status == CredentialStatus::Revoked {
            return Err(ServiceError::RevokedCredential);
        }
        let payload = authn_challenge_payload(&request.challenge, &service_id);
        if !crypto::verify(&credential.public_key, &payload, &request.signature) {
            return Err(ServiceError::BadSignature);
        }

        let update_ack = match &request.update {
            None => None,
            Some(message) => {
                Some(self.process_update(&request.username, &request.credential_id, message, now)?)
            }
        };
        Ok(SessionBody { granted: true, update_ack })
    }

    /// Records one updating message from an authenticated credential.
    /// Duplicate votes are idempotent; a credential that already voted for
    /// a different proposal keeps its first vote.
    pub fn process_update(
        &mut self,
        username: &str,
        sender_credential_id: &str,
        message: &UpdatingMessage,
        now: u64,
    ) -> Result<UpdateAck, ServiceError> {
        if message.sender_credential_id != sender_credential_id {
            return Err(ServiceError::MalformedUpdate);
        }
        let service_id = self.config.origin.clone();
        let migration_period = self.config.migration_period_secs;
        let seq = self.next_seq();

        let account = self.accounts.get_mut(username).ok_or(ServiceError::UnknownUser)?;
        let sender = account
            .credential(sender_credential_id)
            .ok_or(ServiceError::UnknownCredential)?;
        if sender.status == CredentialStatus::Revoked {
            return Err(ServiceError::RevokedCredential);
        }
        if !ovk::verify_update(&account.ovpk, &service_id, message) {
            return Err(ServiceError::BadUpdateSignature);
        }

        // The first valid updating message opens the window and freezes the
        // electorate to the credentials active right now.
        if account.migration.is_none() {
            account.migration = Some(MigrationState {
                opened_at: now,
                deadline: now + migration_period,
                electorate: account.active_ids(),
                proposals: Vec::new(),
            });
        }
        let migration = account.migration.as_mut().expect("just ensured");
        let deadline = migration.deadline;
        let ovpk_bytes = crypto::point_sec1(&message.new_ovpk);

        let already_voted_elsewhere = migration.proposals.iter().any(|p| {
            crypto::point_sec1(&p.new_ovpk) != ovpk_bytes
                && p.supporters.contains(sender_credential_id)
        });

        let index = match migration
            .proposals
            .iter()
            .position(|p| crypto::point_sec1(&p.new_ovpk) == ovpk_bytes)
        {
            Some(index) => {
                // Same replacement key with different metadata is not the
                // "same message"; reject rather than fork the proposal.
                if migration.proposals[index].new_metadata != message.new_metadata {
                    return Err(ServiceError::MalformedUpdate);
                }
                index
            }
            None => {
                migration.proposals.push(Proposal {
                    new_ovpk: message.new_ovpk,
                    new_metadata: message.new_metadata.clone(),
                    supporters: BTreeSet::new(),
                    first_seen_seq: seq,
                });
                migration.proposals.len() - 1
            }
        };
        if !already_voted_elsewhere {
            migration.proposals[index].supporters.insert(sender_credential_id.to_string());
        }

        let supporters = migration.proposals[index].supporters.len();
        let electorate = migration.electorate.len();
        if supporters * 2 > electorate {
            let report = finalize_account(account, now, true);
            return Ok(UpdateAck::Committed { revoked: report.revoked });
        }
        Ok(UpdateAck::Pending { deadline })
    }

    /// Serializes the full state as one JSON document.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("state serializes")
    }

    pub fn from_json(json: &str) -> Result<Self, ServiceError> {
        serde_json::from_str(json).map_err(|e| ServiceError::CorruptStore(e.to_string()))
    }

    pub fn persist(&self, path: &Path) -> Result<(), ServiceError> {
        std::fs::write(path, self.to_json()).map_err(|e| ServiceError::CorruptStore(e.to_string()))
    }

    pub fn restore(path: &Path) -> Result<Self, ServiceError> {
        let json = std::fs::read_to_string(path)
            .map_err(|e| ServiceError::CorruptStore(e.to_string()))?;
        Self::from_json(&json)
    }

    /// Structural invariants checked by tests after every mutation: active
    /// credentials never exceed the declared limit, every enrollment
    /// binding verifies under the currently bound ownership key, and
    /// migration bookkeeping stays consistent.
    pub fn assert_invariants(&self) -> Result<(), String> {
        for account in self.accounts.values() {
            if account.active_count() > account.metadata.n as usize {
                return Err(format!(
                    "account {} holds {} active credentials over limit {}",
                    account.username,
                    account.active_count(),
                    account.metadata.n
                ));
            }
            for credential in &account.credentials {
                if credential.status != CredentialStatus::Active {
                    continue;
                }
                if let CredentialBinding::Enrollment { ovk_signature } = &credential.binding {
                    let ok = ovk::verify_registration(
                        &account.ovpk,
                        &self.config.origin,
                        &credential.public_key,
                        ovk_signature,
                    );
                    if !ok {
                        return Err(format!(
                            "credential {} binding does not verify under current ovpk",
                            credential.credential_id
                        ));
                    }
                }
            }
            if let Some(migration) = &account.migration {
                let mut seen = BTreeSet::new();
                for proposal in &migration.proposals {
                    if !seen.insert(crypto::point_sec1(&proposal.new_ovpk)) {
                        return Err("duplicate proposal key".into());
                    }
                    for supporter in &proposal.supporters {
                        if !migration.electorate.contains(supporter) {
                            return Err(format!("supporter {supporter} outside electorate"));
                        }
                    }
                }
                let mut voters = BTreeSet::new();
                for proposal in &migration.proposals {
                    for supporter in &proposal.supporters {
                        if !voters.insert(supporter.clone()) {
                            return Err(format!("credential {supporter} voted twice"));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Commits the winning proposal: most supporters, earliest first seen on
/// ties. Supporters stay active re-bound under the new key; every other
/// credential is revoked.
fn finalize_account(account: &mut Account, now: u64, by_majority: bool) -> CommitReport {
    let migration = account.migration.take().expect("finalize requires open migration");
    let winner = migration
        .proposals
        .iter()
        .max_by_key(|p| (p.supporters.len(), std::cmp::Reverse(p.first_seen_seq)))
        .expect("migration always holds at least one proposal");

    account.ovpk = winner.new_ovpk;
    account.metadata = winner.new_metadata.clone();

    let mut revoked = Vec::new();
    let mut retained = Vec::new();
    for credential in &mut account.credentials {
        if credential.status != CredentialStatus::Active {
            continue;
        }
        if winner.supporters.contains(&credential.credential_id) {
            credential.binding = CredentialBinding::Rebound;
            retained.push(credential.credential_id.clone());
        } else {
            credential.status = CredentialStatus::Revoked;
            revoked.push(credential.credential_id.clone());
        }
    }
    CommitReport {
        username: account.username.clone(),
        revoked,
        retained,
        by_majority,
        committed_at: now,
    }
}

fn error_response(error: ServiceError) -> Message {
    Message::ErrorRsp(ErrorBody { code: error.code().to_string(), message: error.to_string() })
}

/// Routes one decoded frame to the matching endpoint.
pub fn dispatch(state: &mut ServiceState, message: &Message, now: u64) -> Message {
    match message {
        Message::StartAuthnReq(request) => {
            Message::StartAuthnRsp(state.start_authn(&request.username, now))
        }
        Message::RegisterReq(request) => match state.register(request, now) {
            Ok(body) => Message::RegisterRsp(body),
            Err(error) => error_response(error),
        },
        Message::EnrollReq(request) => match state.enroll(request, now) {
            Ok(body) => Message::EnrollRsp(body),
            Err(error) => error_response(error),
        },
        Message::AuthnReq(request) => match state.authn(request, now) {
            Ok(body) => Message::AuthnRsp(body),
            Err(error) => error_response(error),
        },
        other => Message::ErrorRsp(ErrorBody {
            code: "UnknownKind".into(),
            message: format!("{} is not a request", other.kind()),
        }),
    }
}
