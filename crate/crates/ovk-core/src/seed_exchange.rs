//! Password-authenticated agreement of one 256-bit seed among N >= 2
//! devices over an untrusted channel.
//!
//! Parties are arranged in a ring by small temporary identifiers: party `i`
//! sends to `(i+1) mod N` and receives from `(i-1) mod N`. In round 1 each
//! party circulates its ephemeral DH public share; in every later round it
//! multiplies the received point by its own ephemeral scalar and forwards
//! the result. After `N-1` received rounds every party holds the full
//! product of all ephemeral scalars times the generator, and the agreed
//! seed is SHA-256 of that point's x-coordinate.
//!
//! Every message is sealed under the user-entered password (see
//! [`crate::crypto::EnvelopeCompact`]), so eavesdroppers learn nothing
//! useful and any tampering aborts the negotiation. Round-1 payloads carry
//! an attestation of the sender's DH share; later rounds relay the
//! attestation received in the previous round, so after the final round
//! every party has seen an attested model name for each of its N-1 peers.

use p256::PublicKey;
use rand::CryptoRng;
use serde::{Deserialize, Serialize};
use zeroize::Zeroize;

use crate::attestation::{self, AttestationStatement, AttestedKind, DeviceIdentity};
use crate::codec::{self, length_prefixed};
use crate::crypto::{self, CryptoError, EcKeyPair, EnvelopeCompact};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ExchangeError {
    /// Wrong password or a tampered message; the negotiation is aborted.
    #[error("envelope authentication failure")]
    AuthFailure,
    /// The decrypted payload did not contain a valid curve point.
    #[error("invalid curve point in round payload")]
    InvalidPoint,
    /// A message arrived outside the expected order, or the negotiation is
    /// already finished or aborted.
    #[error("protocol order violation: {0}")]
    ProtocolOrder(String),
    /// Rejected configuration.
    #[error("invalid negotiation config: {0}")]
    Config(String),
}

impl From<CryptoError> for ExchangeError {
    fn from(err: CryptoError) -> Self {
        match err {
            CryptoError::AuthFailure | CryptoError::ParseError(_) => ExchangeError::AuthFailure,
            CryptoError::InvalidPoint => ExchangeError::InvalidPoint,
            other => ExchangeError::Config(other.to_string()),
        }
    }
}

/// A 256-bit group-agreed secret. Zeroized on drop; debug output and wire
/// encodings never contain the raw bytes.
#[derive(Clone, PartialEq, Eq)]
pub struct Seed([u8; 32]);

impl Seed {
    pub fn bytes(&self) -> &[u8; 32] {
        &self.0
    }

    /// Short non-reversible identifier for logs and CLI output.
    pub fn fingerprint(&self) -> String {
        let digest = crypto::sha256(&self.0);
        codec::b64(&digest[..8])
    }
}

impl Drop for Seed {
    fn drop(&mut self) {
        self.0.zeroize();
    }
}

impl From<[u8; 32]> for Seed {
    fn from(bytes: [u8; 32]) -> Self {
        Seed(bytes)
    }
}

impl std::fmt::Debug for Seed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Seed({})", self.fingerprint())
    }
}

impl Serialize for Seed {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> Result<S::Ok, S::Error> {
        ser.serialize_str(&codec::b64(&self.0))
    }
}

impl<'de> Deserialize<'de> for Seed {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        let s = String::deserialize(de)?;
        let raw = codec::b64_decode(&s).map_err(serde::de::Error::custom)?;
        let bytes: [u8; 32] = raw
            .try_into()
            .map_err(|_| serde::de::Error::custom("seed must be 32 bytes"))?;
        Ok(Seed(bytes))
    }
}

/// A finalized seed with its provenance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub seed: Seed,
    /// Monotone generation counter; newer re-shares get higher epochs.
    pub epoch: u64,
    /// Attested model names of the other parties, ordered by party id.
    pub peer_models: Vec<String>,
    /// Set by the owning device according to its retention policy.
    pub expires_at: Option<u64>,
}

impl SeedRecord {
    /// Number of parties that shared this seed (peers plus self).
    pub fn party_count(&self) -> u32 {
        self.peer_models.len() as u32 + 1
    }
}

/// Per-party parameters for one negotiation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NegotiationConfig {
    pub password: String,
    pub self_id: u32,
    pub n_parties: u32,
    pub epoch: u64,
    /// PBKDF2 iteration count for the password envelopes.
    pub pbes2_iterations: u32,
}

impl NegotiationConfig {
    pub fn new(
        password: impl Into<String>,
        self_id: u32,
        n_parties: u32,
        epoch: u64,
    ) -> Result<Self, ExchangeError> {
        let password = password.into();
        if n_parties < 2 {
            return Err(ExchangeError::Config("need at least 2 parties".into()));
        }
        if self_id >= n_parties {
            return Err(ExchangeError::Config(format!(
                "party id {self_id} out of range for {n_parties} parties"
            )));
        }
        if password.is_empty() {
            return Err(ExchangeError::Config("password must not be empty".into()));
        }
        Ok(Self {
            password,
            self_id,
            n_parties,
            epoch,
            pbes2_iterations: crypto::DEFAULT_PBES2_ITERATIONS,
        })
    }

    pub fn with_iterations(mut self, iterations: u32) -> Self {
        self.pbes2_iterations = iterations;
        self
    }

    /// Party ids must be unique within one negotiation; the user assigns
    /// them, so duplicates are rejected before any message is produced.
    pub fn validate_set(configs: &[NegotiationConfig]) -> Result<(), ExchangeError> {
        let mut seen = std::collections::BTreeSet::new();
        for config in configs {
            if !seen.insert(config.self_id) {
                return Err(ExchangeError::Config(format!(
                    "duplicate party id {}",
                    config.self_id
                )));
            }
        }
        Ok(())
    }
}

/// One sealed ring message. Serializes as `{round, from, to, envelope}` with
/// the envelope in five-segment compact form.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundMessage {
    pub round: u32,
    #[serde(rename = "from")]
    pub from_id: u32,
    #[serde(rename = "to")]
    pub to_id: u32,
    pub envelope: EnvelopeCompact,
}

/// Plaintext carried inside a round envelope.
#[derive(Debug, Serialize, Deserialize)]
struct RoundPayload {
    #[serde(with = "codec::point")]
    point: PublicKey,
    attestation: AttestationStatement,
}

/// Result of feeding one incoming message to the state machine.
#[derive(Debug)]
pub enum StepOutcome {
    /// Forward this message to the next party.
    Send(RoundMessage),
    /// The negotiation finished; the ephemeral scalar has been discarded.
    Finalized(SeedRecord),
}

/// Challenge context bound into DH-share attestations so they cannot be
/// replayed across negotiations or parties.
fn share_context(epoch: u64, n_parties: u32, origin_id: u32) -> Vec<u8> {
    length_prefixed(
        "ovk/dh-share-context",
        &[&epoch.to_be_bytes(), &n_parties.to_be_bytes(), &origin_id.to_be_bytes()],
    )
}

/// One party's in-progress negotiation.
///
/// Single-threaded by design: one state machine per device, distinct
/// negotiations fully independent.
pub struct Negotiation {
    config: NegotiationConfig,
    ephemeral: Option<EcKeyPair>,
    share_public: PublicKey,
    expected_round: u32,
    /// origin party id -> attested model name
    collected_models: std::collections::BTreeMap<u32, String>,
    /// Attestation received in the previous round, relayed onward.
    relay: Option<AttestationStatement>,
    aborted: bool,
    finished: bool,
}

impl std::fmt::Debug for Negotiation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Negotiation")
            .field("self_id", &self.config.self_id)
            .field("expected_round", &self.expected_round)
            .field("aborted", &self.aborted)
            .field("finished", &self.finished)
            .finish_non_exhaustive()
    }
}

impl Negotiation {
    /// Generates the ephemeral share and the round-1 message for the next
    /// party in the ring. The private scalar lives only inside the returned
    /// state machine.
    pub fn start<R: CryptoRng + ?Sized>(
        config: NegotiationConfig,
        device: &DeviceIdentity,
        rng: &mut R,
    ) -> Result<(Self, RoundMessage), ExchangeError> {
        let ephemeral = EcKeyPair::generate(rng);
        let share_public = *ephemeral.public();
        let context = share_context(config.epoch, config.n_parties, config.self_id);
        let statement =
            attestation::attest(device, AttestedKind::DhShare, &share_public, &[], &context)
                .map_err(|e| ExchangeError::Config(e.to_string()))?;

        let negotiation = Self {
            config,
            ephemeral: Some(ephemeral),
            share_public,
            expected_round: 1,
            collected_models: Default::default(),
            relay: None,
            aborted: false,
            finished: false,
        };
        let message = negotiation.sealed_message(1, share_public, statement, rng)?;
        Ok((negotiation, message))
    }

    /// The public half of this party's ephemeral share.
    pub fn public_share(&self) -> &PublicKey {
        &self.share_public
    }

    fn sealed_message<R: CryptoRng + ?Sized>(
        &self,
        round: u32,
        point: PublicKey,
        attestation: AttestationStatement,
        rng: &mut R,
    ) -> Result<RoundMessage, ExchangeError> {
        let payload = RoundPayload { point, attestation };
        let plaintext = codec::canonical_json(&payload)
            .map_err(|e| ExchangeError::Config(e.to_string()))?;
        let envelope = crypto::seal_with_iterations(
            &self.config.password,
            &plaintext,
            self.config.pbes2_iterations,
            rng,
        )?;
        Ok(RoundMessage {
            round,
            from_id: self.config.self_id,
            to_id: (self.config.self_id + 1) % self.config.n_parties,
            envelope,
        })
    }

    /// Feeds the message expected this round. Returns either the message to
    /// forward or the finalized seed record.
    pub fn step<R: CryptoRng + ?Sized>(
        &mut self,
        incoming: &RoundMessage,
        rng: &mut R,
    ) -> Result<StepOutcome, ExchangeError> {
        if self.aborted {
            return Err(ExchangeError::ProtocolOrder("negotiation aborted".into()));
        }
        if self.finished {
            return Err(ExchangeError::ProtocolOrder("negotiation finished".into()));
        }
        let n = self.config.n_parties;
        let expected_from = (self.config.self_id + n - 1) % n;
        if incoming.to_id != self.config.self_id {
            return Err(ExchangeError::ProtocolOrder(format!(
                "message addressed to {}, not {}",
                incoming.to_id, self.config.self_id
            )));
        }
        if incoming.from_id != expected_from {
            return Err(ExchangeError::ProtocolOrder(format!(
                "expected sender {expected_from}, got {}",
                incoming.from_id
            )));
        }
        if incoming.round != self.expected_round {
            return Err(ExchangeError::ProtocolOrder(format!(
                "expected round {}, got {}",
                self.expected_round, incoming.round
            )));
        }

        let plaintext = match crypto::open(&self.config.password, &incoming.envelope) {
            Ok(plaintext) => plaintext,
            Err(_) => {
                self.abort();
                return Err(ExchangeError::AuthFailure);
            }
        };
        let payload: RoundPayload = serde_json::from_slice(&plaintext).map_err(|_| {
            self.abort();
            ExchangeError::InvalidPoint
        })?;

        // The attestation carried this round originated at the party
        // `round` hops behind us in the ring.
        let origin = (self.config.self_id + n - incoming.round) % n;
        let context = share_context(self.config.epoch, n, origin);
        let statement = &payload.attestation;
        let attestation_ok = statement.kind == AttestedKind::DhShare
            && statement.challenge_echo == context
            && attestation::statement_self_consistent(statement)
            && (incoming.round != 1 || statement.subject_point == payload.point);
        if !attestation_ok {
            self.abort();
            return Err(ExchangeError::AuthFailure);
        }
        self.collected_models.insert(origin, statement.model_name.clone());

        let ephemeral = self
            .ephemeral
            .as_ref()
            .expect("scalar present while negotiation in progress");
        let product = ephemeral.dh(&payload.point)?;

        if incoming.round < n - 1 {
            let relay = payload.attestation;
            self.relay = Some(relay.clone());
            self.expected_round += 1;
            let message = self.sealed_message(incoming.round + 1, product, relay, rng)?;
            Ok(StepOutcome::Send(message))
        } else {
            let seed = Seed(crypto::sha256(&crypto::point_x(&product)));
            let peer_models = self.collected_models.values().cloned().collect();
            self.ephemeral = None;
            self.finished = true;
            Ok(StepOutcome::Finalized(SeedRecord {
                seed,
                epoch: self.config.epoch,
                peer_models,
                expires_at: None,
            }))
        }
    }

    /// Discards the ephemeral scalar and refuses all further steps.
    /// Idempotent; never touches previously finalized seeds.
    pub fn abort(&mut self) {
        self.ephemeral = None;
        self.aborted = true;
    }

    pub fn is_aborted(&self) -> bool {
        self.aborted
    }
}
