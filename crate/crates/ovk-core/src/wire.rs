//! Canonical serialization of every cross-boundary message, plus the
//! in-process loopback transport.
//!
//! Messages are JSON with base64url byte fields, framed as
//! `{"body": {...}, "kind": "..."}` in canonical form (sorted keys, no
//! insignificant whitespace), so re-encoding a decoded frame is
//! byte-identical. Unknown kinds are rejected; unknown fields inside a
//! known body are ignored for forward compatibility.
//!
//! The trusted service identifier (`service_id_hint`) is attached by the
//! transport on the receiving side, standing in for TLS-derived origin
//! trust. It never travels inside the peer-controlled payload, which is
//! what lets tests impersonate origins to exercise the misdirected
//! registration defense.

use std::sync::{Arc, Mutex};

use p256::PublicKey;
use serde::{Deserialize, Serialize};

use crate::clock::Clock;
use crate::codec::{self, length_prefixed};
use crate::ovk::{CandidatePair, OvkMetadata, UpdatingMessage};
use crate::attestation::AttestationStatement;
use crate::service::ServiceState;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum WireError {
    /// Not valid JSON at all.
    #[error("frame parse error: {0}")]
    ParseError(String),
    /// Valid JSON but an unrecognized message kind.
    #[error("unknown frame kind: {0}")]
    UnknownKind(String),
    /// Recognized kind whose body violates a type invariant (bad lengths,
    /// off-curve points, missing fields).
    #[error("frame invariant violation: {0}")]
    InvariantViolation(String),
}

/// Client-side failure of a transport call.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ClientError {
    #[error(transparent)]
    Wire(#[from] WireError),
    /// The service answered with an error frame.
    #[error("service error {code}: {message}")]
    Service { code: String, message: String },
    #[error("transport failure: {0}")]
    Transport(String),
}

impl ClientError {
    pub fn is_code(&self, code: &str) -> bool {
        matches!(self, ClientError::Service { code: c, .. } if c == code)
    }
}

/// Whether the service currently has an open migration for the account.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OvkState {
    Stable,
    Migrating,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StartAuthnRequest {
    pub username: String,
}

/// Challenge response. For unknown accounts every optional field is absent,
/// which matches the shape of a hypothetical account carrying no ownership
/// metadata; the service never confirms account existence through shape.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StartAuthnResponse {
    #[serde(with = "codec::bytes32")]
    pub challenge: [u8; 32],
    pub state: OvkState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub credential_ids: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none", with = "codec::point_opt")]
    pub ovpk: Option<PublicKey>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metadata: Option<OvkMetadata>,
    /// `(r, m)` pairs of pending replacement proposals, earliest first.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidates: Option<Vec<CandidatePair>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegisterRequest {
    pub username: String,
    #[serde(with = "codec::point")]
    pub public_key: PublicKey,
    pub key_attestation: AttestationStatement,
    #[serde(with = "codec::point")]
    pub ovpk: PublicKey,
    pub metadata: OvkMetadata,
    pub ovpk_attestation: AttestationStatement,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegisteredBody {
    pub credential_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnrollRequest {
    pub username: String,
    #[serde(with = "codec::point")]
    pub public_key: PublicKey,
    pub key_attestation: AttestationStatement,
    #[serde(with = "codec::bytes64")]
    pub ovk_signature: [u8; 64],
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnrolledBody {
    pub credential_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuthnRequest {
    pub username: String,
    pub credential_id: String,
    #[serde(with = "codec::bytes32")]
    pub challenge: [u8; 32],
    #[serde(with = "codec::bytes64")]
    pub signature: [u8; 64],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub update: Option<UpdatingMessage>,
}

/// Service acknowledgement of a piggybacked updating message.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum UpdateAck {
    /// The proposal reached a majority and committed immediately.
    Committed { revoked: Vec<String> },
    /// The vote was recorded; the migration commits at the deadline.
    Pending { deadline: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionBody {
    pub granted: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub update_ack: Option<UpdateAck>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

/// Every message that crosses the device/service boundary.
// Messages are transient per-call values; the size spread between request
// and acknowledgement bodies is not worth boxing.
#[allow(clippy::large_enum_variant)]
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "body", rename_all = "snake_case")]
pub enum Message {
    StartAuthnReq(StartAuthnRequest),
    StartAuthnRsp(StartAuthnResponse),
    RegisterReq(RegisterRequest),
    RegisterRsp(RegisteredBody),
    EnrollReq(EnrollRequest),
    EnrollRsp(EnrolledBody),
    AuthnReq(AuthnRequest),
    AuthnRsp(SessionBody),
    ErrorRsp(ErrorBody),
}

impl Message {
    pub fn kind(&self) -> &'static str {
        match self {
            Message::StartAuthnReq(_) => "start_authn_req",
            Message::StartAuthnRsp(_) => "start_authn_rsp",
            Message::RegisterReq(_) => "register_req",
            Message::RegisterRsp(_) => "register_rsp",
            Message::EnrollReq(_) => "enroll_req",
            Message::EnrollRsp(_) => "enroll_rsp",
            Message::AuthnReq(_) => "authn_req",
            Message::AuthnRsp(_) => "authn_rsp",
            Message::ErrorRsp(_) => "error_rsp",
        }
    }

    const KNOWN_KINDS: [&'static str; 9] = [
        "start_authn_req",
        "start_authn_rsp",
        "register_req",
        "register_rsp",
        "enroll_req",
        "enroll_rsp",
        "authn_req",
        "authn_rsp",
        "error_rsp",
    ];

    /// HTTP endpoint path for request kinds.
    pub fn endpoint(&self) -> Option<&'static str> {
        match self {
            Message::StartAuthnReq(_) => Some("/start-authn"),
            Message::RegisterReq(_) => Some("/register"),
            Message::EnrollReq(_) => Some("/enroll"),
            Message::AuthnReq(_) => Some("/authn"),
            _ => None,
        }
    }
}

/// Canonical frame bytes for a message.
pub fn encode(message: &Message) -> Vec<u8> {
    codec::canonical_json(message).expect("messages always serialize")
}

/// Decodes and validates a frame. Deserialization runs the byte-field and
/// curve-point validators, so a successful decode satisfies every type
/// invariant.
pub fn decode(bytes: &[u8]) -> Result<Message, WireError> {
    let value: serde_json::Value =
        serde_json::from_slice(bytes).map_err(|e| WireError::ParseError(e.to_string()))?;
    let kind = value
        .get("kind")
        .and_then(|k| k.as_str())
        .ok_or_else(|| WireError::ParseError("missing kind".into()))?;
    if !Message::KNOWN_KINDS.contains(&kind) {
        return Err(WireError::UnknownKind(kind.to_string()));
    }
    serde_json::from_value(value).map_err(|e| WireError::InvariantViolation(e.to_string()))
}

/// Payload a device signs to answer an authentication challenge; the
/// service identifier comes from the transport's trusted hint on the device
/// side and from the service's own configuration on the other.
pub fn authn_challenge_payload(challenge: &[u8; 32], service_id: &str) -> Vec<u8> {
    length_prefixed("ovk/authn-challenge", &[challenge, service_id.as_bytes()])
}

/// Direction of a recorded frame, from the client's point of view.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Sent,
    Received,
}

#[derive(Debug, Clone)]
pub struct RecordedFrame {
    pub direction: Direction,
    pub kind: String,
    pub bytes: Vec<u8>,
}

/// Shared capture of every frame a transport moved; test suites scan it for
/// secret material.
#[derive(Debug, Clone, Default)]
pub struct FrameLog(Arc<Mutex<Vec<RecordedFrame>>>);

impl FrameLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, direction: Direction, bytes: &[u8]) {
        let kind = serde_json::from_slice::<serde_json::Value>(bytes)
            .ok()
            .and_then(|v| v.get("kind").and_then(|k| k.as_str()).map(String::from))
            .unwrap_or_else(|| "invalid".into());
        self.0
            .lock()
            .expect("frame log lock")
            .push(RecordedFrame { direction, kind, bytes: bytes.to_vec() });
    }

    pub fn snapshot(&self) -> Vec<RecordedFrame> {
        self.0.lock().expect("frame log lock").clone()
    }

    /// Hex of all recorded traffic, for substring secrecy scans.
    pub fn traffic_hex(&self) -> String {
        let mut blob = Vec::new();
        for frame in self.0.lock().expect("frame log lock").iter() {
            blob.extend_from_slice(&frame.bytes);
        }
        hex_of(&blob)
    }

    pub fn len(&self) -> usize {
        self.0.lock().expect("frame log lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn count_kind(&self, kind: &str) -> usize {
        self.0
            .lock()
            .expect("frame log lock")
            .iter()
            .filter(|frame| frame.kind == kind)
            .count()
    }
}

pub(crate) fn hex_of(bytes: &[u8]) -> String {
    let mut out = String::with_capacity(bytes.len() * 2);
    for byte in bytes {
        out.push_str(&format!("{byte:02x}"));
    }
    out
}

/// A client-side channel to one service, carrying the trusted origin.
pub trait ServiceClient {
    /// The service identifier the transport vouches for.
    fn origin(&self) -> &str;
    fn call(&mut self, request: &Message) -> Result<Message, ClientError>;
}

/// In-process transport: requests still round-trip through canonical frame
/// bytes so serialization is exercised and observable, but dispatch is a
/// direct call into the service state.
pub struct Loopback {
    state: Arc<Mutex<ServiceState>>,
    clock: Arc<dyn Clock>,
    origin_hint: String,
    log: Option<FrameLog>,
}

impl Loopback {
    /// Connects to a service, trusting the origin the service itself is
    /// configured with.
    pub fn new(state: Arc<Mutex<ServiceState>>, clock: Arc<dyn Clock>) -> Self {
        let origin_hint = state.lock().expect("service lock").config().origin.clone();
        Self { state, clock, origin_hint, log: None }
    }

    /// Overrides the trusted origin, impersonating some other service.
    pub fn with_origin(mut self, origin: impl Into<String>) -> Self {
        self.origin_hint = origin.into();
        self
    }

    pub fn with_log(mut self, log: FrameLog) -> Self {
        self.log = Some(log);
        self
    }
}

impl ServiceClient for Loopback {
    fn origin(&self) -> &str {
        &self.origin_hint
    }

    fn call(&mut self, request: &Message) -> Result<Message, ClientError> {
        let request_bytes = encode(request);
        if let Some(log) = &self.log {
            log.record(Direction::Sent, &request_bytes);
        }
        let request = decode(&request_bytes)?;

        let now = self.clock.now();
        let response = {
            let mut state = self.state.lock().expect("service lock");
            crate::service::dispatch(&mut state, &request, now)
        };

        let response_bytes = encode(&response);
        if let Some(log) = &self.log {
            log.record(Direction::Received, &response_bytes);
        }
        match decode(&response_bytes)? {
            Message::ErrorRsp(body) => {
                Err(ClientError::Service { code: body.code, message: body.message })
            }
            message => Ok(message),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn sample_messages() -> Vec<Message> {
        let mut rng = ChaCha20Rng::seed_from_u64(51);
        let keypair = crate::crypto::EcKeyPair::generate(&mut rng);
        let manufacturer = crate::attestation::Manufacturer::new("acme", &mut rng);
        let device = manufacturer.issue_device("model-a", &mut rng);
        let stmt = crate::attestation::attest(
            &device,
            crate::attestation::AttestedKind::AuthnKey,
            keypair.public(),
            &[],
            b"challenge",
        )
        .unwrap();
        let metadata = OvkMetadata { r: [1u8; 32], m: [2u8; 32], n: 3 };

        vec![
            Message::StartAuthnReq(StartAuthnRequest { username: "alice".into() }),
            Message::StartAuthnRsp(StartAuthnResponse {
                challenge: [3u8; 32],
                state: OvkState::Stable,
                credential_ids: Some(vec!["cred-1".into()]),
                ovpk: Some(*keypair.public()),
                metadata: Some(metadata.clone()),
                candidates: Some(vec![]),
            }),
            Message::RegisterReq(RegisterRequest {
                username: "alice".into(),
                public_key: *keypair.public(),
                key_attestation: stmt.clone(),
                ovpk: *keypair.public(),
                metadata: metadata.clone(),
                ovpk_attestation: stmt.clone(),
            }),
            Message::RegisterRsp(RegisteredBody { credential_id: "cred-1".into() }),
            Message::EnrollReq(EnrollRequest {
                username: "alice".into(),
                public_key: *keypair.public(),
                key_attestation: stmt,
                ovk_signature: [4u8; 64],
            }),
            Message::EnrollRsp(EnrolledBody { credential_id: "cred-2".into() }),
            Message::AuthnReq(AuthnRequest {
                username: "alice".into(),
                credential_id: "cred-1".into(),
                challenge: [3u8; 32],
                signature: [5u8; 64],
                update: None,
            }),
            Message::AuthnRsp(SessionBody {
                granted: true,
                update_ack: Some(UpdateAck::Pending { deadline: 86_400 }),
            }),
            Message::ErrorRsp(ErrorBody { code: "StaleChallenge".into(), message: "x".into() }),
        ]
    }

    #[test]
    fn every_kind_roundtrips_and_reencodes_identically() {
        for message in sample_messages() {
            let bytes = encode(&message);
            let decoded = decode(&bytes).unwrap();
            assert_eq!(decoded, message);
            assert_eq!(encode(&decoded), bytes, "{} canonical", message.kind());
        }
    }

    #[test]
    fn unknown_kind_rejected() {
        let err = decode(br#"{"body":{},"kind":"mystery_req"}"#).unwrap_err();
        assert!(matches!(err, WireError::UnknownKind(_)));

        let err = decode(b"not json").unwrap_err();
        assert!(matches!(err, WireError::ParseError(_)));
    }

    #[test]
    fn unknown_fields_ignored_for_forward_compatibility() {
        let mut rng = ChaCha20Rng::seed_from_u64(52);
        for i in 0..100 {
            let mut value: serde_json::Value = serde_json::from_slice(&encode(
                &Message::StartAuthnReq(StartAuthnRequest { username: "alice".into() }),
            ))
            .unwrap();
            use rand::Rng;
            let field = format!("x_{}_{}", i, rng.next_u32());
            value["body"][field] = serde_json::json!(rng.next_u64());
            let decoded = decode(&serde_json::to_vec(&value).unwrap()).unwrap();
            assert_eq!(
                decoded,
                Message::StartAuthnReq(StartAuthnRequest { username: "alice".into() })
            );
        }
    }

    #[test]
    fn invariant_violations_rejected() {
        // 31-byte challenge.
        let frame = serde_json::json!({
            "kind": "start_authn_rsp",
            "body": {"challenge": codec::b64(&[0u8; 31]), "state": "stable"}
        });
        let err = decode(&serde_json::to_vec(&frame).unwrap()).unwrap_err();
        assert!(matches!(err, WireError::InvariantViolation(_)));

        // Off-curve point.
        let frame = serde_json::json!({
            "kind": "register_rsp",
            "body": {"credential_id": "c"}
        });
        assert!(decode(&serde_json::to_vec(&frame).unwrap()).is_ok());
        let mut bad_point = vec![4u8; 65];
        bad_point[64] = 7;
        let frame = serde_json::json!({
            "kind": "start_authn_rsp",
            "body": {
                "challenge": codec::b64(&[0u8; 32]),
                "state": "stable",
                "ovpk": codec::b64(&bad_point),
            }
        });
        let err = decode(&serde_json::to_vec(&frame).unwrap()).unwrap_err();
        assert!(matches!(err, WireError::InvariantViolation(_)));
    }
}
