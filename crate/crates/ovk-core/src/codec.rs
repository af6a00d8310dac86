//! Base64url byte-field encoding shared by every wire-visible type, plus
//! canonical JSON serialization.
//!
//! All binary fields cross module and process boundaries as unpadded
//! base64url strings. Canonical form is compact JSON with lexicographically
//! sorted keys, so re-encoding a decoded message is byte-identical.

use base64::Engine;
use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use serde::{Deserialize, Serialize};

/// Encodes bytes as unpadded base64url.
pub fn b64(data: &[u8]) -> String {
    URL_SAFE_NO_PAD.encode(data)
}

/// Decodes unpadded base64url.
pub fn b64_decode(s: &str) -> Result<Vec<u8>, base64::DecodeError> {
    URL_SAFE_NO_PAD.decode(s)
}

/// Serializes a value to canonical JSON bytes: sorted keys, no insignificant
/// whitespace. Going through `serde_json::Value` sorts object keys.
pub fn canonical_json<T: Serialize>(value: &T) -> serde_json::Result<Vec<u8>> {
    let value = serde_json::to_value(value)?;
    serde_json::to_vec(&value)
}

/// Length-prefixed concatenation of byte fields.
///
/// Every MAC and signature payload in this crate is built this way so that
/// no two distinct field tuples can serialize to the same byte string.
pub fn length_prefixed(domain: &str, fields: &[&[u8]]) -> Vec<u8> {
    let mut out = Vec::with_capacity(
        domain.len() + 4 + fields.iter().map(|f| f.len() + 4).sum::<usize>(),
    );
    out.extend_from_slice(&(domain.len() as u32).to_be_bytes());
    out.extend_from_slice(domain.as_bytes());
    for field in fields {
        out.extend_from_slice(&(field.len() as u32).to_be_bytes());
        out.extend_from_slice(field);
    }
    out
}

/// Serde adapter for `Vec<u8>` fields as base64url strings.
pub mod bytes {
    use super::*;
    use serde::de::Error;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(data: &[u8], ser: S) -> Result<S::Ok, S::Error> {
        ser.serialize_str(&b64(data))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(de)?;
        b64_decode(&s).map_err(D::Error::custom)
    }
}

/// Serde adapter for fixed 32-byte fields as base64url strings.
pub mod bytes32 {
    use super::*;
    use serde::de::Error;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(data: &[u8; 32], ser: S) -> Result<S::Ok, S::Error> {
        ser.serialize_str(&b64(data))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> Result<[u8; 32], D::Error> {
        let s = String::deserialize(de)?;
        let raw = b64_decode(&s).map_err(D::Error::custom)?;
        raw.try_into()
            .map_err(|v: Vec<u8>| D::Error::custom(format!("expected 32 bytes, got {}", v.len())))
    }
}

/// Serde adapter for fixed 64-byte signature fields as base64url strings.
pub mod bytes64 {
    use super::*;
    use serde::de::Error;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(data: &[u8; 64], ser: S) -> Result<S::Ok, S::Error> {
        ser.serialize_str(&b64(data))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> Result<[u8; 64], D::Error> {
        let s = String::deserialize(de)?;
        let raw = b64_decode(&s).map_err(D::Error::custom)?;
        raw.try_into()
            .map_err(|v: Vec<u8>| D::Error::custom(format!("expected 64 bytes, got {}", v.len())))
    }
}

/// Serde adapter for P-256 points as base64url uncompressed SEC1 bytes.
///
/// Deserialization rejects off-curve encodings and the identity, so a decoded
/// message can never smuggle an invalid point past its type invariants.
pub mod point {
    use super::*;
    use p256::PublicKey;
    use p256::elliptic_curve::sec1::ToSec1Point;
    use serde::de::Error;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(point: &PublicKey, ser: S) -> Result<S::Ok, S::Error> {
        ser.serialize_str(&b64(point.to_sec1_point(false).as_bytes()))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> Result<PublicKey, D::Error> {
        let s = String::deserialize(de)?;
        let raw = b64_decode(&s).map_err(D::Error::custom)?;
        PublicKey::from_sec1_bytes(&raw).map_err(|_| D::Error::custom("invalid curve point"))
    }
}

/// Serde adapter for `Option<PublicKey>`.
pub mod point_opt {
    use super::*;
    use p256::PublicKey;
    use p256::elliptic_curve::sec1::ToSec1Point;
    use serde::de::Error;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(point: &Option<PublicKey>, ser: S) -> Result<S::Ok, S::Error> {
        match point {
            Some(p) => ser.serialize_some(&b64(p.to_sec1_point(false).as_bytes())),
            None => ser.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> Result<Option<PublicKey>, D::Error> {
        let s = Option::<String>::deserialize(de)?;
        match s {
            None => Ok(None),
            Some(s) => {
                let raw = b64_decode(&s).map_err(D::Error::custom)?;
                PublicKey::from_sec1_bytes(&raw)
                    .map(Some)
                    .map_err(|_| D::Error::custom("invalid curve point"))
            }
        }
    }
}
