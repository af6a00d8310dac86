//! Cryptographic suite used by every other module.
//!
//! Fixed algorithm choices:
//! - key derivation: HMAC-SHA-256 keyed by the seed, salted by the
//!   per-service random value
//! - MAC: HMAC-SHA-256
//! - asymmetric keys: secp256r1 (NIST P-256), signatures as fixed-width
//!   64-byte `r || s`
//! - key agreement: ECDH on secp256r1 as raw scalar-point multiplication
//! - password sealing: PBES2 (PBKDF2-HMAC-SHA-256 + AES-128-KW) wrapping a
//!   content key for AES-128-GCM, serialized in JWE compact form
//!
//! Everything here is pure or locally scoped; there is no shared mutable
//! state and all functions are safe for concurrent callers.

mod envelope;

pub use envelope::{
    DEFAULT_PBES2_ITERATIONS, EnvelopeCompact, MIN_PBES2_ITERATIONS, PBES2_ALG, PBES2_ENC, open,
    seal, seal_with_iterations,
};

use hmac::{Hmac, KeyInit, Mac};
use p256::ecdsa::signature::{Signer, Verifier};
use p256::ecdsa::{Signature, SigningKey, VerifyingKey};
use p256::elliptic_curve::point::AffineCoordinates;
use p256::elliptic_curve::sec1::ToSec1Point;
use p256::{FieldBytes, NonZeroScalar, ProjectivePoint, PublicKey};
use rand::CryptoRng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec;

type HmacSha256 = Hmac<Sha256>;

/// Errors from the cryptographic suite.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CryptoError {
    /// A length or structural precondition on an input failed.
    #[error("invalid input: {0}")]
    InvalidInput(String),
    /// A scalar candidate fell outside `[1, n-1]`; the caller regenerates
    /// its random input and retries.
    #[error("scalar candidate out of range")]
    OutOfRange,
    /// A byte string did not decode to a valid on-curve, non-identity point.
    #[error("invalid curve point")]
    InvalidPoint,
    /// Authenticated decryption or integrity verification failed.
    #[error("authentication failure")]
    AuthFailure,
    /// A serialized structure could not be parsed at all.
    #[error("parse error: {0}")]
    ParseError(String),
}

/// Input to the key derivation function: the long-term seed as the HMAC key
/// and the per-service public random value as the message.
#[derive(Debug, Clone)]
pub struct KdfInput {
    seed: [u8; 32],
    salt: Vec<u8>,
}

impl KdfInput {
    /// Requires a 32-byte seed and a salt of at least 16 bytes.
    pub fn new(seed: &[u8], salt: &[u8]) -> Result<Self, CryptoError> {
        let seed: [u8; 32] = seed
            .try_into()
            .map_err(|_| CryptoError::InvalidInput(format!("seed must be 32 bytes, got {}", seed.len())))?;
        if salt.len() < 16 {
            return Err(CryptoError::InvalidInput(format!(
                "salt must be at least 16 bytes, got {}",
                salt.len()
            )));
        }
        Ok(Self { seed, salt: salt.to_vec() })
    }
}

/// Derives 32 pseudorandom bytes: `HMAC-SHA-256(key = seed, msg = salt)`.
pub fn kdf(input: &KdfInput) -> [u8; 32] {
    mac(&input.seed, &input.salt)
}

/// `HMAC-SHA-256(key, message)`.
pub fn mac(key: &[u8; 32], message: &[u8]) -> [u8; 32] {
    let mut hmac = <HmacSha256 as KeyInit>::new_from_slice(key).expect("hmac accepts any key size");
    hmac.update(message);
    hmac.finalize().into_bytes().into()
}

/// Constant-time MAC verification.
pub fn mac_verify(key: &[u8; 32], message: &[u8], tag: &[u8]) -> bool {
    let mut hmac = <HmacSha256 as KeyInit>::new_from_slice(key).expect("hmac accepts any key size");
    hmac.update(message);
    hmac.verify_slice(tag).is_ok()
}

/// A secp256r1 key pair. The private scalar is strictly inside `[1, n-1]`
/// and the public point is always `scalar * G`.
#[derive(Clone)]
pub struct EcKeyPair {
    secret: NonZeroScalar,
    public: PublicKey,
}

impl EcKeyPair {
    /// Generates a fresh key pair by rejection-sampling 32-byte candidates
    /// from `rng` until one lands in `[1, n-1]`.
    pub fn generate<R: CryptoRng + ?Sized>(rng: &mut R) -> Self {
        loop {
            let mut candidate = [0u8; 32];
            rng.fill_bytes(&mut candidate);
            if let Ok(pair) = Self::from_candidate(&candidate) {
                return pair;
            }
        }
    }

    /// Interprets `candidate` as a big-endian integer `d` and returns the
    /// key pair `(d, d*G)` iff `1 <= d <= n-1`, else [`CryptoError::OutOfRange`].
    ///
    /// `OutOfRange` is a retry signal, not a failure: the caller regenerates
    /// its random input and starts over.
    pub fn from_candidate(candidate: &[u8; 32]) -> Result<Self, CryptoError> {
        let scalar: Option<NonZeroScalar> =
            NonZeroScalar::from_repr(FieldBytes::from(*candidate)).into();
        let secret = scalar.ok_or(CryptoError::OutOfRange)?;
        let public = PublicKey::from_affine((ProjectivePoint::GENERATOR * *secret).to_affine())
            .expect("nonzero scalar times generator is never identity");
        Ok(Self { secret, public })
    }

    pub fn public(&self) -> &PublicKey {
        &self.public
    }

    /// Uncompressed SEC1 encoding (65 bytes) of the public point.
    pub fn public_sec1(&self) -> Vec<u8> {
        point_sec1(&self.public)
    }

    /// Big-endian bytes of the private scalar. Used as MAC keying material
    /// for ownership-key metadata; handle with care.
    pub fn secret_bytes(&self) -> [u8; 32] {
        let repr: FieldBytes = (*self.secret).into();
        repr.into()
    }

    /// ECDSA-P256/SHA-256 signature over `message`, fixed-width `r || s`.
    pub fn sign(&self, message: &[u8]) -> [u8; 64] {
        let key = SigningKey::from(self.secret);
        let signature: Signature = key.sign(message);
        signature.to_bytes().into()
    }

    /// `self.secret * peer`, the Diffie-Hellman shared point.
    pub fn dh(&self, peer: &PublicKey) -> Result<PublicKey, CryptoError> {
        dh(&self.secret, peer)
    }

}

impl std::fmt::Debug for EcKeyPair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EcKeyPair")
            .field("public", &codec::b64(&self.public_sec1()))
            .finish_non_exhaustive()
    }
}

impl PartialEq for EcKeyPair {
    fn eq(&self, other: &Self) -> bool {
        self.secret_bytes() == other.secret_bytes()
    }
}
impl Eq for EcKeyPair {}

#[derive(Serialize, Deserialize)]
struct KeyPairRepr {
    #[serde(with = "codec::bytes32")]
    secret: [u8; 32],
}

impl Serialize for EcKeyPair {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> Result<S::Ok, S::Error> {
        KeyPairRepr { secret: self.secret_bytes() }.serialize(ser)
    }
}

impl<'de> Deserialize<'de> for EcKeyPair {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        let repr = KeyPairRepr::deserialize(de)?;
        Self::from_candidate(&repr.secret).map_err(serde::de::Error::custom)
    }
}

/// Verifies a fixed-width `r || s` ECDSA-P256/SHA-256 signature.
/// Any malformed or mismatched signature yields `false`.
pub fn verify(public: &PublicKey, message: &[u8], signature: &[u8]) -> bool {
    let Ok(raw): Result<&[u8; 64], _> = signature.try_into() else {
        return false;
    };
    let Ok(signature) = Signature::from_slice(raw) else {
        return false;
    };
    let Ok(key) = VerifyingKey::from_affine(*public.as_affine()) else {
        return false;
    };
    key.verify(message, &signature).is_ok()
}

/// `scalar * peer`. Errors with [`CryptoError::InvalidPoint`] if the result
/// would be the identity (never the case for a valid peer public key).
pub fn dh(scalar: &NonZeroScalar, peer: &PublicKey) -> Result<PublicKey, CryptoError> {
    let product = ProjectivePoint::from(*peer) * **scalar;
    PublicKey::from_affine(product.to_affine()).map_err(|_| CryptoError::InvalidPoint)
}

/// Uncompressed SEC1 encoding of a point (65 bytes).
pub fn point_sec1(point: &PublicKey) -> Vec<u8> {
    point.to_sec1_point(false).as_bytes().to_vec()
}

/// Decodes a SEC1 point, rejecting off-curve encodings and the identity.
pub fn point_from_sec1(bytes: &[u8]) -> Result<PublicKey, CryptoError> {
    PublicKey::from_sec1_bytes(bytes).map_err(|_| CryptoError::InvalidPoint)
}

/// Big-endian x-coordinate of a point.
pub fn point_x(point: &PublicKey) -> [u8; 32] {
    point.as_affine().x().into()
}

/// SHA-256.
pub fn sha256(data: &[u8]) -> [u8; 32] {
    Sha256::digest(data).into()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    /// secp256r1 group order n, big-endian.
    const GROUP_ORDER: [u8; 32] = [
        0xff, 0xff, 0xff, 0xff, 0x00, 0x00, 0x00, 0x00, 0xff, 0xff, 0xff, 0xff, 0xff, 0xff, 0xff,
        0xff, 0xbc, 0xe6, 0xfa, 0xad, 0xa7, 0x17, 0x9e, 0x84, 0xf3, 0xb9, 0xca, 0xc2, 0xfc, 0x63,
        0x25, 0x51,
    ];

    fn rng() -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(7)
    }

    // RFC 4231 test vectors for HMAC-SHA-256.
    #[test]
    fn hmac_matches_rfc4231_vectors() {
        struct Vector {
            key: Vec<u8>,
            data: Vec<u8>,
            tag: &'static str,
        }
        let vectors = [
            Vector {
                key: vec![0x0b; 20],
                data: b"Hi There".to_vec(),
                tag: "b0344c61d8db38535ca8afceaf0bf12b881dc200c9833da726e9376c2e32cff7",
            },
            Vector {
                key: b"Jefe".to_vec(),
                data: b"what do ya want for nothing?".to_vec(),
                tag: "5bdcc146bf60754e6a042426089575c75a003f089d2739839dec58b964ec3843",
            },
            Vector {
                key: vec![0xaa; 20],
                data: vec![0xdd; 50],
                tag: "773ea91e36800e46854db8ebd09181a72959098b3ef8c122d9635514ced565fe",
            },
            Vector {
                key: (0x01..=0x19).collect(),
                data: vec![0xcd; 50],
                tag: "82558a389a443c0ea4cc819899f2083a85f0faa3e578f8077a2e3ff46729665b",
            },
            Vector {
                key: vec![0xaa; 131],
                data: b"Test Using Larger Than Block-Size Key - Hash Key First".to_vec(),
                tag: "60e431591ee0b67f0d8a26aacbf5b77f8e0bc6213728c5140546040f0ee37f54",
            },
        ];
        for (i, v) in vectors.iter().enumerate() {
            let mut hmac = <HmacSha256 as KeyInit>::new_from_slice(&v.key).unwrap();
            hmac.update(&v.data);
            let tag: [u8; 32] = hmac.finalize().into_bytes().into();
            assert_eq!(hex::encode(tag), v.tag, "vector {i}");
        }
    }

    #[test]
    fn kdf_is_deterministic_and_salt_sensitive() {
        let input = KdfInput::new(&[9u8; 32], &[1u8; 32]).unwrap();
        assert_eq!(kdf(&input), kdf(&input));

        let mut rng = rng();
        let seed = [3u8; 32];
        for _ in 0..1000 {
            let mut a = [0u8; 32];
            let mut b = [0u8; 32];
            rng.fill_bytes(&mut a);
            rng.fill_bytes(&mut b);
            if a == b {
                continue;
            }
            let out_a = kdf(&KdfInput::new(&seed, &a).unwrap());
            let out_b = kdf(&KdfInput::new(&seed, &b).unwrap());
            assert_ne!(out_a, out_b);
        }
    }

    #[test]
    fn kdf_rejects_bad_lengths() {
        assert!(matches!(
            KdfInput::new(&[0u8; 31], &[0u8; 16]),
            Err(CryptoError::InvalidInput(_))
        ));
        assert!(matches!(
            KdfInput::new(&[0u8; 32], &[0u8; 15]),
            Err(CryptoError::InvalidInput(_))
        ));
    }

    #[test]
    fn mac_verifies_and_rejects_bit_flips() {
        let key = [5u8; 32];
        let tag = mac(&key, b"x");
        assert!(mac_verify(&key, b"x", &tag));
        // Exhaustive over all 8 bit positions of a 1-byte message.
        for bit in 0..8 {
            let flipped = [b'x' ^ (1 << bit)];
            assert!(!mac_verify(&key, &flipped, &tag), "bit {bit}");
        }
    }

    #[test]
    fn scalar_candidate_range_boundaries() {
        assert_eq!(
            EcKeyPair::from_candidate(&[0u8; 32]).unwrap_err(),
            CryptoError::OutOfRange
        );
        assert_eq!(
            EcKeyPair::from_candidate(&GROUP_ORDER).unwrap_err(),
            CryptoError::OutOfRange
        );

        let mut one = [0u8; 32];
        one[31] = 1;
        let pair = EcKeyPair::from_candidate(&one).unwrap();
        assert_eq!(
            PublicKey::from_affine(p256::AffinePoint::GENERATOR).unwrap(),
            *pair.public(),
            "scalar 1 maps to the generator"
        );

        let mut order_minus_one = GROUP_ORDER;
        order_minus_one[31] -= 1;
        assert!(EcKeyPair::from_candidate(&order_minus_one).is_ok());
    }

    // RFC 6979 A.2.5 deterministic ECDSA known answers for P-256/SHA-256.
    #[test]
    fn ecdsa_matches_rfc6979_vectors() {
        let secret =
            hex::decode("c9afa9d845ba75166b5c215767b1d6934e50c3db36e89b127b8a622b120f6721")
                .unwrap();
        let pair = EcKeyPair::from_candidate(&secret.try_into().unwrap()).unwrap();
        assert_eq!(
            hex::encode(pair.public_sec1()),
            "0460fed4ba255a9d31c961eb74c6356d68c049b8923b61fa6ce669622e60f29fb6\
             7903fe1008b8bc99a41ae9e95628bc64f2f1b20c2d7e9f5177a3c294d4462299"
                .replace(char::is_whitespace, "")
        );

        let cases = [
            (
                &b"sample"[..],
                "efd48b2aacb6a8fd1140dd9cd45e81d69d2c877b56aaf991c34d0ea84eaf3716\
                 f7cb1c942d657c41d436c7a1b6e29f65f3e900dbb9aff4064dc4ab2f843acda8",
            ),
            (
                &b"test"[..],
                "f1abb023518351cd71d881567b1ea663ed3efcf6c5132b354f28d3b0b7d38367\
                 019f4113742a2b14bd25926b49c649155f267e60d3814b4c0cc84250e46f0083",
            ),
        ];
        for (message, expected) in cases {
            let signature = pair.sign(message);
            assert_eq!(
                hex::encode(signature),
                expected.replace(char::is_whitespace, "")
            );
            assert!(verify(pair.public(), message, &signature));
        }
    }

    #[test]
    fn signature_rejects_message_tampering() {
        let mut rng = rng();
        let pair = EcKeyPair::generate(&mut rng);
        for _ in 0..100 {
            let mut message = [0u8; 24];
            rng.fill_bytes(&mut message);
            let signature = pair.sign(&message);
            assert!(verify(pair.public(), &message, &signature));

            let mut tampered = message;
            let index = (rng.next_u32() as usize) % tampered.len();
            tampered[index] ^= 0x01;
            assert!(!verify(pair.public(), &tampered, &signature));
        }
        // Malformed 64-byte signature and wrong-length signature both fail.
        assert!(!verify(pair.public(), b"m", &[0u8; 64]));
        assert!(!verify(pair.public(), b"m", &[0u8; 63]));
    }

    #[test]
    fn dh_commutes() {
        let mut rng = rng();
        let a = EcKeyPair::generate(&mut rng);
        let b = EcKeyPair::generate(&mut rng);
        assert_eq!(a.dh(b.public()).unwrap(), b.dh(a.public()).unwrap());
    }

    #[test]
    fn dh_identity_scalar_fixes_points() {
        let mut one = [0u8; 32];
        one[31] = 1;
        let unit = EcKeyPair::from_candidate(&one).unwrap();
        let mut rng = rng();
        let p = EcKeyPair::generate(&mut rng);
        assert_eq!(unit.dh(p.public()).unwrap(), *p.public());
    }

    #[test]
    fn chained_dh_is_order_independent() {
        let mut rng = rng();
        let scalars: Vec<EcKeyPair> = (0..3).map(|_| EcKeyPair::generate(&mut rng)).collect();
        let base = EcKeyPair::generate(&mut rng);

        let mut results = Vec::new();
        let permutations: [[usize; 3]; 6] = [
            [0, 1, 2],
            [0, 2, 1],
            [1, 0, 2],
            [1, 2, 0],
            [2, 0, 1],
            [2, 1, 0],
        ];
        for order in permutations {
            let mut point = *base.public();
            for index in order {
                point = scalars[index].dh(&point).unwrap();
            }
            results.push(point_sec1(&point));
        }
        assert!(results.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn determinism_many_trials() {
        let mut rng = rng();
        for _ in 0..10_000 {
            let mut seed = [0u8; 32];
            let mut salt = [0u8; 16];
            rng.fill_bytes(&mut seed);
            rng.fill_bytes(&mut salt);
            let input = KdfInput::new(&seed, &salt).unwrap();
            assert_eq!(kdf(&input), kdf(&input));
        }
    }

    #[test]
    fn keypair_serde_roundtrip() {
        let mut rng = rng();
        let pair = EcKeyPair::generate(&mut rng);
        let json = serde_json::to_string(&pair).unwrap();
        let back: EcKeyPair = serde_json::from_str(&json).unwrap();
        assert_eq!(pair, back);
        assert!(!json.contains("public"), "only the scalar is persisted");
    }
}
