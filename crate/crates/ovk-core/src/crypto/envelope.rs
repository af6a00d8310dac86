//! Password-sealed envelopes in JWE compact serialization (RFC 7516).
//!
//! A random 128-bit content-encryption key encrypts the payload with
//! AES-128-GCM; the CEK itself is wrapped under a key derived from the
//! password with PBES2 (PBKDF2-HMAC-SHA-256 then AES-128-KW, RFC 7518 §4.8).
//! The protected header is the GCM associated data, so any modification of
//! any of the five segments fails authentication.

use aes_gcm::aead::{Aead, Payload};
use aes_gcm::{Aes128Gcm, KeyInit, Nonce};
use aes_kw::KwAes128;
use pbkdf2::pbkdf2_hmac;
use rand::CryptoRng;
use serde::{Deserialize, Serialize};
use sha2::Sha256;

use super::CryptoError;
use crate::codec::{b64, b64_decode};

/// JWE `alg` header value: PBES2 with HMAC-SHA-256 and 128-bit key wrap.
pub const PBES2_ALG: &str = "PBES2-HS256+A128KW";
/// JWE `enc` header value: AES-128-GCM.
pub const PBES2_ENC: &str = "A128GCM";

/// Default PBKDF2 iteration count for password wrapping.
pub const DEFAULT_PBES2_ITERATIONS: u32 = 210_000;
/// Lowest accepted iteration count (used by test profiles).
pub const MIN_PBES2_ITERATIONS: u32 = 1_000;

const SALT_LEN: usize = 16;
const CEK_LEN: usize = 16;
const IV_LEN: usize = 12;
const TAG_LEN: usize = 16;
const WRAPPED_CEK_LEN: usize = CEK_LEN + 8;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    alg: String,
    enc: String,
    p2s: String,
    p2c: u32,
}

/// A sealed payload as five dot-separated base64url segments:
/// `header . wrapped_cek . iv . ciphertext . tag`.
///
/// The header segment is kept as the exact bytes produced at seal time;
/// re-serializing it would break the associated-data binding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnvelopeCompact {
    header_b64: String,
    wrapped_cek: Vec<u8>,
    iv: [u8; IV_LEN],
    ciphertext: Vec<u8>,
    tag: [u8; TAG_LEN],
}

impl EnvelopeCompact {
    /// Renders the five-segment compact form.
    pub fn to_compact(&self) -> String {
        format!(
            "{}.{}.{}.{}.{}",
            self.header_b64,
            b64(&self.wrapped_cek),
            b64(&self.iv),
            b64(&self.ciphertext),
            b64(&self.tag),
        )
    }

    /// Parses the compact form. Structural problems (wrong segment count,
    /// bytes outside the base64url alphabet, impossible lengths) are
    /// [`CryptoError::ParseError`]; everything discovered later, during
    /// [`open`], is an authentication failure.
    pub fn from_compact(compact: &str) -> Result<Self, CryptoError> {
        let segments: Vec<&str> = compact.split('.').collect();
        if segments.len() != 5 {
            return Err(CryptoError::ParseError(format!(
                "expected 5 segments, got {}",
                segments.len()
            )));
        }
        let decode = |segment: &str, name: &str| {
            b64_decode(segment)
                .map_err(|e| CryptoError::ParseError(format!("segment {name}: {e}")))
        };
        let wrapped_cek = decode(segments[1], "wrapped_cek")?;
        let iv: [u8; IV_LEN] = decode(segments[2], "iv")?
            .try_into()
            .map_err(|_| CryptoError::ParseError("iv must be 12 bytes".into()))?;
        let ciphertext = decode(segments[3], "ciphertext")?;
        let tag: [u8; TAG_LEN] = decode(segments[4], "tag")?
            .try_into()
            .map_err(|_| CryptoError::ParseError("tag must be 16 bytes".into()))?;
        // Validate the header segment decodes; its content is checked at open.
        decode(segments[0], "header")?;
        Ok(Self {
            header_b64: segments[0].to_string(),
            wrapped_cek,
            iv,
            ciphertext,
            tag,
        })
    }
}

impl Serialize for EnvelopeCompact {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> Result<S::Ok, S::Error> {
        ser.serialize_str(&self.to_compact())
    }
}

impl<'de> Deserialize<'de> for EnvelopeCompact {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        let s = String::deserialize(de)?;
        Self::from_compact(&s).map_err(serde::de::Error::custom)
    }
}

/// PBES2 key derivation: PBKDF2-HMAC-SHA-256 with salt `alg || 0x00 || p2s`.
fn derive_kek(password: &str, p2s: &[u8], p2c: u32) -> [u8; CEK_LEN] {
    let mut salt = Vec::with_capacity(PBES2_ALG.len() + 1 + p2s.len());
    salt.extend_from_slice(PBES2_ALG.as_bytes());
    salt.push(0);
    salt.extend_from_slice(p2s);
    let mut kek = [0u8; CEK_LEN];
    pbkdf2_hmac::<Sha256>(password.as_bytes(), &salt, p2c, &mut kek);
    kek
}

/// Seals `plaintext` under `password` with the default iteration count.
pub fn seal<R: CryptoRng + ?Sized>(
    password: &str,
    plaintext: &[u8],
    rng: &mut R,
) -> Result<EnvelopeCompact, CryptoError> {
    seal_with_iterations(password, plaintext, DEFAULT_PBES2_ITERATIONS, rng)
}

/// Seals `plaintext` under `password`, with an explicit PBKDF2 iteration
/// count (at least [`MIN_PBES2_ITERATIONS`]).
pub fn seal_with_iterations<R: CryptoRng + ?Sized>(
    password: &str,
    plaintext: &[u8],
    iterations: u32,
    rng: &mut R,
) -> Result<EnvelopeCompact, CryptoError> {
    if password.is_empty() {
        return Err(CryptoError::InvalidInput("password must not be empty".into()));
    }
    if iterations < MIN_PBES2_ITERATIONS {
        return Err(CryptoError::InvalidInput(format!(
            "iteration count {iterations} below minimum {MIN_PBES2_ITERATIONS}"
        )));
    }

    let mut p2s = [0u8; SALT_LEN];
    let mut cek = [0u8; CEK_LEN];
    let mut iv = [0u8; IV_LEN];
    rng.fill_bytes(&mut p2s);
    rng.fill_bytes(&mut cek);
    rng.fill_bytes(&mut iv);

    let header = Header {
        alg: PBES2_ALG.into(),
        enc: PBES2_ENC.into(),
        p2s: b64(&p2s),
        p2c: iterations,
    };
    let header_b64 = b64(&serde_json::to_vec(&header).expect("header serializes"));

    let kek = derive_kek(password, &p2s, iterations);
    let mut wrapped = [0u8; WRAPPED_CEK_LEN];
    let wrapped_cek = KwAes128::new((&kek).into())
        .wrap_key(&cek, &mut wrapped)
        .expect("16-byte cek wraps into 24 bytes")
        .to_vec();

    let sealed = Aes128Gcm::new((&cek).into())
        .encrypt(
            &Nonce::from(iv),
            Payload { msg: plaintext, aad: header_b64.as_bytes() },
        )
        .expect("gcm encryption is infallible for valid lengths");
    let (ciphertext, tag) = sealed.split_at(sealed.len() - TAG_LEN);

    Ok(EnvelopeCompact {
        header_b64,
        wrapped_cek,
        iv,
        ciphertext: ciphertext.to_vec(),
        tag: tag.try_into().expect("gcm tag is 16 bytes"),
    })
}

/// Opens a sealed envelope. A wrong password, any tampered segment, or an
/// unexpected header all yield [`CryptoError::AuthFailure`].
pub fn open(password: &str, envelope: &EnvelopeCompact) -> Result<Vec<u8>, CryptoError> {
    let header_raw = b64_decode(&envelope.header_b64).map_err(|_| CryptoError::AuthFailure)?;
    let header: Header = serde_json::from_slice(&header_raw).map_err(|_| CryptoError::AuthFailure)?;
    if header.alg != PBES2_ALG || header.enc != PBES2_ENC {
        return Err(CryptoError::AuthFailure);
    }
    let p2s = b64_decode(&header.p2s).map_err(|_| CryptoError::AuthFailure)?;
    if header.p2c < 1 {
        return Err(CryptoError::AuthFailure);
    }

    let kek = derive_kek(password, &p2s, header.p2c);
    let mut cek = [0u8; CEK_LEN];
    KwAes128::new((&kek).into())
        .unwrap_key(&envelope.wrapped_cek, &mut cek)
        .map_err(|_| CryptoError::AuthFailure)?;

    let mut sealed = Vec::with_capacity(envelope.ciphertext.len() + TAG_LEN);
    sealed.extend_from_slice(&envelope.ciphertext);
    sealed.extend_from_slice(&envelope.tag);
    Aes128Gcm::new((&cek).into())
        .decrypt(
            &Nonce::from(envelope.iv),
            Payload { msg: &sealed, aad: envelope.header_b64.as_bytes() },
        )
        .map_err(|_| CryptoError::AuthFailure)
}

#[cfg(test)]
mod tests {
    use super::*;
    use aes_gcm::aead::Aead;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn rng() -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(11)
    }

    fn seal_test(password: &str, plaintext: &[u8]) -> EnvelopeCompact {
        seal_with_iterations(password, plaintext, MIN_PBES2_ITERATIONS, &mut rng()).unwrap()
    }

    #[test]
    fn roundtrip() {
        let envelope = seal_test("correct horse", b"battery staple");
        assert_eq!(open("correct horse", &envelope).unwrap(), b"battery staple");
    }

    #[test]
    fn wrong_password_fails() {
        let envelope = seal_test("correct horse", b"battery staple");
        assert_eq!(
            open("incorrect horse", &envelope).unwrap_err(),
            CryptoError::AuthFailure
        );
    }

    #[test]
    fn compact_form_has_five_segments_and_declared_algorithms() {
        let envelope = seal_test("pw", b"data");
        let compact = envelope.to_compact();
        let segments: Vec<&str> = compact.split('.').collect();
        assert_eq!(segments.len(), 5);

        let header: Header =
            serde_json::from_slice(&b64_decode(segments[0]).unwrap()).unwrap();
        assert_eq!(header.alg, "PBES2-HS256+A128KW");
        assert_eq!(header.enc, "A128GCM");
        assert_eq!(b64_decode(&header.p2s).unwrap().len(), SALT_LEN);

        let parsed = EnvelopeCompact::from_compact(&compact).unwrap();
        assert_eq!(parsed, envelope);
        assert_eq!(parsed.iv.len(), 12);
        assert_eq!(parsed.tag.len(), 16);
        assert_eq!(parsed.wrapped_cek.len(), WRAPPED_CEK_LEN);
    }

    /// Flip one base64url character in each of the five segments; every
    /// mutation must be rejected as an authentication failure.
    #[test]
    fn any_segment_mutation_fails_authentication() {
        let envelope = seal_test("pw", b"the quick brown fox");
        let compact = envelope.to_compact();
        let segment_spans: Vec<(usize, usize)> = {
            let mut spans = Vec::new();
            let mut start = 0;
            for segment in compact.split('.') {
                spans.push((start, start + segment.len()));
                start += segment.len() + 1;
            }
            spans
        };
        assert_eq!(segment_spans.len(), 5);

        for (index, (start, _end)) in segment_spans.iter().enumerate() {
            let mut mutated: Vec<u8> = compact.clone().into_bytes();
            let position = *start; // first character of the segment
            mutated[position] = if mutated[position] == b'A' { b'B' } else { b'A' };
            let mutated = String::from_utf8(mutated).unwrap();
            assert_ne!(mutated, compact);

            let result = EnvelopeCompact::from_compact(&mutated)
                .and_then(|envelope| open("pw", &envelope));
            assert_eq!(
                result.unwrap_err(),
                CryptoError::AuthFailure,
                "segment {index} mutation must fail authentication"
            );
        }
    }

    #[test]
    fn structural_problems_are_parse_errors() {
        assert!(matches!(
            EnvelopeCompact::from_compact("a.b.c.d"),
            Err(CryptoError::ParseError(_))
        ));
        assert!(matches!(
            EnvelopeCompact::from_compact("!!.b.c.d.e"),
            Err(CryptoError::ParseError(_))
        ));
    }

    #[test]
    fn rejects_empty_password_and_low_iterations() {
        assert!(matches!(
            seal_with_iterations("", b"x", MIN_PBES2_ITERATIONS, &mut rng()),
            Err(CryptoError::InvalidInput(_))
        ));
        assert!(matches!(
            seal_with_iterations("pw", b"x", MIN_PBES2_ITERATIONS - 1, &mut rng()),
            Err(CryptoError::InvalidInput(_))
        ));
    }

    // NIST GCM known-answer tests for AES-128-GCM (McGrew-Viega test cases).
    #[test]
    fn aes_128_gcm_matches_published_vectors() {
        struct Vector {
            key: &'static str,
            iv: &'static str,
            plaintext: &'static str,
            aad: &'static str,
            ciphertext: &'static str,
            tag: &'static str,
        }
        let vectors = [
            Vector {
                key: "00000000000000000000000000000000",
                iv: "000000000000000000000000",
                plaintext: "",
                aad: "",
                ciphertext: "",
                tag: "58e2fccefa7e3061367f1d57a4e7455a",
            },
            Vector {
                key: "00000000000000000000000000000000",
                iv: "000000000000000000000000",
                plaintext: "00000000000000000000000000000000",
                aad: "",
                ciphertext: "0388dace60b6a392f328c2b971b2fe78",
                tag: "ab6e47d42cec13bdf53a67b21257bddf",
            },
            Vector {
                key: "feffe9928665731c6d6a8f9467308308",
                iv: "cafebabefacedbaddecaf888",
                plaintext: "d9313225f88406e5a55909c5aff5269a86a7a9531534f7da2e4c303d8a318a72\
                            1c3c0c95956809532fcf0e2449a6b525b16aedf5aa0de657ba637b391aafd255",
                aad: "",
                ciphertext: "42831ec2217774244b7221b784d0d49ce3aa212f2c02a4e035c17e2329aca12e\
                             21d514b25466931c7d8f6a5aac84aa051ba30b396a0aac973d58e091473f5985",
                tag: "4d5c2af327cd64a62cf35abd2ba6fab4",
            },
            Vector {
                key: "feffe9928665731c6d6a8f9467308308",
                iv: "cafebabefacedbaddecaf888",
                plaintext: "d9313225f88406e5a55909c5aff5269a86a7a9531534f7da2e4c303d8a318a72\
                            1c3c0c95956809532fcf0e2449a6b525b16aedf5aa0de657ba637b39",
                aad: "feedfacedeadbeeffeedfacedeadbeefabaddad2",
                ciphertext: "42831ec2217774244b7221b784d0d49ce3aa212f2c02a4e035c17e2329aca12e\
                             21d514b25466931c7d8f6a5aac84aa051ba30b396a0aac973d58e091",
                tag: "5bc94fbc3221a5db94fae95ae7121a47",
            },
        ];

        for (index, vector) in vectors.iter().enumerate() {
            let strip = |s: &str| s.replace(char::is_whitespace, "");
            let key = hex::decode(strip(vector.key)).unwrap();
            let iv = hex::decode(strip(vector.iv)).unwrap();
            let plaintext = hex::decode(strip(vector.plaintext)).unwrap();
            let aad = hex::decode(strip(vector.aad)).unwrap();

            let cipher = Aes128Gcm::new(key.as_slice().try_into().unwrap());
            let nonce = Nonce::try_from(iv.as_slice()).unwrap();
            let sealed = cipher
                .encrypt(&nonce, Payload { msg: &plaintext, aad: &aad })
                .unwrap();
            let (ciphertext, tag) = sealed.split_at(sealed.len() - TAG_LEN);
            assert_eq!(hex::encode(ciphertext), strip(vector.ciphertext), "vector {index} ct");
            assert_eq!(hex::encode(tag), strip(vector.tag), "vector {index} tag");
        }
    }
}
