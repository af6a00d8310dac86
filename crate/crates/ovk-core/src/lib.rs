//! Ownership-verification-key management for public-key authentication.
//!
//! A user's authenticators agree on a shared seed over a password-protected
//! Diffie-Hellman exchange, then independently derive one ownership key pair
//! (OVSK/OVPK) per relying service. Services store the OVPK beside a small
//! piece of metadata and accept new device public keys only when they carry
//! a signature by the matching OVSK, so enrolling a sibling device needs no
//! interactive ceremony. When the set of devices changes, registered devices
//! propose a replacement OVPK signed by the previous OVSK and the service
//! commits the winning proposal after a majority or a migration deadline,
//! revoking credentials that did not follow the rotation.
//!
//! Module map:
//! - [`crypto`]: fixed cryptographic suite (HMAC KDF/MAC, P-256 keys and
//!   signatures, password-sealed envelopes)
//! - [`attestation`]: simplified manufacturer PKI and trust-policy checks
//! - [`seed_exchange`]: N-party password-authenticated seed agreement
//! - [`ovk`]: per-service key derivation, metadata, and update messages
//! - [`authenticator`]: device-side state machine and user flows
//! - [`service`]: relying-party state machine and endpoint handlers
//! - [`wire`]: canonical message encoding and the loopback transport
//! - [`clock`]: injectable time sources

pub mod attestation;
pub mod authenticator;
pub mod clock;
pub mod codec;
pub mod crypto;
pub mod ovk;
pub mod seed_exchange;
pub mod service;
pub mod wire;
