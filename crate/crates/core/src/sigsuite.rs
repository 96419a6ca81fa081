//! Signature schemes used to authenticate model updates.
//!
//! Three backends sit behind one interface:
//!
//! - `PQC`: ML-DSA-65 (FIPS 204), hedged signing, 3309-byte signatures.
//! - `ECDSA`: secp256k1 with SHA-256 prehashing and DER-encoded signatures.
//! - `NONE`: a hash-only baseline where the "signature" is SHA-256 of the message.
//!
//! Model updates are hashed with SHA3-256 over their canonical encoding before signing.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use fips204::ml_dsa_65;
use fips204::traits::{KeyGen, SerDes, Signer as _, Verifier as _};
use k256::ecdsa::signature::{Signer as _, Verifier as _};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::Sha256;
use sha3::{Digest, Sha3_256};
use thiserror::Error;

use crate::fedcore::ModelParams;

pub const MLDSA65_PUBLIC_KEY_LEN: usize = ml_dsa_65::PK_LEN;
pub const MLDSA65_PRIVATE_KEY_LEN: usize = ml_dsa_65::SK_LEN;
pub const MLDSA65_SIGNATURE_LEN: usize = ml_dsa_65::SIG_LEN;

/// Public token of the hash-only baseline (26 bytes).
pub const NONE_PUBLIC_TOKEN: &[u8] = b"PQS-BFL-NONE-PUBLIC-TOKEN0";
/// Private token of the hash-only baseline (27 bytes).
pub const NONE_PRIVATE_TOKEN: &[u8] = b"PQS-BFL-NONE-PRIVATE-TOKEN0";

const ECDSA_SECRET_LEN: usize = 32;
const ECDSA_DER_MIN: usize = 8;
const ECDSA_DER_MAX: usize = 72;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SigError {
    #[error("unsupported signature scheme `{0}`")]
    UnsupportedScheme(String),
    #[error("malformed {scheme} key: {reason}")]
    MalformedKey { scheme: SchemeId, reason: String },
    #[error("signature scheme {signature} does not match expected scheme {expected}")]
    SchemeMismatch { expected: SchemeId, signature: SchemeId },
    #[error("signing failed: {0}")]
    SigningFailed(String),
    #[error("trials must be at least 1")]
    NoTrials,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SchemeId {
    #[serde(rename = "PQC")]
    Pqc,
    #[serde(rename = "ECDSA")]
    Ecdsa,
    #[serde(rename = "NONE")]
    None,
}

impl SchemeId {
    pub const ALL: [SchemeId; 3] = [SchemeId::Pqc, SchemeId::Ecdsa, SchemeId::None];

    pub fn as_str(self) -> &'static str {
        match self {
            SchemeId::Pqc => "PQC",
            SchemeId::Ecdsa => "ECDSA",
            SchemeId::None => "NONE",
        }
    }

    /// Stable one-byte tag used in canonical encodings.
    pub fn tag(self) -> u8 {
        match self {
            SchemeId::Pqc => 1,
            SchemeId::Ecdsa => 2,
            SchemeId::None => 3,
        }
    }
}

impl fmt::Display for SchemeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SchemeId {
    type Err = SigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "PQC" | "ML-DSA-65" | "MLDSA65" => Ok(SchemeId::Pqc),
            "ECDSA" => Ok(SchemeId::Ecdsa),
            "NONE" => Ok(SchemeId::None),
            _ => Err(SigError::UnsupportedScheme(s.to_string())),
        }
    }
}

/// A 32-byte digest.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Hash32(pub [u8; 32]);

impl Hash32 {
    pub const ZERO: Hash32 = Hash32([0u8; 32]);

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_slice(bytes: &[u8]) -> Option<Self> {
        <[u8; 32]>::try_from(bytes).ok().map(Hash32)
    }
}

impl fmt::Debug for Hash32 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Hash32({})", self.to_hex())
    }
}

impl fmt::Display for Hash32 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for Hash32 {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Hash32 {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        let bytes = hex::decode(&s).map_err(serde::de::Error::custom)?;
        Hash32::from_slice(&bytes).ok_or_else(|| serde::de::Error::custom("expected 32 bytes"))
    }
}

pub fn sha3_256(bytes: &[u8]) -> Hash32 {
    Hash32(Sha3_256::digest(bytes).into())
}

pub fn sha256(bytes: &[u8]) -> [u8; 32] {
    Sha256::digest(bytes).into()
}

/// SHA3-256 over the canonical byte encoding of `params`.
pub fn digest_model(params: &ModelParams) -> Hash32 {
    sha3_256(&params.canonical_bytes())
}

#[derive(Clone, PartialEq, Eq)]
pub struct KeyPair {
    pub scheme: SchemeId,
    pub public_key: Vec<u8>,
    pub private_key: Vec<u8>,
}

impl fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyPair")
            .field("scheme", &self.scheme)
            .field("public_key", &format_args!("{} bytes", self.public_key.len()))
            .field("private_key", &format_args!("<{} bytes>", self.private_key.len()))
            .finish()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Signature {
    pub scheme: SchemeId,
    #[serde(with = "hex_bytes")]
    pub bytes: Vec<u8>,
}

impl Signature {
    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }
}

pub(crate) mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        hex::decode(s).map_err(serde::de::Error::custom)
    }
}

/// Generates a key pair. PQC and ECDSA keys are derived deterministically from `rng_seed`.
pub fn keygen(scheme: SchemeId, rng_seed: u64) -> Result<KeyPair, SigError> {
    let mut rng = ChaCha20Rng::seed_from_u64(rng_seed);
    match scheme {
        SchemeId::Pqc => {
            let mut xi = [0u8; 32];
            rng.fill_bytes(&mut xi);
            let (pk, sk) = ml_dsa_65::KG::keygen_from_seed(&xi);
            Ok(KeyPair {
                scheme,
                public_key: pk.into_bytes().to_vec(),
                private_key: sk.into_bytes().to_vec(),
            })
        }
        SchemeId::Ecdsa => {
            let sk = k256::ecdsa::SigningKey::random(&mut rng);
            let pk = sk.verifying_key().to_encoded_point(false);
            Ok(KeyPair {
                scheme,
                public_key: pk.as_bytes().to_vec(),
                private_key: sk.to_bytes().to_vec(),
            })
        }
        SchemeId::None => Ok(KeyPair {
            scheme,
            public_key: NONE_PUBLIC_TOKEN.to_vec(),
            private_key: NONE_PRIVATE_TOKEN.to_vec(),
        }),
    }
}

fn malformed(scheme: SchemeId, reason: impl Into<String>) -> SigError {
    SigError::MalformedKey { scheme, reason: reason.into() }
}

pub fn sign(key: &KeyPair, message: &[u8]) -> Result<Signature, SigError> {
    let scheme = key.scheme;
    let bytes = match scheme {
        SchemeId::Pqc => {
            let raw: [u8; MLDSA65_PRIVATE_KEY_LEN] = key
                .private_key
                .as_slice()
                .try_into()
                .map_err(|_| malformed(scheme, format!("private key is {} bytes", key.private_key.len())))?;
            let sk = ml_dsa_65::PrivateKey::try_from_bytes(raw).map_err(|e| malformed(scheme, e))?;
            sk.try_sign(message, &[]).map_err(|e| SigError::SigningFailed(e.to_string()))?.to_vec()
        }
        SchemeId::Ecdsa => {
            if key.private_key.len() != ECDSA_SECRET_LEN {
                return Err(malformed(scheme, format!("private key is {} bytes", key.private_key.len())));
            }
            let sk = k256::ecdsa::SigningKey::from_slice(&key.private_key)
                .map_err(|e| malformed(scheme, e.to_string()))?;
            let sig: k256::ecdsa::Signature = sk.sign(message);
            sig.to_der().as_bytes().to_vec()
        }
        SchemeId::None => {
            if key.private_key != NONE_PRIVATE_TOKEN {
                return Err(malformed(scheme, "unexpected baseline token"));
            }
            sha256(message).to_vec()
        }
    };
    Ok(Signature { scheme, bytes })
}

/// Checks `sig` over `message` under `public_key`.
///
/// Malformed keys or signature encodings verify as `false`; only a scheme mismatch is an error.
pub fn verify(public_key: &[u8], scheme: SchemeId, message: &[u8], sig: &Signature) -> Result<bool, SigError> {
    if sig.scheme != scheme {
        return Err(SigError::SchemeMismatch { expected: scheme, signature: sig.scheme });
    }
    let valid = match scheme {
        SchemeId::Pqc => verify_mldsa(public_key, message, &sig.bytes),
        SchemeId::Ecdsa => verify_ecdsa(public_key, message, &sig.bytes),
        SchemeId::None => sig.bytes.as_slice() == sha256(message).as_slice(),
    };
    Ok(valid)
}

fn verify_mldsa(public_key: &[u8], message: &[u8], sig: &[u8]) -> bool {
    let (Ok(pk_raw), Ok(sig_raw)) = (
        <[u8; MLDSA65_PUBLIC_KEY_LEN]>::try_from(public_key),
        <[u8; MLDSA65_SIGNATURE_LEN]>::try_from(sig),
    ) else {
        return false;
    };
    match ml_dsa_65::PublicKey::try_from_bytes(pk_raw) {
        Ok(pk) => pk.verify(message, &sig_raw, &[]),
        Err(_) => false,
    }
}

fn verify_ecdsa(public_key: &[u8], message: &[u8], sig: &[u8]) -> bool {
    if !(ECDSA_DER_MIN..=ECDSA_DER_MAX).contains(&sig.len()) {
        return false;
    }
    let Ok(vk) = k256::ecdsa::VerifyingKey::from_sec1_bytes(public_key) else {
        return false;
    };
    let Ok(sig) = k256::ecdsa::Signature::from_der(sig) else {
        return false;
    };
    vk.verify(message, &sig).is_ok()
}

/// Mean primitive timings in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CryptoTimings {
    pub scheme: SchemeId,
    pub keygen_ms: f64,
    pub sign_ms: f64,
    pub verify_ms: f64,
    pub trials: usize,
}

fn elapsed_ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

/// Times keygen, sign and verify over `trials` fresh operations after one untimed warm-up.
pub fn measure_primitives(scheme: SchemeId, trials: usize, message_len: usize) -> Result<CryptoTimings, SigError> {
    if trials == 0 {
        return Err(SigError::NoTrials);
    }
    let mut rng = ChaCha20Rng::seed_from_u64(0x7123_0000 ^ message_len as u64);
    let mut message = vec![0u8; message_len];

    rng.fill_bytes(&mut message);
    let warm = keygen(scheme, rng.next_u64())?;
    let warm_sig = sign(&warm, &message)?;
    verify(&warm.public_key, scheme, &message, &warm_sig)?;

    let (mut keygen_ms, mut sign_ms, mut verify_ms) = (0.0, 0.0, 0.0);
    for _ in 0..trials {
        rng.fill_bytes(&mut message);
        let seed = rng.next_u64();

        let t = Instant::now();
        let key = keygen(scheme, seed)?;
        keygen_ms += elapsed_ms(t);

        let t = Instant::now();
        let sig = sign(&key, &message)?;
        sign_ms += elapsed_ms(t);

        let t = Instant::now();
        let ok = verify(&key.public_key, scheme, &message, &sig)?;
        verify_ms += elapsed_ms(t);
        debug_assert!(ok);
    }
    let n = trials as f64;
    Ok(CryptoTimings { scheme, keygen_ms: keygen_ms / n, sign_ms: sign_ms / n, verify_ms: verify_ms / n, trials })
}
