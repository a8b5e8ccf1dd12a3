//! Signatures, public-key encryption, hashing and nonces behind one provider
//! contract.
//!
//! Two providers ship: [`RealProvider`] (Ed25519 signatures, X25519 +
//! ChaCha20-Poly1305 hybrid encryption) and [`MockProvider`], a fast keyed
//! ideal functionality used for reproducible traces. Both are deterministic
//! given the caller's RNG.

mod mock;
mod real;

use std::fmt;

use rand::RngCore;
use sha2::{Digest as _, Sha256};

use crate::codec::{Canonical, CodecError, Decoder, Encoder};
use crate::error::Result;

pub use mock::MockProvider;
pub use real::RealProvider;

pub const DIGEST_LEN: usize = 32;
pub const NONCE_LEN: usize = 16;

/// Fixed-width SHA-256 output.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Digest(pub [u8; DIGEST_LEN]);

impl Digest {
    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    /// First eight hex characters, used in human-facing output.
    pub fn short(&self) -> String {
        hex::encode(&self.0[..4])
    }

    pub fn from_hex(s: &str) -> Option<Digest> {
        let v = hex::decode(s).ok()?;
        Some(Digest(v.try_into().ok()?))
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", self.short())
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Canonical for Digest {
    fn encode(&self, e: &mut Encoder) {
        e.raw(&self.0);
    }
    fn decode(d: &mut Decoder<'_>) -> std::result::Result<Self, CodecError> {
        Ok(Digest(<[u8; DIGEST_LEN]>::decode(d)?))
    }
}

/// Digest of a public key; the only identity form that travels in clear.
pub type PublicKeyDigest = Digest;

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Nonce(pub [u8; NONCE_LEN]);

impl Nonce {
    pub fn random(rng: &mut dyn RngCore) -> Nonce {
        let mut b = [0u8; NONCE_LEN];
        rng.fill_bytes(&mut b);
        Nonce(b)
    }
}

impl fmt::Debug for Nonce {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Nonce({})", hex::encode(&self.0[..4]))
    }
}

impl Canonical for Nonce {
    fn encode(&self, e: &mut Encoder) {
        e.raw(&self.0);
    }
    fn decode(d: &mut Decoder<'_>) -> std::result::Result<Self, CodecError> {
        Ok(Nonce(<[u8; NONCE_LEN]>::decode(d)?))
    }
}

#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PublicKey(pub Vec<u8>);

impl PublicKey {
    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn digest(&self) -> Digest {
        hash(&self.0)
    }
}

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PublicKey({})", self.digest().short())
    }
}

impl Canonical for PublicKey {
    fn encode(&self, e: &mut Encoder) {
        e.raw(&self.0);
    }
    fn decode(d: &mut Decoder<'_>) -> std::result::Result<Self, CodecError> {
        Ok(PublicKey(d.rest().to_vec()))
    }
}

/// Secret key material. Deliberately has no [`Canonical`] impl and a
/// redacting `Debug`, so it cannot end up in an envelope or trace.
#[derive(Clone, PartialEq, Eq)]
pub struct PrivateKey(Vec<u8>);

impl PrivateKey {
    pub(crate) fn new(bytes: Vec<u8>) -> Self {
        PrivateKey(bytes)
    }

    /// Raw bytes, exposed for leak scanning in tests and for compromise
    /// simulation. Never serialize these.
    pub fn expose(&self) -> &[u8] {
        &self.0
    }
}

impl fmt::Debug for PrivateKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("PrivateKey(<redacted>)")
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeyPair {
    pub public: PublicKey,
    pub private: PrivateKey,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Signature {
    pub signer_hint: PublicKeyDigest,
    pub bytes: Vec<u8>,
}

impl Canonical for Signature {
    fn encode(&self, e: &mut Encoder) {
        e.field(&self.signer_hint);
        e.field(&crate::codec::Bytes(self.bytes.clone()));
    }
    fn decode(d: &mut Decoder<'_>) -> std::result::Result<Self, CodecError> {
        let signer_hint = d.field()?;
        let bytes: crate::codec::Bytes = d.field()?;
        Ok(Signature { signer_hint, bytes: bytes.0 })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Ciphertext(pub Vec<u8>);

impl Canonical for Ciphertext {
    fn encode(&self, e: &mut Encoder) {
        e.raw(&self.0);
    }
    fn decode(d: &mut Decoder<'_>) -> std::result::Result<Self, CodecError> {
        Ok(Ciphertext(d.rest().to_vec()))
    }
}

pub fn hash(data: &[u8]) -> Digest {
    Digest(Sha256::digest(data).into())
}

/// Hash of the concatenation of several byte strings, each length-prefixed.
pub fn hash_parts(parts: &[&[u8]]) -> Digest {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u32).to_be_bytes());
        h.update(p);
    }
    Digest(h.finalize().into())
}

/// The provider contract. Implementations hold no mutable state; all
/// randomness comes from the caller's RNG.
pub trait CryptoProvider: Send + Sync {
    fn name(&self) -> &'static str;

    /// Derives a key pair from 32 bytes of seed material.
    fn keypair_from_seed(&self, seed: [u8; 32]) -> KeyPair;

    fn sign(&self, sk: &PrivateKey, msg: &[u8]) -> Result<Signature>;

    fn verify(&self, pk: &PublicKey, msg: &[u8], sig: &Signature) -> bool;

    fn encrypt(&self, pk: &PublicKey, plaintext: &[u8], rng: &mut dyn RngCore)
        -> Result<Ciphertext>;

    fn decrypt(&self, sk: &PrivateKey, ct: &Ciphertext) -> Result<Vec<u8>>;

    fn hash(&self, data: &[u8]) -> Digest {
        hash(data)
    }

    fn generate(&self, rng: &mut dyn RngCore) -> KeyPair {
        let mut seed = [0u8; 32];
        rng.fill_bytes(&mut seed);
        self.keypair_from_seed(seed)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Deserialize, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    Real,
    Mock,
}

impl ProviderKind {
    pub fn build(self) -> std::sync::Arc<dyn CryptoProvider> {
        match self {
            ProviderKind::Real => std::sync::Arc::new(RealProvider),
            ProviderKind::Mock => std::sync::Arc::new(MockProvider),
        }
    }
}

impl std::str::FromStr for ProviderKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "real" => Ok(ProviderKind::Real),
            "mock" => Ok(ProviderKind::Mock),
            other => Err(format!("unknown provider '{other}' (expected real or mock)")),
        }
    }
}
