use chacha20poly1305::aead::{Aead, KeyInit};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce as AeadNonce};
use ed25519_dalek::{Signer, SigningKey, VerifyingKey};
use rand::RngCore;
use sha2::{Digest as _, Sha256};
use x25519_dalek::{PublicKey as XPublic, StaticSecret};

use super::{Ciphertext, CryptoProvider, KeyPair, PrivateKey, PublicKey, Signature};
use crate::error::{Error, Result};

/// Ed25519 signatures and X25519/ChaCha20-Poly1305 hybrid encryption.
///
/// A public key is the 32-byte Ed25519 verifying key followed by the 32-byte
/// X25519 key; the private key is the 32-byte seed both halves derive from.
#[derive(Debug, Clone, Copy, Default)]
pub struct RealProvider;

const PK_LEN: usize = 64;
const EPH_LEN: usize = 32;
const AEAD_NONCE_LEN: usize = 12;

fn split_secret(sk: &PrivateKey) -> Result<(SigningKey, StaticSecret)> {
    let seed: [u8; 32] = sk
        .expose()
        .try_into()
        .map_err(|_| Error::ProviderError("private key must be 32 bytes".into()))?;
    let signing = SigningKey::from_bytes(&seed);
    let x: [u8; 32] = Sha256::new()
        .chain_update(b"pvtn-x25519")
        .chain_update(seed)
        .finalize()
        .into();
    Ok((signing, StaticSecret::from(x)))
}

fn wrap_key(shared: &[u8; 32], eph: &[u8], recipient: &[u8]) -> Key {
    let k: [u8; 32] = Sha256::new()
        .chain_update(b"pvtn-hybrid")
        .chain_update(shared)
        .chain_update(eph)
        .chain_update(recipient)
        .finalize()
        .into();
    Key::from(k)
}

impl CryptoProvider for RealProvider {
    fn name(&self) -> &'static str {
        "real"
    }

    fn keypair_from_seed(&self, seed: [u8; 32]) -> KeyPair {
        let private = PrivateKey::new(seed.to_vec());
        let (signing, x) = split_secret(&private).expect("32-byte seed");
        let mut public = signing.verifying_key().to_bytes().to_vec();
        public.extend_from_slice(XPublic::from(&x).as_bytes());
        KeyPair { public: PublicKey(public), private }
    }

    fn sign(&self, sk: &PrivateKey, msg: &[u8]) -> Result<Signature> {
        let (signing, x) = split_secret(sk)?;
        let mut pk = signing.verifying_key().to_bytes().to_vec();
        pk.extend_from_slice(XPublic::from(&x).as_bytes());
        Ok(Signature {
            signer_hint: super::hash(&pk),
            bytes: signing.sign(msg).to_bytes().to_vec(),
        })
    }

    fn verify(&self, pk: &PublicKey, msg: &[u8], sig: &Signature) -> bool {
        if pk.0.len() != PK_LEN {
            return false;
        }
        let Ok(vk_bytes) = <[u8; 32]>::try_from(&pk.0[..32]) else {
            return false;
        };
        let Ok(vk) = VerifyingKey::from_bytes(&vk_bytes) else {
            return false;
        };
        let Ok(sig_bytes) = <[u8; 64]>::try_from(sig.bytes.as_slice()) else {
            return false;
        };
        let s = ed25519_dalek::Signature::from_bytes(&sig_bytes);
        vk.verify_strict(msg, &s).is_ok()
    }

    fn encrypt(&self, pk: &PublicKey, plaintext: &[u8], rng: &mut dyn RngCore) -> Result<Ciphertext> {
        if pk.0.len() != PK_LEN {
            return Err(Error::ProviderError("public key must be 64 bytes".into()));
        }
        let recipient: [u8; 32] = pk.0[32..].try_into().unwrap();
        let mut eph_seed = [0u8; 32];
        rng.fill_bytes(&mut eph_seed);
        let eph = StaticSecret::from(eph_seed);
        let eph_pub = XPublic::from(&eph);
        let shared = eph.diffie_hellman(&XPublic::from(recipient));
        let key = wrap_key(shared.as_bytes(), eph_pub.as_bytes(), &recipient);
        let mut nonce = [0u8; AEAD_NONCE_LEN];
        rng.fill_bytes(&mut nonce);
        let body = ChaCha20Poly1305::new(&key)
            .encrypt(AeadNonce::from_slice(&nonce), plaintext)
            .map_err(|_| Error::ProviderError("aead encryption failed".into()))?;
        let mut out = Vec::with_capacity(EPH_LEN + AEAD_NONCE_LEN + body.len());
        out.extend_from_slice(eph_pub.as_bytes());
        out.extend_from_slice(&nonce);
        out.extend_from_slice(&body);
        Ok(Ciphertext(out))
    }

    fn decrypt(&self, sk: &PrivateKey, ct: &Ciphertext) -> Result<Vec<u8>> {
        let (_, x) = split_secret(sk)?;
        if ct.0.len() < EPH_LEN + AEAD_NONCE_LEN + 16 {
            return Err(Error::DecryptionFailure);
        }
        let eph: [u8; 32] = ct.0[..EPH_LEN].try_into().unwrap();
        let nonce = &ct.0[EPH_LEN..EPH_LEN + AEAD_NONCE_LEN];
        let shared = x.diffie_hellman(&XPublic::from(eph));
        let own = XPublic::from(&x);
        let key = wrap_key(shared.as_bytes(), &eph, own.as_bytes());
        ChaCha20Poly1305::new(&key)
            .decrypt(AeadNonce::from_slice(nonce), &ct.0[EPH_LEN + AEAD_NONCE_LEN..])
            .map_err(|_| Error::DecryptionFailure)
    }
}
