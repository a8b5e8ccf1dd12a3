use hmac::{Hmac, Mac};
use rand::RngCore;
use sha2::{Digest as _, Sha256};

use super::{Ciphertext, CryptoProvider, KeyPair, PrivateKey, PublicKey, Signature};
use crate::error::{Error, Result};

type HmacSha256 = Hmac<Sha256>;

/// Deterministic keyed stand-in for ideal primitives.
///
/// The public key is the secret masked with a provider-internal constant, so
/// the provider (and only the provider) can map a public key back to its
/// secret to check MACs. This models an ideal signature/encryption oracle; it
/// offers no real security and exists for fast reproducible simulation.
#[derive(Debug, Clone, Copy, Default)]
pub struct MockProvider;

const KEY_LEN: usize = 32;
const NONCE_LEN: usize = 16;
const TAG_LEN: usize = 32;

fn mask() -> [u8; KEY_LEN] {
    Sha256::digest(b"pvtn-mock-provider-oracle-mask-v1").into()
}

fn unmask(pk: &PublicKey) -> Option<[u8; KEY_LEN]> {
    let bytes: [u8; KEY_LEN] = pk.0.as_slice().try_into().ok()?;
    let m = mask();
    Some(std::array::from_fn(|i| bytes[i] ^ m[i]))
}

fn mac(key: &[u8], parts: &[&[u8]]) -> [u8; 32] {
    let mut m = HmacSha256::new_from_slice(key).expect("hmac accepts any key length");
    for p in parts {
        m.update(p);
    }
    m.finalize().into_bytes().into()
}

fn keystream_xor(key: &[u8; 32], data: &mut [u8]) {
    for (block, chunk) in data.chunks_mut(32).enumerate() {
        let pad: [u8; 32] = Sha256::new()
            .chain_update(key)
            .chain_update((block as u64).to_be_bytes())
            .finalize()
            .into();
        for (b, p) in chunk.iter_mut().zip(pad.iter()) {
            *b ^= p;
        }
    }
}

fn secret(sk: &PrivateKey) -> Result<[u8; KEY_LEN]> {
    sk.expose()
        .try_into()
        .map_err(|_| Error::ProviderError("private key must be 32 bytes".into()))
}

impl CryptoProvider for MockProvider {
    fn name(&self) -> &'static str {
        "mock"
    }

    fn keypair_from_seed(&self, seed: [u8; 32]) -> KeyPair {
        let m = mask();
        let public: Vec<u8> = seed.iter().zip(m.iter()).map(|(a, b)| a ^ b).collect();
        KeyPair { public: PublicKey(public), private: PrivateKey::new(seed.to_vec()) }
    }

    fn sign(&self, sk: &PrivateKey, msg: &[u8]) -> Result<Signature> {
        let s = secret(sk)?;
        let m = mask();
        let pk: Vec<u8> = s.iter().zip(m.iter()).map(|(a, b)| a ^ b).collect();
        Ok(Signature { signer_hint: super::hash(&pk), bytes: mac(&s, &[b"sig", msg]).to_vec() })
    }

    fn verify(&self, pk: &PublicKey, msg: &[u8], sig: &Signature) -> bool {
        let Some(s) = unmask(pk) else { return false };
        let Ok(tag) = <[u8; 32]>::try_from(sig.bytes.as_slice()) else {
            return false;
        };
        let mut m = HmacSha256::new_from_slice(&s).expect("hmac key");
        m.update(b"sig");
        m.update(msg);
        m.verify_slice(&tag).is_ok()
    }

    fn encrypt(&self, pk: &PublicKey, plaintext: &[u8], rng: &mut dyn RngCore) -> Result<Ciphertext> {
        let s = unmask(pk).ok_or_else(|| Error::ProviderError("public key must be 32 bytes".into()))?;
        let mut nonce = [0u8; NONCE_LEN];
        rng.fill_bytes(&mut nonce);
        let k = mac(&s, &[b"enc", &nonce]);
        let mut body = plaintext.to_vec();
        keystream_xor(&k, &mut body);
        let tag = mac(&k, &[b"tag", &nonce, &body]);
        let mut out = Vec::with_capacity(NONCE_LEN + body.len() + TAG_LEN);
        out.extend_from_slice(&nonce);
        out.extend_from_slice(&body);
        out.extend_from_slice(&tag);
        Ok(Ciphertext(out))
    }

    fn decrypt(&self, sk: &PrivateKey, ct: &Ciphertext) -> Result<Vec<u8>> {
        let s = secret(sk)?;
        if ct.0.len() < NONCE_LEN + TAG_LEN {
            return Err(Error::DecryptionFailure);
        }
        let (nonce, rest) = ct.0.split_at(NONCE_LEN);
        let (body, tag) = rest.split_at(rest.len() - TAG_LEN);
        let k = mac(&s, &[b"enc", nonce]);
        let mut m = HmacSha256::new_from_slice(&k).expect("hmac key");
        m.update(b"tag");
        m.update(nonce);
        m.update(body);
        m.verify_slice(tag).map_err(|_| Error::DecryptionFailure)?;
        let mut out = body.to_vec();
        keystream_xor(&k, &mut out);
        Ok(out)
    }
}
