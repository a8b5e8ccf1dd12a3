//! Sealed envelopes: every message is encrypted to its recipient, and
//! control messages are signed over their canonical bytes before encryption.

use std::fmt;

use rand::RngCore;

use crate::canonical_struct;
use crate::codec::{Bytes, Canonical, CodecError, Decoder, Encoder};
use crate::crypto::{Ciphertext, CryptoProvider, Digest, KeyPair, Nonce, PublicKey, Signature};
use crate::error::{Error, Result};
use crate::messages::Body;
use crate::tree::NodeRecord;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MsgType {
    JoinReq,
    HashProbe,
    ConflictResp,
    Decision,
    UpgradeReq,
    Endorsement,
    ActionCertReq,
    ValidationReq,
    Approval,
    RevocationNotice,
    GatewayProof,
    StorageChallenge,
    KeyRotation,
}

impl MsgType {
    pub const ALL: [MsgType; 13] = [
        MsgType::JoinReq,
        MsgType::HashProbe,
        MsgType::ConflictResp,
        MsgType::Decision,
        MsgType::UpgradeReq,
        MsgType::Endorsement,
        MsgType::ActionCertReq,
        MsgType::ValidationReq,
        MsgType::Approval,
        MsgType::RevocationNotice,
        MsgType::GatewayProof,
        MsgType::StorageChallenge,
        MsgType::KeyRotation,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MsgType::JoinReq => "JoinReq",
            MsgType::HashProbe => "HashProbe",
            MsgType::ConflictResp => "ConflictResp",
            MsgType::Decision => "Decision",
            MsgType::UpgradeReq => "UpgradeReq",
            MsgType::Endorsement => "Endorsement",
            MsgType::ActionCertReq => "ActionCertReq",
            MsgType::ValidationReq => "ValidationReq",
            MsgType::Approval => "Approval",
            MsgType::RevocationNotice => "RevocationNotice",
            MsgType::GatewayProof => "GatewayProof",
            MsgType::StorageChallenge => "StorageChallenge",
            MsgType::KeyRotation => "KeyRotation",
        }
    }

    pub fn parse(s: &str) -> Option<MsgType> {
        Self::ALL.into_iter().find(|m| m.as_str() == s)
    }
}

impl fmt::Display for MsgType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Canonical for MsgType {
    fn encode(&self, e: &mut Encoder) {
        e.raw(&[*self as u8]);
    }
    fn decode(d: &mut Decoder<'_>) -> std::result::Result<Self, CodecError> {
        let b = d.take(1)?[0] as usize;
        Self::ALL.get(b).copied().ok_or(CodecError::Invalid("msg type"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EnvelopeKind {
    Plain,
    SignedControl,
}

/// Correlates all hops of one protocol run. Routing metadata only.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct TraceId(pub u64);

impl TraceId {
    pub fn random(rng: &mut dyn RngCore) -> TraceId {
        TraceId(rng.next_u64())
    }
}

impl fmt::Display for TraceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

impl Canonical for TraceId {
    fn encode(&self, e: &mut Encoder) {
        self.0.encode(e);
    }
    fn decode(d: &mut Decoder<'_>) -> std::result::Result<Self, CodecError> {
        Ok(TraceId(u64::decode(d)?))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ControlPayload {
    pub msg_type: MsgType,
    pub body: Bytes,
    pub sender_digest: Digest,
    pub nonce: Nonce,
    pub timestamp: u64,
}
canonical_struct!(ControlPayload { msg_type, body, sender_digest, nonce, timestamp });

impl ControlPayload {
    pub fn new(sender: &PublicKey, body: &Body, now: u64, rng: &mut dyn RngCore) -> Self {
        ControlPayload {
            msg_type: body.msg_type(),
            body: Bytes(body.to_canonical()),
            sender_digest: sender.digest(),
            nonce: Nonce::random(rng),
            timestamp: now,
        }
    }

    pub fn decode_body(&self) -> Result<Body> {
        let body = Body::from_canonical(&self.body.0)?;
        if body.msg_type() != self.msg_type {
            return Err(CodecError::Invalid("body does not match msg type").into());
        }
        Ok(body)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct SignedPayload {
    payload: Bytes,
    signature: Signature,
}
canonical_struct!(SignedPayload { payload, signature });

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Envelope {
    pub recipient_digest: Digest,
    pub kind: EnvelopeKind,
    pub trace_id: TraceId,
    pub ciphertext: Ciphertext,
}

impl Envelope {
    /// `recipient_digest ‖ kind ‖ trace_id ‖ len ‖ ciphertext`.
    pub fn to_wire(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(45 + self.ciphertext.0.len());
        out.extend_from_slice(self.recipient_digest.as_bytes());
        out.push(match self.kind {
            EnvelopeKind::Plain => 0,
            EnvelopeKind::SignedControl => 1,
        });
        out.extend_from_slice(&self.trace_id.0.to_be_bytes());
        out.extend_from_slice(&(self.ciphertext.0.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.ciphertext.0);
        out
    }

    pub fn from_wire(bytes: &[u8]) -> Result<Envelope> {
        let mut d = Decoder::new(bytes);
        let recipient_digest = Digest(d.take(32)?.try_into().unwrap());
        let kind = match d.take(1)?[0] {
            0 => EnvelopeKind::Plain,
            1 => EnvelopeKind::SignedControl,
            _ => return Err(CodecError::Invalid("envelope kind").into()),
        };
        let trace_id = TraceId(u64::from_be_bytes(d.take(8)?.try_into().unwrap()));
        let len = u32::from_be_bytes(d.take(4)?.try_into().unwrap()) as usize;
        let ct = d.take(len)?.to_vec();
        if !d.is_empty() {
            return Err(CodecError::Trailing.into());
        }
        Ok(Envelope { recipient_digest, kind, trace_id, ciphertext: Ciphertext(ct) })
    }
}

/// An unsealed message and the key that signed it, if any.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Opened {
    pub payload: ControlPayload,
    pub signer: Option<PublicKey>,
}

/// Seals `payload` for `recipient_pk`, enforcing the key-visibility rule.
pub fn seal(
    provider: &dyn CryptoProvider,
    rng: &mut dyn RngCore,
    sender: &NodeRecord,
    recipient_pk: &PublicKey,
    payload: &ControlPayload,
    signed: bool,
    trace_id: TraceId,
) -> Result<Envelope> {
    if !sender.known_keys.contains(recipient_pk) {
        return Err(Error::KeyNotVisible);
    }
    seal_with_keys(provider, rng, &sender.keys, recipient_pk, payload, signed, trace_id)
}

/// Seals with explicit key material and no visibility check. Used for
/// session reply keys and by the adversary, which can only use keys it holds.
pub fn seal_with_keys(
    provider: &dyn CryptoProvider,
    rng: &mut dyn RngCore,
    keys: &KeyPair,
    recipient_pk: &PublicKey,
    payload: &ControlPayload,
    signed: bool,
    trace_id: TraceId,
) -> Result<Envelope> {
    let bytes = payload.to_canonical();
    let (kind, plaintext) = if signed {
        let signature = provider.sign(&keys.private, &bytes)?;
        (EnvelopeKind::SignedControl, SignedPayload { payload: Bytes(bytes), signature }.to_canonical())
    } else {
        (EnvelopeKind::Plain, bytes)
    };
    Ok(Envelope {
        recipient_digest: recipient_pk.digest(),
        kind,
        trace_id,
        ciphertext: provider.encrypt(recipient_pk, &plaintext, rng)?,
    })
}

/// Decrypts and, for signed envelopes, verifies the sender against the
/// recipient's known keys. A join request may instead be signed by the
/// candidate key it carries.
pub fn unseal(provider: &dyn CryptoProvider, recipient: &NodeRecord, env: &Envelope) -> Result<Opened> {
    unseal_with_keys(provider, &recipient.keys, env, |d| recipient.known_by_digest(d).cloned())
}

pub fn unseal_with_keys(
    provider: &dyn CryptoProvider,
    keys: &KeyPair,
    env: &Envelope,
    resolve: impl Fn(&Digest) -> Option<PublicKey>,
) -> Result<Opened> {
    if env.recipient_digest != keys.public.digest() {
        return Err(Error::DecryptionFailure);
    }
    let plaintext = provider.decrypt(&keys.private, &env.ciphertext)?;
    match env.kind {
        EnvelopeKind::Plain => {
            let payload = ControlPayload::from_canonical(&plaintext).map_err(|_| Error::DecryptionFailure)?;
            Ok(Opened { payload, signer: None })
        }
        EnvelopeKind::SignedControl => {
            let sp = SignedPayload::from_canonical(&plaintext).map_err(|_| Error::SignatureInvalid)?;
            let payload = ControlPayload::from_canonical(&sp.payload.0).map_err(|_| Error::SignatureInvalid)?;
            if payload.sender_digest != sp.signature.signer_hint {
                return Err(Error::SignatureInvalid);
            }
            let signer = resolve(&sp.signature.signer_hint)
                .or_else(|| embedded_candidate(&payload, &sp.signature.signer_hint))
                .ok_or(Error::SignatureInvalid)?;
            if !provider.verify(&signer, &sp.payload.0, &sp.signature) {
                return Err(Error::SignatureInvalid);
            }
            Ok(Opened { payload, signer: Some(signer) })
        }
    }
}

/// Signer hint of a signed envelope addressed to `keys`, without verifying
/// it. Lets a recipient attribute a message it rejects.
pub fn claimed_signer(provider: &dyn CryptoProvider, keys: &KeyPair, env: &Envelope) -> Option<Digest> {
    if env.kind != EnvelopeKind::SignedControl || env.recipient_digest != keys.public.digest() {
        return None;
    }
    let plaintext = provider.decrypt(&keys.private, &env.ciphertext).ok()?;
    SignedPayload::from_canonical(&plaintext).ok().map(|sp| sp.signature.signer_hint)
}

fn embedded_candidate(payload: &ControlPayload, hint: &Digest) -> Option<PublicKey> {
    if payload.msg_type != MsgType::JoinReq {
        return None;
    }
    match payload.decode_body().ok()? {
        Body::JoinRequest(req) if &req.candidate_pk.digest() == hint => Some(req.candidate_pk),
        _ => None,
    }
}

/// Seals a signed control message to the node's parent.
pub fn send_up(
    provider: &dyn CryptoProvider,
    rng: &mut dyn RngCore,
    node: &NodeRecord,
    payload: &ControlPayload,
    trace_id: TraceId,
) -> Result<Envelope> {
    let parent = node.parent.as_ref().ok_or(Error::NoParent)?;
    seal(provider, rng, node, parent, payload, true, trace_id)
}

/// Seals one signed copy per direct child; no group encryption.
pub fn send_down(
    provider: &dyn CryptoProvider,
    rng: &mut dyn RngCore,
    node: &NodeRecord,
    payload: &ControlPayload,
    trace_id: TraceId,
) -> Result<Vec<(PublicKey, Envelope)>> {
    node.children
        .keys()
        .map(|child| Ok((child.clone(), seal(provider, rng, node, child, payload, true, trace_id)?)))
        .collect()
}
