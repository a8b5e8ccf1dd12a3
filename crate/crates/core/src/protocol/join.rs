//! Join with tenant-wide conflict detection.
//!
//! A candidate seals a request to a manager, the manager sends the key
//! digest up to the root, the root broadcasts it down to manager children,
//! answers are OR-aggregated bottom-up, and the root's signed decision is
//! re-signed hop by hop on its way back down. The initiating manager then
//! issues the certificate.

use rand::RngCore;

use crate::canonical_struct;
use crate::codec::{Bytes, Canonical, CodecError, Decoder, Encoder};
use crate::crypto::{CryptoProvider, Digest, Nonce, PublicKey, Signature};
use crate::error::{Error, Result};
use crate::messages::{Body, Reason};
use crate::messaging::{seal, ControlPayload, Envelope, TraceId};
use crate::tree::{issue_delegation, DelegationCertificate, NodeRecord, Role, TenantId, Validity};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct JoinRequest {
    pub join_info: Bytes,
    pub candidate_pk: PublicKey,
    pub nonce: Nonce,
}
canonical_struct!(JoinRequest { join_info, candidate_pk, nonce });

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ProbeDirection {
    /// Relay from the initiating manager toward the root.
    Up,
    /// Conflict-check request from a parent.
    Down,
}

impl Canonical for ProbeDirection {
    fn encode(&self, e: &mut Encoder) {
        e.raw(&[*self as u8]);
    }
    fn decode(d: &mut Decoder<'_>) -> std::result::Result<Self, CodecError> {
        match d.take(1)?[0] {
            0 => Ok(Self::Up),
            1 => Ok(Self::Down),
            _ => Err(CodecError::Invalid("probe direction")),
        }
    }
}

/// Carries only the key digest, never key or identity bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HashProbe {
    pub h: Digest,
    pub direction: ProbeDirection,
}
canonical_struct!(HashProbe { h, direction });

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConflictResponse {
    pub h: Digest,
    pub conflict: bool,
}
canonical_struct!(ConflictResponse { h, conflict });

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Approve,
    Reject,
}

impl Canonical for Verdict {
    fn encode(&self, e: &mut Encoder) {
        e.raw(&[*self as u8]);
    }
    fn decode(d: &mut Decoder<'_>) -> std::result::Result<Self, CodecError> {
        match d.take(1)?[0] {
            0 => Ok(Self::Approve),
            1 => Ok(Self::Reject),
            _ => Err(CodecError::Invalid("verdict")),
        }
    }
}

/// Root decision, re-signed by every forwarding node over
/// `h ‖ decision ‖ t ‖ reason`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecisionRecord {
    pub h: Digest,
    pub decision: Verdict,
    pub t: u64,
    pub reason: Option<Reason>,
    pub signer_digest: Digest,
    pub signature: Signature,
}
canonical_struct!(DecisionRecord { h, decision, t, reason, signer_digest, signature });

impl DecisionRecord {
    pub fn signed_bytes(h: &Digest, decision: Verdict, t: u64, reason: Option<Reason>) -> Vec<u8> {
        let mut e = Encoder::new();
        e.field(h);
        e.field(&decision);
        e.field(&t);
        e.field(&reason);
        e.finish()
    }

    pub(crate) fn sign(provider: &dyn CryptoProvider, signer: &NodeRecord, h: Digest, decision: Verdict, t: u64, reason: Option<Reason>) -> Result<Self> {
        let signature = provider.sign(&signer.keys.private, &Self::signed_bytes(&h, decision, t, reason))?;
        Ok(DecisionRecord { h, decision, t, reason, signer_digest: signer.node_id, signature })
    }

    pub fn verify(&self, provider: &dyn CryptoProvider, signer: &PublicKey) -> bool {
        signer.digest() == self.signer_digest
            && provider.verify(signer, &Self::signed_bytes(&self.h, self.decision, self.t, self.reason), &self.signature)
    }
}

/// Final answer from the initiating manager to the candidate.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct JoinResult {
    pub nonce: Nonce,
    pub decision: Verdict,
    pub reason: Option<Reason>,
    pub cert: Option<DelegationCertificate>,
    pub tenant: TenantId,
    pub depth: u32,
    pub salt: Option<[u8; 32]>,
    /// Issuer's own chain in the full-path model.
    pub chain: Option<Vec<DelegationCertificate>>,
}
canonical_struct!(JoinResult { nonce, decision, reason, cert, tenant, depth, salt, chain });

/// Pending-join entry at the initiating manager, keyed by `(h, nonce)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PendingJoin {
    pub request: JoinRequest,
    pub h: Digest,
    pub trace_id: TraceId,
    pub expires_at: u64,
}

/// Candidate side: seals a fresh request to a manager whose key was
/// disclosed out of band.
pub fn initiate_join(
    provider: &dyn CryptoProvider,
    rng: &mut dyn RngCore,
    candidate: &NodeRecord,
    manager_pk: &PublicKey,
    join_info: &[u8],
    now: u64,
) -> Result<(JoinRequest, TraceId, Envelope)> {
    if !candidate.known_keys.contains(manager_pk) {
        return Err(Error::KeyNotVisible);
    }
    let request = JoinRequest {
        join_info: Bytes(join_info.to_vec()),
        candidate_pk: candidate.public().clone(),
        nonce: Nonce::random(rng),
    };
    let trace_id = TraceId::random(rng);
    let payload = ControlPayload::new(candidate.public(), &Body::JoinRequest(request.clone()), now, rng);
    let env = seal(provider, rng, candidate, manager_pk, &payload, true, trace_id)?;
    Ok((request, trace_id, env))
}

/// Manager side of phase I: role and replay checks, then the digest that
/// goes upward.
pub fn handle_join_request(provider: &dyn CryptoProvider, manager: &mut NodeRecord, req: &JoinRequest) -> Result<Digest> {
    if !manager.role.can_issue() {
        return Err(Error::NotAManager);
    }
    if manager.revoked {
        return Err(Error::IssuerRevoked);
    }
    if !manager.nonce_cache.insert(req.nonce) {
        return Err(Error::ReplayRejected);
    }
    Ok(provider.hash(req.candidate_pk.as_bytes()))
}

/// True iff the manager's own key or a direct member's key digests to `h`.
pub fn conflict_check_local(manager: &NodeRecord, h: &Digest) -> bool {
    &manager.public().digest() == h || manager.children.keys().any(|k| &k.digest() == h)
}

/// OR of the local answer and every child answer; a missing answer counts
/// as a conflict.
pub fn aggregate_responses(own: bool, responses: &[ConflictResponse], expected: usize) -> bool {
    own || responses.len() < expected || responses.iter().any(|r| r.conflict)
}

pub fn root_decide(
    provider: &dyn CryptoProvider,
    root: &NodeRecord,
    conflict: bool,
    in_flight: bool,
    h: Digest,
    t: u64,
) -> Result<DecisionRecord> {
    let (decision, reason) = match (conflict, in_flight) {
        (true, _) => (Verdict::Reject, Some(Reason::Conflict)),
        (false, true) => (Verdict::Reject, Some(Reason::InFlight)),
        (false, false) => (Verdict::Approve, None),
    };
    DecisionRecord::sign(provider, root, h, decision, t, reason)
}

/// Verifies a decision received from the parent and re-signs it for the
/// children. A root passes its own record through.
pub fn disseminate_decision(provider: &dyn CryptoProvider, node: &NodeRecord, rec: &DecisionRecord) -> Result<DecisionRecord> {
    let expected = match node.parent.as_ref() {
        Some(p) => p,
        None => node.public(),
    };
    if !rec.verify(provider, expected) {
        return Err(Error::SignatureInvalid);
    }
    DecisionRecord::sign(provider, node, rec.h, rec.decision, rec.t, rec.reason)
}

/// Phase IV at the initiating manager.
#[allow(clippy::too_many_arguments)]
pub fn finalize_join(
    provider: &dyn CryptoProvider,
    manager: &mut NodeRecord,
    rec: &DecisionRecord,
    pending: &PendingJoin,
    now: u64,
    skew: u64,
    lifetime: u64,
    full_path: bool,
) -> Result<JoinResult> {
    if rec.h != provider.hash(pending.request.candidate_pk.as_bytes()) {
        return Err(Error::DecisionMismatch);
    }
    // the record was stamped at the root and travelled one tick per level
    let expected = rec.t + manager.depth as u64;
    if now.abs_diff(expected) > skew {
        return Err(Error::StaleDecision);
    }
    let tenant = manager.tenant.ok_or(Error::NotAManager)?;
    let mut result = JoinResult {
        nonce: pending.request.nonce,
        decision: rec.decision,
        reason: rec.reason,
        cert: None,
        tenant,
        depth: manager.depth + 1,
        salt: None,
        chain: None,
    };
    if rec.decision == Verdict::Approve {
        let scope = manager
            .cert
            .as_ref()
            .map(|c| c.scope.clone())
            .unwrap_or_else(|| crate::tree::ScopeLabel::tenant_root(&tenant));
        let cert = issue_delegation(
            provider,
            manager,
            &pending.request.candidate_pk,
            Role::Leaf,
            scope,
            Validity::starting(now, lifetime),
            pending.request.nonce,
        )?;
        result.cert = Some(cert);
        result.salt = manager.salt;
        if full_path {
            result.chain = Some(manager.cert_chain.clone().unwrap_or_default());
        }
    }
    Ok(result)
}
