//! Action certificates: parent proposal, upward endorsements, root
//! decision, parent finalization.

use crate::canonical_struct;
use crate::codec::{Bytes, Canonical, Encoder};
use crate::crypto::{CryptoProvider, Digest, Nonce, PublicKey, Signature};
use crate::error::{Error, Result};
use crate::messages::Reason;
use crate::protocol::upgrade::PolicyHook;
use crate::tree::{leaf_hash, NodeRecord, Role, ScopeLabel};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ActionRequest {
    pub scope: ScopeLabel,
    pub nonce: Nonce,
}
canonical_struct!(ActionRequest { scope, nonce });

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ActionCertProposal {
    pub subject_hash: Digest,
    pub scope: ScopeLabel,
    pub t: u64,
    pub nonce: Nonce,
    pub signature: Signature,
}
canonical_struct!(ActionCertProposal { subject_hash, scope, t, nonce, signature });

impl ActionCertProposal {
    pub fn signed_bytes(subject: &Digest, scope: &ScopeLabel, t: u64, nonce: &Nonce) -> Vec<u8> {
        let mut e = Encoder::new();
        e.raw(b"action-proposal");
        e.field(subject);
        e.field(scope);
        e.field(&t);
        e.field(nonce);
        e.finish()
    }

    pub fn sign(provider: &dyn CryptoProvider, p0: &NodeRecord, subject: Digest, scope: ScopeLabel, t: u64, nonce: Nonce) -> Result<Self> {
        let signature = provider.sign(&p0.keys.private, &Self::signed_bytes(&subject, &scope, t, &nonce))?;
        Ok(ActionCertProposal { subject_hash: subject, scope, t, nonce, signature })
    }

    pub fn verify(&self, provider: &dyn CryptoProvider, signer: &PublicKey) -> bool {
        provider.verify(signer, &Self::signed_bytes(&self.subject_hash, &self.scope, self.t, &self.nonce), &self.signature)
    }
}

/// A higher layer's attestation that the issuer below is a live manager.
/// Binds only role, time and the proposal nonce.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Endorsement {
    pub endorsed_role: Role,
    pub t: u64,
    pub nonce: Nonce,
    pub signature: Signature,
}
canonical_struct!(Endorsement { endorsed_role, t, nonce, signature });

impl Endorsement {
    pub fn signed_bytes(role: Role, t: u64, nonce: &Nonce) -> Vec<u8> {
        let mut e = Encoder::new();
        e.raw(b"endorsement");
        e.field(&role);
        e.field(&t);
        e.field(nonce);
        e.finish()
    }

    pub fn verify(&self, provider: &dyn CryptoProvider, signer: &PublicKey) -> bool {
        provider.verify(signer, &Self::signed_bytes(self.endorsed_role, self.t, &self.nonce), &self.signature)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ActionCertificate {
    pub proposal: ActionCertProposal,
    pub endorsements: Vec<Endorsement>,
    pub signature: Signature,
}
canonical_struct!(ActionCertificate { proposal, endorsements, signature });

impl ActionCertificate {
    pub fn signed_bytes(proposal: &ActionCertProposal, endorsements: &[Endorsement]) -> Vec<u8> {
        let mut e = Encoder::new();
        // signatures are covered by their bytes only, so blanking signer
        // hints for storage presentation keeps the certificate valid
        e.raw(b"action-cert");
        e.raw(&ActionCertProposal::signed_bytes(&proposal.subject_hash, &proposal.scope, proposal.t, &proposal.nonce));
        e.field(&Bytes(proposal.signature.bytes.clone()));
        e.field(&(endorsements.len() as u32));
        for en in endorsements {
            e.raw(&Endorsement::signed_bytes(en.endorsed_role, en.t, &en.nonce));
            e.field(&Bytes(en.signature.bytes.clone()));
        }
        e.finish()
    }

    pub fn verify(&self, provider: &dyn CryptoProvider, p0: &PublicKey) -> bool {
        provider.verify(p0, &Self::signed_bytes(&self.proposal, &self.endorsements), &self.signature)
    }

    pub fn digest(&self) -> Digest {
        crate::crypto::hash(&self.to_canonical())
    }

    /// Re-signs a modified certificate with the given key. Only useful for
    /// building misbehaving-issuer fixtures.
    pub fn resign(&mut self, provider: &dyn CryptoProvider, keys: &crate::crypto::KeyPair) -> Result<()> {
        self.proposal.signature = provider.sign(
            &keys.private,
            &ActionCertProposal::signed_bytes(&self.proposal.subject_hash, &self.proposal.scope, self.proposal.t, &self.proposal.nonce),
        )?;
        self.signature = provider.sign(&keys.private, &Self::signed_bytes(&self.proposal, &self.endorsements))?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ActionDecision {
    pub subject_hash: Digest,
    pub nonce: Nonce,
    pub approved: bool,
    pub reason: Option<Reason>,
    pub signer_digest: Digest,
    pub signature: Signature,
}
canonical_struct!(ActionDecision { subject_hash, nonce, approved, reason, signer_digest, signature });

impl ActionDecision {
    fn bytes(subject: &Digest, nonce: &Nonce, approved: bool, reason: Option<Reason>) -> Vec<u8> {
        let mut e = Encoder::new();
        e.raw(b"action-decision");
        e.field(subject);
        e.field(nonce);
        e.field(&approved);
        e.field(&reason);
        e.finish()
    }

    pub fn sign(provider: &dyn CryptoProvider, signer: &NodeRecord, subject: Digest, nonce: Nonce, approved: bool, reason: Option<Reason>) -> Result<Self> {
        let signature = provider.sign(&signer.keys.private, &Self::bytes(&subject, &nonce, approved, reason))?;
        Ok(ActionDecision { subject_hash: subject, nonce, approved, reason, signer_digest: signer.node_id, signature })
    }

    pub fn verify(&self, provider: &dyn CryptoProvider, signer: &PublicKey) -> bool {
        signer.digest() == self.signer_digest
            && provider.verify(signer, &Self::bytes(&self.subject_hash, &self.nonce, self.approved, self.reason), &self.signature)
    }

    pub fn resign(&self, provider: &dyn CryptoProvider, signer: &NodeRecord) -> Result<Self> {
        Self::sign(provider, signer, self.subject_hash, self.nonce, self.approved, self.reason)
    }
}

/// Proposal awaiting a decision at P0.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PendingProposal {
    pub requester: PublicKey,
    pub proposal: ActionCertProposal,
}

/// N side: the request goes to the parent only.
pub fn request_action_cert(n: &NodeRecord, scope: ScopeLabel, nonce: Nonce) -> Result<(PublicKey, ActionRequest)> {
    let parent = n.parent.clone().ok_or(Error::NoParent)?;
    Ok((parent, ActionRequest { scope, nonce }))
}

/// P0 checks the requester and scope, then signs the proposal.
pub fn parent_propose(
    provider: &dyn CryptoProvider,
    p0: &NodeRecord,
    requester: &PublicKey,
    req: &ActionRequest,
    now: u64,
) -> Result<ActionCertProposal> {
    if !p0.role.can_issue() {
        return Err(Error::NotAManager);
    }
    if !p0.children.contains_key(requester) {
        return Err(Error::NotAuthorized);
    }
    let own_scope = match &p0.cert {
        Some(c) => c.scope.clone(),
        None => ScopeLabel::tenant_root(&p0.tenant.ok_or(Error::NotAManager)?),
    };
    if !own_scope.contains(&req.scope) {
        return Err(Error::ScopeExceeded);
    }
    let salt = p0.salt.ok_or(Error::NotAManager)?;
    ActionCertProposal::sign(provider, p0, leaf_hash(&salt, requester), req.scope.clone(), now, req.nonce)
}

/// A layer endorses the issuer below it if that child is a live manager.
pub fn endorse(
    provider: &dyn CryptoProvider,
    layer: &NodeRecord,
    child_pk: &PublicKey,
    proposal: &ActionCertProposal,
    now: u64,
) -> std::result::Result<Endorsement, Reason> {
    if layer.revocations.is_revoked(&child_pk.digest()) {
        return Err(Reason::IssuerRevoked);
    }
    let Some(role) = layer.children.get(child_pk) else {
        return Err(Reason::IssuerRevoked);
    };
    if *role != Role::Manager {
        return Err(Reason::RoleViolation);
    }
    let signature = provider
        .sign(&layer.keys.private, &Endorsement::signed_bytes(*role, now, &proposal.nonce))
        .map_err(|_| Reason::SignatureInvalid)?;
    Ok(Endorsement { endorsed_role: *role, t: now, nonce: proposal.nonce, signature })
}

/// Optional policy veto by any layer, even when the chain is valid.
pub fn policy_decide(hook: Option<&PolicyHook>, proposal: &ActionCertProposal) -> std::result::Result<(), Reason> {
    if hook.is_some_and(|h| h.denies_scope(proposal.scope.as_str())) {
        return Err(Reason::Custom);
    }
    Ok(())
}

/// P0 assembles the final certificate on approval.
pub fn finalize_action_cert(
    provider: &dyn CryptoProvider,
    p0: &NodeRecord,
    decision: &ActionDecision,
    pending: &PendingProposal,
    endorsements: Vec<Endorsement>,
) -> Result<Option<ActionCertificate>> {
    if decision.subject_hash != pending.proposal.subject_hash || decision.nonce != pending.proposal.nonce {
        return Err(Error::DecisionMismatch);
    }
    if !decision.approved {
        return Ok(None);
    }
    let signature = provider.sign(&p0.keys.private, &ActionCertificate::signed_bytes(&pending.proposal, &endorsements))?;
    Ok(Some(ActionCertificate { proposal: pending.proposal.clone(), endorsements, signature }))
}
