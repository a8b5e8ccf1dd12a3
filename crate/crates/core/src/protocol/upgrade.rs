//! Parent-signed leaf upgrade with layer-by-layer verification.
//!
//! Only the leaf's direct parent (P0) can sign a request. Its parent (P1)
//! verifies that signature plus a manager attestation; every higher layer
//! checks its own child and local policy. A denying layer answers downward
//! and never forwards upward.

use crate::canonical_struct;
use crate::codec::Encoder;
use crate::crypto::{CryptoProvider, Digest, Nonce, PublicKey, Signature};
use crate::error::{Error, Result};
use crate::messages::Reason;
use crate::tree::{leaf_hash, NodeRecord, Role};

/// Local policy knobs shared by the upgrade and action flows.
#[derive(Clone, Debug, PartialEq, Eq, serde::Deserialize, serde::Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct Policy {
    pub max_depth: u32,
    pub max_subtree: u64,
    /// Maximum number of manager children per manager; unlimited if absent.
    pub manager_quota: Option<u32>,
}

impl Default for Policy {
    fn default() -> Self {
        Policy { max_depth: 16, max_subtree: 1 << 16, manager_quota: None }
    }
}

/// Optional per-node hook for custom denials.
#[derive(Clone, Debug, Default, PartialEq, Eq, serde::Deserialize, serde::Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyHook {
    /// Deny action scopes containing this segment.
    pub deny_scope_segment: Option<String>,
    /// Deny every upgrade request passing through this layer.
    pub deny_upgrades: bool,
}

impl PolicyHook {
    pub fn denies_scope(&self, scope: &str) -> bool {
        self.deny_scope_segment
            .as_deref()
            .is_some_and(|seg| scope.split(':').skip(2).any(|s| s == seg))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UpgradeHint {
    pub leaf_hash: Digest,
    pub desired_role: Role,
}
canonical_struct!(UpgradeHint { leaf_hash, desired_role });

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UpgradeRequest {
    pub leaf_hash: Digest,
    pub desired_role: Role,
    pub t: u64,
    pub nonce: Nonce,
    pub leaf_depth: u32,
    pub p0_manager_children: u32,
    pub signature: Signature,
}
canonical_struct!(UpgradeRequest { leaf_hash, desired_role, t, nonce, leaf_depth, p0_manager_children, signature });

impl UpgradeRequest {
    pub fn signed_bytes(&self) -> Vec<u8> {
        let mut e = Encoder::new();
        e.field(&self.leaf_hash);
        e.field(&self.desired_role);
        e.field(&self.t);
        e.field(&self.nonce);
        e.field(&self.leaf_depth);
        e.field(&self.p0_manager_children);
        e.finish()
    }
}

/// Signed statement standing in for a zero-knowledge proof of manager
/// authority: P0 binds its own delegation certificate to this request.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManagerAttestation {
    pub cert_digest: Digest,
    pub subject: Digest,
    pub nonce: Nonce,
    pub t: u64,
    pub signature: Signature,
}
canonical_struct!(ManagerAttestation { cert_digest, subject, nonce, t, signature });

impl ManagerAttestation {
    pub fn signed_bytes(cert_digest: &Digest, subject: &Digest, nonce: &Nonce, t: u64) -> Vec<u8> {
        let mut e = Encoder::new();
        e.raw(b"manager-attestation");
        e.field(cert_digest);
        e.field(subject);
        e.field(nonce);
        e.field(&t);
        e.finish()
    }

    pub fn create(provider: &dyn CryptoProvider, signer: &NodeRecord, subject: Digest, nonce: Nonce, t: u64) -> Result<Self> {
        let cert_digest = signer.cert.as_ref().map(|c| c.digest()).unwrap_or_default();
        let signature = provider.sign(&signer.keys.private, &Self::signed_bytes(&cert_digest, &subject, &nonce, t))?;
        Ok(ManagerAttestation { cert_digest, subject, nonce, t, signature })
    }

    /// Checks the attestation against the signer's key and the certificate
    /// the verifier itself issued to the signer.
    pub fn verify(&self, provider: &dyn CryptoProvider, signer: &PublicKey, expected_cert: Option<&Digest>) -> bool {
        expected_cert.is_none_or(|c| c == &self.cert_digest)
            && provider.verify(signer, &Self::signed_bytes(&self.cert_digest, &self.subject, &self.nonce, self.t), &self.signature)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PolicyFlag {
    pub layer: Digest,
    pub approve: bool,
    pub reason: Option<Reason>,
}
canonical_struct!(PolicyFlag { layer, approve, reason });

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UpgradeDecision {
    pub leaf_hash: Digest,
    pub nonce: Nonce,
    pub approved: bool,
    pub reason: Option<Reason>,
    pub signer_digest: Digest,
    pub signature: Signature,
}
canonical_struct!(UpgradeDecision { leaf_hash, nonce, approved, reason, signer_digest, signature });

impl UpgradeDecision {
    fn bytes(leaf_hash: &Digest, nonce: &Nonce, approved: bool, reason: Option<Reason>) -> Vec<u8> {
        let mut e = Encoder::new();
        e.raw(b"upgrade-decision");
        e.field(leaf_hash);
        e.field(nonce);
        e.field(&approved);
        e.field(&reason);
        e.finish()
    }

    pub fn sign(provider: &dyn CryptoProvider, signer: &NodeRecord, leaf_hash: Digest, nonce: Nonce, approved: bool, reason: Option<Reason>) -> Result<Self> {
        let signature = provider.sign(&signer.keys.private, &Self::bytes(&leaf_hash, &nonce, approved, reason))?;
        Ok(UpgradeDecision { leaf_hash, nonce, approved, reason, signer_digest: signer.node_id, signature })
    }

    pub fn verify(&self, provider: &dyn CryptoProvider, signer: &PublicKey) -> bool {
        signer.digest() == self.signer_digest
            && provider.verify(signer, &Self::bytes(&self.leaf_hash, &self.nonce, self.approved, self.reason), &self.signature)
    }

    /// Re-signs a decision received from the parent.
    pub fn resign(&self, provider: &dyn CryptoProvider, signer: &NodeRecord) -> Result<Self> {
        Self::sign(provider, signer, self.leaf_hash, self.nonce, self.approved, self.reason)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UpgradeCertificate {
    pub leaf_hash: Digest,
    pub new_role: Role,
    pub t: u64,
    pub nonce: Nonce,
    pub signature: Signature,
}
canonical_struct!(UpgradeCertificate { leaf_hash, new_role, t, nonce, signature });

impl UpgradeCertificate {
    pub fn signed_bytes(leaf_hash: &Digest, role: Role, t: u64, nonce: &Nonce) -> Vec<u8> {
        let mut e = Encoder::new();
        e.raw(b"upgrade-cert");
        e.field(leaf_hash);
        e.field(&role);
        e.field(&t);
        e.field(nonce);
        e.finish()
    }

    pub fn verify(&self, provider: &dyn CryptoProvider, issuer: &PublicKey) -> bool {
        provider.verify(issuer, &Self::signed_bytes(&self.leaf_hash, self.new_role, self.t, &self.nonce), &self.signature)
    }
}

/// Upgrade run awaiting a decision at P0.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PendingUpgrade {
    pub leaf_pk: PublicKey,
    pub request: UpgradeRequest,
}

/// Leaf side: optional informational request. Non-leaves get `None`.
pub fn leaf_request_upgrade(leaf: &NodeRecord, desired: Role) -> Option<UpgradeHint> {
    if leaf.role != Role::Leaf {
        return None;
    }
    Some(UpgradeHint { leaf_hash: leaf.leaf_hash()?, desired_role: desired })
}

/// P0 signs the request and its attestation.
pub fn parent_sign_upgrade(
    provider: &dyn CryptoProvider,
    p0: &NodeRecord,
    leaf_pk: &PublicKey,
    desired: Role,
    now: u64,
    nonce: Nonce,
) -> Result<(UpgradeRequest, ManagerAttestation)> {
    if !p0.role.can_issue() {
        return Err(Error::NotAManager);
    }
    if p0.children.get(leaf_pk) != Some(&Role::Leaf) {
        return Err(Error::NotAuthorized);
    }
    let salt = p0.salt.ok_or(Error::NotAManager)?;
    let lh = leaf_hash(&salt, leaf_pk);
    let mut req = UpgradeRequest {
        leaf_hash: lh,
        desired_role: desired,
        t: now,
        nonce,
        leaf_depth: p0.depth + 1,
        p0_manager_children: p0.children.values().filter(|r| **r == Role::Manager).count() as u32,
        signature: Signature { signer_hint: p0.node_id, bytes: vec![] },
    };
    req.signature = provider.sign(&p0.keys.private, &req.signed_bytes())?;
    let att = ManagerAttestation::create(provider, p0, lh, nonce, now)?;
    Ok((req, att))
}

/// Outcome of one layer's checks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerOutcome {
    Forward(PolicyFlag),
    Deny(Reason),
}

/// What a layer knows about the request it is checking.
pub struct LayerInput<'a> {
    pub child_pk: &'a PublicKey,
    pub request: &'a UpgradeRequest,
    pub attestation: &'a ManagerAttestation,
    pub flags: &'a [PolicyFlag],
    /// True at P1, the only layer that can check P0's signature.
    pub first_layer: bool,
    pub subtree_size: u64,
}

/// Per-layer verification: the forwarding child must be a live manager,
/// P1 additionally verifies P0's signature and attestation, then local
/// policy applies.
pub fn layer_verify(
    provider: &dyn CryptoProvider,
    layer: &NodeRecord,
    input: &LayerInput<'_>,
    policy: &Policy,
    hook: Option<&PolicyHook>,
) -> LayerOutcome {
    if layer.children.get(input.child_pk) != Some(&Role::Manager) {
        return LayerOutcome::Deny(Reason::RoleViolation);
    }
    if layer.revocations.is_revoked(&input.child_pk.digest()) {
        return LayerOutcome::Deny(Reason::IssuerRevoked);
    }
    if input.first_layer {
        let req = input.request;
        if !provider.verify(input.child_pk, &req.signed_bytes(), &req.signature) {
            return LayerOutcome::Deny(Reason::RoleViolation);
        }
        let issued = layer.issued.get(input.child_pk).map(|c| c.digest());
        let att = input.attestation;
        if att.subject != req.leaf_hash || att.nonce != req.nonce || !att.verify(provider, input.child_pk, issued.as_ref()) {
            return LayerOutcome::Deny(Reason::RoleViolation);
        }
        if policy.manager_quota.is_some_and(|q| req.p0_manager_children >= q) {
            return LayerOutcome::Deny(Reason::SizeQuota);
        }
    }
    if input.flags.iter().any(|f| !f.approve) {
        return LayerOutcome::Deny(Reason::RoleViolation);
    }
    if input.subtree_size > policy.max_subtree {
        return LayerOutcome::Deny(Reason::SizeQuota);
    }
    if hook.is_some_and(|h| h.deny_upgrades) {
        return LayerOutcome::Deny(Reason::Custom);
    }
    LayerOutcome::Forward(PolicyFlag { layer: layer.node_id, approve: true, reason: None })
}

/// Root's global checks.
pub fn root_upgrade_decide(
    provider: &dyn CryptoProvider,
    root: &NodeRecord,
    req: &UpgradeRequest,
    flags: &[PolicyFlag],
    policy: &Policy,
    hook: Option<&PolicyHook>,
) -> Result<UpgradeDecision> {
    let reason = if flags.iter().any(|f| !f.approve) || req.desired_role != Role::Manager {
        Some(Reason::RoleViolation)
    } else if req.leaf_depth + 1 > policy.max_depth {
        Some(Reason::DepthLimit)
    } else if hook.is_some_and(|h| h.deny_upgrades) {
        Some(Reason::Custom)
    } else {
        None
    };
    UpgradeDecision::sign(provider, root, req.leaf_hash, req.nonce, reason.is_none(), reason)
}

/// P0 side of step 5: checks the decision against the pending request and
/// signs the upgrade certificate on approval.
pub fn issue_upgrade_cert(
    provider: &dyn CryptoProvider,
    p0: &mut NodeRecord,
    decision: &UpgradeDecision,
    pending: &PendingUpgrade,
    now: u64,
) -> Result<Option<UpgradeCertificate>> {
    if decision.nonce != pending.request.nonce || decision.leaf_hash != pending.request.leaf_hash {
        return Err(Error::DecisionMismatch);
    }
    if !decision.approved {
        return Ok(None);
    }
    let role = pending.request.desired_role;
    let signature = provider.sign(
        &p0.keys.private,
        &UpgradeCertificate::signed_bytes(&decision.leaf_hash, role, now, &decision.nonce),
    )?;
    p0.approved_upgrades.insert(pending.leaf_pk.clone());
    Ok(Some(UpgradeCertificate { leaf_hash: decision.leaf_hash, new_role: role, t: now, nonce: decision.nonce, signature }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::MockProvider;
    use crate::tree::{accept_membership, create_root, issue_delegation, promote_record, ScopeLabel, Validity};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    struct Chain {
        p: MockProvider,
        rng: ChaCha20Rng,
        root: NodeRecord,
        p0: NodeRecord,
        leaf: NodeRecord,
    }

    fn chain() -> Chain {
        let p = MockProvider;
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let mut root = create_root(&p, "root", rng.gen(), &mut rng);
        let mut p0 = NodeRecord::unaffiliated("p0", p.generate(&mut rng));
        let mut leaf = NodeRecord::unaffiliated("leaf", p.generate(&mut rng));
        let scope = ScopeLabel::tenant_root(&root.tenant.unwrap());
        let c = issue_delegation(&p, &mut root, &p0.public().clone(), Role::Manager, scope.clone(), Validity::starting(0, 100), Nonce::random(&mut rng)).unwrap();
        accept_membership(&mut p0, &root.public().clone(), c, root.tenant.unwrap(), 1, root.salt.unwrap(), None);
        let c = issue_delegation(&p, &mut p0, &leaf.public().clone(), Role::Leaf, scope, Validity::starting(0, 100), Nonce::random(&mut rng)).unwrap();
        accept_membership(&mut leaf, &p0.public().clone(), c, root.tenant.unwrap(), 2, root.salt.unwrap(), None);
        Chain { p, rng, root, p0, leaf }
    }

    #[test]
    fn hint_carries_salted_hash_only() {
        let c = chain();
        let hint = leaf_request_upgrade(&c.leaf, Role::Manager).unwrap();
        assert_eq!(Some(hint.leaf_hash), c.leaf.leaf_hash());
        assert_ne!(hint.leaf_hash, c.leaf.public().digest());
        assert!(leaf_request_upgrade(&c.p0, Role::Manager).is_none());
    }

    #[test]
    fn signed_request_passes_first_layer() {
        let mut c = chain();
        let n = Nonce::random(&mut c.rng);
        let (req, att) = parent_sign_upgrade(&c.p, &c.p0, c.leaf.public(), Role::Manager, 5, n).unwrap();
        assert!(c.p.verify(c.p0.public(), &req.signed_bytes(), &req.signature));
        let input = LayerInput { child_pk: c.p0.public(), request: &req, attestation: &att, flags: &[], first_layer: true, subtree_size: 3 };
        assert!(matches!(layer_verify(&c.p, &c.root, &input, &Policy::default(), None), LayerOutcome::Forward(_)));
        let quota = Policy { max_subtree: 2, ..Policy::default() };
        assert_eq!(layer_verify(&c.p, &c.root, &input, &quota, None), LayerOutcome::Deny(Reason::SizeQuota));
    }

    #[test]
    fn leaf_forged_request_is_denied() {
        let mut c = chain();
        let n = Nonce::random(&mut c.rng);
        // the leaf signs a request with its own key, pretending to be P0
        let mut forged = parent_sign_upgrade(&c.p, &c.p0, c.leaf.public(), Role::Manager, 5, n).unwrap();
        forged.0.signature = c.p.sign(&c.leaf.keys.private, &forged.0.signed_bytes()).unwrap();
        let input = LayerInput { child_pk: c.p0.public(), request: &forged.0, attestation: &forged.1, flags: &[], first_layer: true, subtree_size: 3 };
        assert_eq!(layer_verify(&c.p, &c.root, &input, &Policy::default(), None), LayerOutcome::Deny(Reason::RoleViolation));
    }

    #[test]
    fn only_the_parent_can_sign() {
        let mut c = chain();
        let n = Nonce::random(&mut c.rng);
        assert_eq!(parent_sign_upgrade(&c.p, &c.root, c.leaf.public(), Role::Manager, 1, n), Err(Error::NotAuthorized));
        assert_eq!(parent_sign_upgrade(&c.p, &c.leaf, c.leaf.public(), Role::Manager, 1, n), Err(Error::NotAManager));
    }

    #[test]
    fn request_from_leaf_child_is_role_violation() {
        let mut c = chain();
        let n = Nonce::random(&mut c.rng);
        let (req, att) = parent_sign_upgrade(&c.p, &c.p0, c.leaf.public(), Role::Manager, 5, n).unwrap();
        let input = LayerInput { child_pk: c.leaf.public(), request: &req, attestation: &att, flags: &[], first_layer: true, subtree_size: 1 };
        assert_eq!(layer_verify(&c.p, &c.p0, &input, &Policy::default(), None), LayerOutcome::Deny(Reason::RoleViolation));
    }

    #[test]
    fn root_decision_and_certificate() {
        let mut c = chain();
        let n = Nonce::random(&mut c.rng);
        let (req, _) = parent_sign_upgrade(&c.p, &c.p0, c.leaf.public(), Role::Manager, 5, n).unwrap();
        let dec = root_upgrade_decide(&c.p, &c.root, &req, &[], &Policy::default(), None).unwrap();
        assert!(dec.approved && dec.verify(&c.p, c.root.public()));
        let capped = root_upgrade_decide(&c.p, &c.root, &req, &[], &Policy { max_depth: 2, ..Policy::default() }, None).unwrap();
        assert_eq!((capped.approved, capped.reason), (false, Some(Reason::DepthLimit)));

        let pending = PendingUpgrade { leaf_pk: c.leaf.public().clone(), request: req.clone() };
        let mut other = pending.clone();
        other.request.nonce = Nonce::random(&mut c.rng);
        assert_eq!(issue_upgrade_cert(&c.p, &mut c.p0, &dec, &other, 6), Err(Error::DecisionMismatch));
        assert_eq!(issue_upgrade_cert(&c.p, &mut c.p0, &capped, &pending, 6), Ok(None));
        let cert = issue_upgrade_cert(&c.p, &mut c.p0, &dec, &pending, 6).unwrap().unwrap();
        assert!(cert.verify(&c.p, c.p0.public()));
        let leaf_pk = c.leaf.public().clone();
        let n2 = Nonce::random(&mut c.rng);
        let mc = promote_record(&c.p, &mut c.p0, &leaf_pk, 6, 100, n2).unwrap();
        assert_eq!(mc.role, Role::Manager);
    }

    #[test]
    fn hook_matches_scope_segments() {
        let h = PolicyHook { deny_scope_segment: Some("admin".into()), deny_upgrades: false };
        assert!(h.denies_scope("tenant:ab:admin"));
        assert!(h.denies_scope("tenant:ab:storage:admin"));
        assert!(!h.denies_scope("tenant:ab:administrator"));
        assert!(!h.denies_scope("tenant:admin:read"));
    }
}
