//! Tenant registry and explicit cross-tenant bridges.

use std::collections::BTreeMap;

use crate::canonical_struct;
use crate::codec::Encoder;
use crate::crypto::{CryptoProvider, Digest, PublicKey, Signature};
use crate::error::{Error, Result};
use crate::messages::Reason;
use crate::tree::{NodeRecord, ScopeLabel, TenantId, Validity};

/// Scoped, expiring delegation from a manager of one tenant to a node of
/// another. Never confers issuance rights and is never merged into a tree.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CrossTenantDelegation {
    pub issuer_digest: Digest,
    pub issuer_tenant: TenantId,
    pub subject_pk: PublicKey,
    pub scope: ScopeLabel,
    pub validity: Validity,
    pub actions: Vec<String>,
    pub signature: Signature,
}
canonical_struct!(CrossTenantDelegation { issuer_digest, issuer_tenant, subject_pk, scope, validity, actions, signature });

impl CrossTenantDelegation {
    fn bytes(&self) -> Vec<u8> {
        let mut e = Encoder::new();
        e.raw(b"bridge");
        e.field(&self.issuer_digest);
        e.field(&self.issuer_tenant);
        e.field(&self.subject_pk);
        e.field(&self.scope);
        e.field(&self.validity);
        e.field(&self.actions);
        e.finish()
    }

    pub fn verify(&self, provider: &dyn CryptoProvider, issuer: &PublicKey) -> bool {
        issuer.digest() == self.issuer_digest && provider.verify(issuer, &self.bytes(), &self.signature)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BridgeAccess {
    pub bridge: CrossTenantDelegation,
    pub requested: ScopeLabel,
}
canonical_struct!(BridgeAccess { bridge, requested });

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BridgeResult {
    pub granted: bool,
    pub reason: Option<Reason>,
}
canonical_struct!(BridgeResult { granted, reason });

/// Issues a bridge. The foreign key must already have been exchanged out
/// of band.
pub fn create_bridge(
    provider: &dyn CryptoProvider,
    issuer: &NodeRecord,
    foreign_pk: &PublicKey,
    scope: ScopeLabel,
    validity: Validity,
    actions: Vec<String>,
) -> Result<CrossTenantDelegation> {
    if !issuer.role.can_issue() || issuer.tenant.is_none() {
        return Err(Error::NotAManager);
    }
    if issuer.revoked {
        return Err(Error::IssuerRevoked);
    }
    if !issuer.trusted.contains(foreign_pk) {
        return Err(Error::KeyNotVisible);
    }
    let own_scope = issuer
        .cert
        .as_ref()
        .map(|c| c.scope.clone())
        .unwrap_or_else(|| ScopeLabel::tenant_root(&issuer.tenant.unwrap()));
    if !own_scope.contains(&scope) {
        return Err(Error::ScopeExceeded);
    }
    let mut bridge = CrossTenantDelegation {
        issuer_digest: issuer.node_id,
        issuer_tenant: issuer.tenant.unwrap(),
        subject_pk: foreign_pk.clone(),
        scope,
        validity,
        actions,
        signature: Signature { signer_hint: issuer.node_id, bytes: vec![] },
    };
    bridge.signature = provider.sign(&issuer.keys.private, &bridge.bytes())?;
    Ok(bridge)
}

/// Issuer-side check of a presented bridge. Only bridges this issuer signed
/// for the presenting key are honoured, which makes bridges non-transitive.
pub fn check_bridge_access(
    provider: &dyn CryptoProvider,
    issuer: &NodeRecord,
    presenter: &PublicKey,
    access: &BridgeAccess,
    now: u64,
) -> std::result::Result<(), Reason> {
    let b = &access.bridge;
    if !b.verify(provider, issuer.public()) {
        return Err(Reason::SignatureInvalid);
    }
    if &b.subject_pk != presenter {
        return Err(Reason::NotAuthorized);
    }
    if !b.validity.contains(now) {
        return Err(Reason::Expired);
    }
    if !b.scope.contains(&access.requested) {
        return Err(Reason::ScopeExceeded);
    }
    Ok(())
}

/// Every tenant in a world and the bridges between them.
#[derive(Clone, Debug, Default)]
pub struct TenantRegistry {
    pub tenants: BTreeMap<TenantId, Digest>,
    pub bridges: Vec<CrossTenantDelegation>,
}

impl TenantRegistry {
    pub fn register(&mut self, tenant: TenantId, root: Digest) {
        self.tenants.insert(tenant, root);
    }

    /// True if some bridge issued in `tenant` names `subject`.
    pub fn bridged(&self, tenant: &TenantId, subject: &PublicKey) -> bool {
        self.bridges.iter().any(|b| &b.issuer_tenant == tenant && &b.subject_pk == subject)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::MockProvider;
    use crate::tree::create_root;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn bridge_scope_expiry_and_transitivity() {
        let p = MockProvider;
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let mut a = create_root(&p, "a", rng.gen(), &mut rng);
        let mut b = create_root(&p, "b", rng.gen(), &mut rng);
        let c = create_root(&p, "c", rng.gen(), &mut rng);
        let ta = a.tenant.unwrap();
        let read = ScopeLabel::new(&ta, "read");
        assert_eq!(
            create_bridge(&p, &a, b.public(), read.clone(), Validity::starting(0, 10), vec![]),
            Err(Error::KeyNotVisible)
        );
        a.trust(b.public().clone());
        let bridge = create_bridge(&p, &a, b.public(), read.clone(), Validity::starting(0, 10), vec!["get".into()]).unwrap();
        let ok = BridgeAccess { bridge: bridge.clone(), requested: read.clone() };
        assert_eq!(check_bridge_access(&p, &a, b.public(), &ok, 5), Ok(()));
        let admin = BridgeAccess { bridge: bridge.clone(), requested: ScopeLabel::new(&ta, "admin") };
        assert_eq!(check_bridge_access(&p, &a, b.public(), &admin, 5), Err(Reason::ScopeExceeded));
        assert_eq!(check_bridge_access(&p, &a, b.public(), &ok, 11), Err(Reason::Expired));
        // c presenting b's bridge
        assert_eq!(check_bridge_access(&p, &a, c.public(), &ok, 5), Err(Reason::NotAuthorized));
        // b re-bridging its A-scope to c is signed by b, which a does not honour
        b.trust(c.public().clone());
        let tb = b.tenant.unwrap();
        let hop = create_bridge(&p, &b, c.public(), ScopeLabel::new(&tb, "read"), Validity::starting(0, 10), vec![]).unwrap();
        let relay = BridgeAccess { bridge: hop, requested: read };
        assert_eq!(check_bridge_access(&p, &a, c.public(), &relay, 5), Err(Reason::SignatureInvalid));
    }

    #[test]
    fn leaf_cannot_bridge() {
        let p = MockProvider;
        let mut rng = ChaCha20Rng::seed_from_u64(12);
        let mut leaf = NodeRecord::unaffiliated("l", p.generate(&mut rng));
        let other = p.generate(&mut rng).public;
        leaf.trust(other.clone());
        let t = TenantId(crate::crypto::hash(b"t"));
        assert_eq!(
            create_bridge(&p, &leaf, &other, ScopeLabel::tenant_root(&t), Validity::starting(0, 1), vec![]),
            Err(Error::NotAManager)
        );
    }
}
