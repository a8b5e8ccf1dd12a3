//! Node records, delegation certificates, revocation and key rotation.

use std::collections::{BTreeMap, BTreeSet, HashSet, VecDeque};
use std::fmt;

use rand::RngCore;

use crate::canonical_struct;
use crate::codec::{Canonical, CodecError, Decoder, Encoder};
use crate::crypto::{CryptoProvider, Digest, KeyPair, Nonce, PublicKey, PublicKeyDigest, Signature};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Role {
    Root,
    Manager,
    Leaf,
}

impl Role {
    pub fn can_issue(self) -> bool {
        matches!(self, Role::Root | Role::Manager)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Root => "root",
            Role::Manager => "manager",
            Role::Leaf => "leaf",
        }
    }

    pub fn parse(s: &str) -> Option<Role> {
        match s {
            "root" => Some(Role::Root),
            "manager" => Some(Role::Manager),
            "leaf" => Some(Role::Leaf),
            _ => None,
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Canonical for Role {
    fn encode(&self, e: &mut Encoder) {
        e.raw(&[*self as u8]);
    }
    fn decode(d: &mut Decoder<'_>) -> std::result::Result<Self, CodecError> {
        match d.take(1)?[0] {
            0 => Ok(Role::Root),
            1 => Ok(Role::Manager),
            2 => Ok(Role::Leaf),
            _ => Err(CodecError::Invalid("role")),
        }
    }
}

/// Tenant identifier: the digest of the root's original public key.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct TenantId(pub Digest);

impl Canonical for TenantId {
    fn encode(&self, e: &mut Encoder) {
        self.0.encode(e);
    }
    fn decode(d: &mut Decoder<'_>) -> std::result::Result<Self, CodecError> {
        Ok(TenantId(Digest::decode(d)?))
    }
}

impl fmt::Display for TenantId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(&self.0 .0[..8]))
    }
}

/// Permission label of the form `tenant:<id>:<segment>:<segment>...`.
///
/// Containment is segment-wise prefix matching: `tenant:x:storage` covers
/// `tenant:x:storage:read` but not `tenant:x:storagex`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ScopeLabel(String);

impl ScopeLabel {
    /// The whole-tenant scope held by a root.
    pub fn tenant_root(tenant: &TenantId) -> ScopeLabel {
        ScopeLabel(format!("tenant:{tenant}"))
    }

    pub fn new(tenant: &TenantId, permission: &str) -> ScopeLabel {
        if permission.is_empty() {
            Self::tenant_root(tenant)
        } else {
            ScopeLabel(format!("tenant:{tenant}:{permission}"))
        }
    }

    pub fn parse(s: &str) -> Option<ScopeLabel> {
        let mut parts = s.split(':');
        (parts.next() == Some("tenant") && parts.next().is_some_and(|t| !t.is_empty()))
            .then(|| ScopeLabel(s.to_string()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Tenant component of the label.
    pub fn tenant_part(&self) -> &str {
        self.0.split(':').nth(1).unwrap_or("")
    }

    pub fn contains(&self, other: &ScopeLabel) -> bool {
        other.0 == self.0
            || (other.0.starts_with(&self.0) && other.0.as_bytes().get(self.0.len()) == Some(&b':'))
    }
}

impl fmt::Display for ScopeLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl Canonical for ScopeLabel {
    fn encode(&self, e: &mut Encoder) {
        e.raw(self.0.as_bytes());
    }
    fn decode(d: &mut Decoder<'_>) -> std::result::Result<Self, CodecError> {
        let s = String::decode(d)?;
        ScopeLabel::parse(&s).ok_or(CodecError::Invalid("scope label"))
    }
}

/// Inclusive interval of logical ticks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Validity {
    pub not_before: u64,
    pub not_after: u64,
}
canonical_struct!(Validity { not_before, not_after });

impl Validity {
    pub fn starting(now: u64, lifetime: u64) -> Validity {
        Validity { not_before: now, not_after: now.saturating_add(lifetime) }
    }

    pub fn contains(&self, now: u64) -> bool {
        self.not_before <= now && now <= self.not_after && self.not_before <= self.not_after
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DelegationCertificate {
    pub subject_pk: PublicKey,
    pub role: Role,
    pub scope: ScopeLabel,
    pub validity: Validity,
    pub nonce: Nonce,
    pub issuer_pk_digest: PublicKeyDigest,
    pub signature: Signature,
}
canonical_struct!(DelegationCertificate {
    subject_pk,
    role,
    scope,
    validity,
    nonce,
    issuer_pk_digest,
    signature
});

#[derive(Clone, Debug, PartialEq, Eq)]
struct CertBody<'a> {
    subject_pk: &'a PublicKey,
    role: Role,
    scope: &'a ScopeLabel,
    validity: Validity,
    nonce: Nonce,
    issuer_pk_digest: PublicKeyDigest,
}

impl CertBody<'_> {
    fn bytes(&self) -> Vec<u8> {
        let mut e = Encoder::new();
        e.field(self.subject_pk);
        e.field(&self.role);
        e.field(self.scope);
        e.field(&self.validity);
        e.field(&self.nonce);
        e.field(&self.issuer_pk_digest);
        e.finish()
    }
}

impl DelegationCertificate {
    /// Canonical bytes covered by the signature.
    pub fn signed_bytes(&self) -> Vec<u8> {
        CertBody {
            subject_pk: &self.subject_pk,
            role: self.role,
            scope: &self.scope,
            validity: self.validity,
            nonce: self.nonce,
            issuer_pk_digest: self.issuer_pk_digest,
        }
        .bytes()
    }

    pub fn verify_signature(&self, provider: &dyn CryptoProvider, issuer: &PublicKey) -> bool {
        issuer.digest() == self.issuer_pk_digest
            && provider.verify(issuer, &self.signed_bytes(), &self.signature)
    }

    pub fn digest(&self) -> Digest {
        crate::crypto::hash(&self.to_canonical())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RevocationReason {
    VoluntaryLeave,
    Termination,
    Compromise,
}

impl RevocationReason {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "leave" | "voluntary-leave" => Some(Self::VoluntaryLeave),
            "termination" => Some(Self::Termination),
            "compromise" => Some(Self::Compromise),
            _ => None,
        }
    }
}

impl Canonical for RevocationReason {
    fn encode(&self, e: &mut Encoder) {
        e.raw(&[*self as u8]);
    }
    fn decode(d: &mut Decoder<'_>) -> std::result::Result<Self, CodecError> {
        match d.take(1)?[0] {
            0 => Ok(Self::VoluntaryLeave),
            1 => Ok(Self::Termination),
            2 => Ok(Self::Compromise),
            _ => Err(CodecError::Invalid("revocation reason")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RevocationNotice {
    pub subject_pk_digest: PublicKeyDigest,
    pub issued_at: u64,
    pub reason: RevocationReason,
    pub signature: Signature,
}
canonical_struct!(RevocationNotice { subject_pk_digest, issued_at, reason, signature });

impl RevocationNotice {
    pub fn signed_bytes(subject: &Digest, issued_at: u64, reason: RevocationReason) -> Vec<u8> {
        let mut e = Encoder::new();
        e.field(subject);
        e.field(&issued_at);
        e.field(&reason);
        e.finish()
    }

    pub fn digest(&self) -> Digest {
        crate::crypto::hash(&self.to_canonical())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Deserialize, serde::Serialize)]
pub enum DelegationModel {
    #[default]
    HierarchicalOnly,
    FullPath,
}

/// Bounded FIFO replay cache.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NonceCache {
    capacity: usize,
    order: VecDeque<Nonce>,
    seen: HashSet<Nonce>,
}

impl NonceCache {
    pub fn new(capacity: usize) -> Self {
        NonceCache { capacity, order: VecDeque::new(), seen: HashSet::new() }
    }

    /// Returns false when the nonce was already present.
    pub fn insert(&mut self, n: Nonce) -> bool {
        if self.seen.contains(&n) {
            return false;
        }
        if self.order.len() == self.capacity {
            if let Some(old) = self.order.pop_front() {
                self.seen.remove(&old);
            }
        }
        self.order.push_back(n);
        self.seen.insert(n);
        true
    }

    pub fn contains(&self, n: &Nonce) -> bool {
        self.seen.contains(n)
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }
}

impl Default for NonceCache {
    fn default() -> Self {
        NonceCache::new(4096)
    }
}

/// Locally replicated revocation and key-retirement knowledge.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RevocationSet {
    pub revoked: BTreeSet<Digest>,
    /// Retired key digest → tick of retirement. Certificates issued under a
    /// retired key stop verifying from that tick on.
    pub retired: BTreeMap<Digest, u64>,
}

impl RevocationSet {
    pub fn is_revoked(&self, d: &Digest) -> bool {
        self.revoked.contains(d)
    }

    pub fn issuer_expired(&self, issuer: &Digest, now: u64) -> bool {
        self.retired.get(issuer).is_some_and(|t| now >= *t)
    }
}

/// A participant's full local state.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NodeRecord {
    pub name: String,
    pub node_id: PublicKeyDigest,
    pub keys: KeyPair,
    pub role: Role,
    pub tenant: Option<TenantId>,
    pub parent: Option<PublicKey>,
    pub children: BTreeMap<PublicKey, Role>,
    pub known_keys: BTreeSet<PublicKey>,
    /// Keys obtained out of band. Always a subset of `known_keys`.
    pub trusted: BTreeSet<PublicKey>,
    pub nonce_cache: NonceCache,
    pub revoked: bool,
    pub cert: Option<DelegationCertificate>,
    pub cert_chain: Option<Vec<DelegationCertificate>>,
    /// Certificates this node issued to its current children.
    pub issued: BTreeMap<PublicKey, DelegationCertificate>,
    pub depth: u32,
    /// Per-tenant leaf-hash salt, learned on admission.
    pub salt: Option<[u8; 32]>,
    pub revocations: RevocationSet,
    /// Children whose upgrade was approved and not yet promoted.
    pub approved_upgrades: BTreeSet<PublicKey>,
}

impl NodeRecord {
    /// A fresh, unaffiliated node (a join candidate or a service node).
    pub fn unaffiliated(name: &str, keys: KeyPair) -> NodeRecord {
        NodeRecord {
            name: name.to_string(),
            node_id: keys.public.digest(),
            keys,
            role: Role::Leaf,
            tenant: None,
            parent: None,
            children: BTreeMap::new(),
            known_keys: BTreeSet::new(),
            trusted: BTreeSet::new(),
            nonce_cache: NonceCache::default(),
            revoked: false,
            cert: None,
            cert_chain: None,
            issued: BTreeMap::new(),
            depth: 0,
            salt: None,
            revocations: RevocationSet::default(),
            approved_upgrades: BTreeSet::new(),
        }
    }

    pub fn public(&self) -> &PublicKey {
        &self.keys.public
    }

    pub fn is_member(&self) -> bool {
        self.tenant.is_some() && !self.revoked
    }

    /// Records an out-of-band key exchange.
    pub fn trust(&mut self, pk: PublicKey) {
        self.trusted.insert(pk.clone());
        self.known_keys.insert(pk);
    }

    pub fn knows(&self, pk: &PublicKey) -> bool {
        pk == self.public() || self.known_keys.contains(pk)
    }

    /// Looks up a known key by digest.
    pub fn known_by_digest(&self, d: &Digest) -> Option<&PublicKey> {
        if &self.node_id == d {
            return Some(&self.keys.public);
        }
        self.known_keys.iter().find(|k| &k.digest() == d)
    }

    pub fn child_by_digest(&self, d: &Digest) -> Option<(&PublicKey, Role)> {
        self.children.iter().find(|(k, _)| &k.digest() == d).map(|(k, r)| (k, *r))
    }

    /// Checks the key-visibility rule: known keys are the parent, direct
    /// children, and explicitly trusted keys only.
    pub fn key_visibility_holds(&self) -> bool {
        self.trusted.is_subset(&self.known_keys)
            && self.known_keys.iter().all(|k| {
                self.parent.as_ref() == Some(k) || self.children.contains_key(k) || self.trusted.contains(k)
            })
    }

    /// Structural role invariants.
    pub fn role_invariants_hold(&self) -> bool {
        match self.role {
            Role::Root => self.parent.is_none(),
            Role::Leaf => self.children.is_empty(),
            Role::Manager => true,
        }
    }

    pub fn leaf_hash(&self) -> Option<Digest> {
        self.salt.map(|s| leaf_hash(&s, self.public()))
    }
}

/// Salted leaf hash used wherever a subject must be named without its key.
pub fn leaf_hash(salt: &[u8; 32], pk: &PublicKey) -> Digest {
    crate::crypto::hash_parts(&[b"pvtn-leaf", salt, pk.as_bytes()])
}

pub const DEFAULT_CERT_LIFETIME: u64 = 10_000;

/// Creates a tenant root with its key pair derived from `seed`.
pub fn create_root(provider: &dyn CryptoProvider, name: &str, seed: [u8; 32], rng: &mut dyn RngCore) -> NodeRecord {
    let keys = provider.keypair_from_seed(seed);
    let mut node = NodeRecord::unaffiliated(name, keys);
    let tenant = TenantId(node.node_id);
    let mut salt = [0u8; 32];
    rng.fill_bytes(&mut salt);
    node.role = Role::Root;
    node.tenant = Some(tenant);
    node.salt = Some(salt);
    node
}

/// Signs a delegation certificate for `child_pk` and links the child into
/// the issuer's children map.
pub fn issue_delegation(
    provider: &dyn CryptoProvider,
    parent: &mut NodeRecord,
    child_pk: &PublicKey,
    role: Role,
    scope: ScopeLabel,
    validity: Validity,
    nonce: Nonce,
) -> Result<DelegationCertificate> {
    if !parent.role.can_issue() {
        return Err(Error::NotAManager);
    }
    if parent.revoked {
        return Err(Error::IssuerRevoked);
    }
    if role == Role::Root {
        return Err(Error::InvalidRole);
    }
    let cert = sign_cert(provider, &parent.keys, child_pk, role, scope, validity, nonce)?;
    parent.children.insert(child_pk.clone(), role);
    parent.known_keys.insert(child_pk.clone());
    parent.issued.insert(child_pk.clone(), cert.clone());
    Ok(cert)
}

pub(crate) fn sign_cert(
    provider: &dyn CryptoProvider,
    issuer: &KeyPair,
    subject: &PublicKey,
    role: Role,
    scope: ScopeLabel,
    validity: Validity,
    nonce: Nonce,
) -> Result<DelegationCertificate> {
    let issuer_pk_digest = issuer.public.digest();
    let body = CertBody { subject_pk: subject, role, scope: &scope, validity, nonce, issuer_pk_digest };
    let signature = provider.sign(&issuer.private, &body.bytes())?;
    Ok(DelegationCertificate {
        subject_pk: subject.clone(),
        role,
        scope,
        validity,
        nonce,
        issuer_pk_digest,
        signature,
    })
}

/// Installs a received delegation on the child side.
pub fn accept_membership(
    child: &mut NodeRecord,
    parent_pk: &PublicKey,
    cert: DelegationCertificate,
    tenant: TenantId,
    depth: u32,
    salt: [u8; 32],
    chain: Option<Vec<DelegationCertificate>>,
) {
    child.parent = Some(parent_pk.clone());
    child.known_keys.insert(parent_pk.clone());
    child.role = cert.role;
    child.tenant = Some(tenant);
    child.depth = depth;
    child.salt = Some(salt);
    child.revoked = false;
    child.cert_chain = chain.map(|mut c| {
        c.push(cert.clone());
        c
    });
    child.cert = Some(cert);
}

/// Parses a chain written as hex canonical certificates, one per line,
/// root side first. Errors carry the 1-based line number.
pub fn chain_from_hex(text: &str) -> std::result::Result<Vec<DelegationCertificate>, (usize, String)> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            hex::decode(l.trim())
                .map_err(|e| e.to_string())
                .and_then(|b| DelegationCertificate::from_canonical(&b).map_err(|e| e.to_string()))
                .map_err(|e| (i + 1, e))
        })
        .collect()
}

pub fn key_from_hex(text: &str) -> std::result::Result<PublicKey, String> {
    hex::decode(text.trim()).map(PublicKey).map_err(|e| e.to_string())
}

/// Full-path chain verification against a tenant trust anchor.
///
/// Intermediate subjects must hold an issuing role, each link must be
/// signed by the previous subject, every link must be live at `now`, no
/// subject may be revoked and no issuer key may be retired.
pub fn verify_chain(
    provider: &dyn CryptoProvider,
    chain: &[DelegationCertificate],
    anchor: &PublicKey,
    now: u64,
    status: &RevocationSet,
) -> bool {
    let Some(first) = chain.first() else { return false };
    let mut issuer = anchor;
    for (i, cert) in chain.iter().enumerate() {
        if !cert.verify_signature(provider, issuer) {
            return false;
        }
        if !cert.validity.contains(now) || status.issuer_expired(&cert.issuer_pk_digest, now) {
            return false;
        }
        if status.is_revoked(&cert.subject_pk.digest()) {
            return false;
        }
        if i + 1 < chain.len() && !cert.role.can_issue() {
            return false;
        }
        issuer = &cert.subject_pk;
    }
    first.issuer_pk_digest == anchor.digest()
}

/// Read-only omniscient view over one tenant's records, used for authority
/// checks and oracles. Protocol handlers never consult it.
pub struct TreeView<'a> {
    nodes: BTreeMap<Digest, &'a NodeRecord>,
}

impl<'a> TreeView<'a> {
    pub fn new(records: impl IntoIterator<Item = &'a NodeRecord>) -> Self {
        TreeView { nodes: records.into_iter().map(|r| (r.node_id, r)).collect() }
    }

    pub fn get(&self, d: &Digest) -> Option<&'a NodeRecord> {
        self.nodes.get(d).copied()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn digests(&self) -> impl Iterator<Item = &Digest> {
        self.nodes.keys()
    }

    pub fn children(&self, d: &Digest) -> Vec<Digest> {
        self.get(d)
            .map(|r| r.children.keys().map(|k| k.digest()).filter(|c| self.nodes.contains_key(c)).collect())
            .unwrap_or_default()
    }

    pub fn parent(&self, d: &Digest) -> Option<Digest> {
        self.get(d)?.parent.as_ref().map(|p| p.digest())
    }

    /// `d` and all its descendants.
    pub fn subtree(&self, d: &Digest) -> BTreeSet<Digest> {
        let mut out = BTreeSet::new();
        let mut stack = vec![*d];
        while let Some(n) = stack.pop() {
            if self.nodes.contains_key(&n) && out.insert(n) {
                stack.extend(self.children(&n));
            }
        }
        out
    }

    /// Path from the root down to `d`, inclusive.
    pub fn path_from_root(&self, d: &Digest) -> Vec<Digest> {
        let mut path = vec![*d];
        let mut cur = *d;
        while let Some(p) = self.parent(&cur) {
            if path.contains(&p) || path.len() > self.nodes.len() {
                break;
            }
            path.push(p);
            cur = p;
        }
        path.reverse();
        path
    }

    pub fn depth_of(&self, d: &Digest) -> usize {
        self.path_from_root(d).len().saturating_sub(1)
    }

    pub fn roots(&self) -> Vec<Digest> {
        self.nodes.values().filter(|r| r.role == Role::Root).map(|r| r.node_id).collect()
    }

    /// Checks the rooted-tree invariant: one root, every other node has a
    /// parent in the view that lists it as a child, and no cycles.
    pub fn is_rooted_tree(&self) -> bool {
        let roots = self.roots();
        if roots.len() != 1 {
            return false;
        }
        for r in self.nodes.values() {
            if r.role == Role::Root {
                continue;
            }
            let Some(p) = r.parent.as_ref().and_then(|p| self.get(&p.digest())) else {
                return false;
            };
            if !p.children.contains_key(r.public()) {
                return false;
            }
        }
        self.subtree(&roots[0]).len() == self.nodes.len()
    }
}

/// Outcome of a revocation decision.
#[derive(Clone, Debug)]
pub struct Revocation {
    pub notice: RevocationNotice,
    pub affected: BTreeSet<Digest>,
}

/// Authorizes and signs a revocation of `subject_pk` by `manager`.
pub fn revoke(
    provider: &dyn CryptoProvider,
    manager: &NodeRecord,
    subject_pk: &PublicKey,
    reason: RevocationReason,
    now: u64,
    tree: &TreeView<'_>,
) -> Result<Revocation> {
    if !manager.role.can_issue() {
        return Err(Error::NotAManager);
    }
    if manager.revoked {
        return Err(Error::IssuerRevoked);
    }
    let subject = subject_pk.digest();
    if subject == manager.node_id || !tree.subtree(&manager.node_id).contains(&subject) {
        return Err(Error::NotAuthorized);
    }
    let signature =
        provider.sign(&manager.keys.private, &RevocationNotice::signed_bytes(&subject, now, reason))?;
    Ok(Revocation {
        notice: RevocationNotice { subject_pk_digest: subject, issued_at: now, reason, signature },
        affected: tree.subtree(&subject),
    })
}

/// Applies a verified revocation notice to one record. `in_subject_subtree`
/// is true for the subject itself and every node below it.
pub fn apply_revocation(record: &mut NodeRecord, notice: &RevocationNotice, in_subject_subtree: bool) {
    record.revocations.revoked.insert(notice.subject_pk_digest);
    if let Some((pk, _)) = record.child_by_digest(&notice.subject_pk_digest) {
        let pk = pk.clone();
        record.children.remove(&pk);
        record.known_keys.remove(&pk);
        record.trusted.remove(&pk);
        record.issued.remove(&pk);
        record.approved_upgrades.remove(&pk);
    }
    if in_subject_subtree {
        record.revoked = true;
    }
}

/// Result of rotating a manager's keys.
#[derive(Clone, Debug)]
pub struct Rotation {
    pub old_public: PublicKey,
    pub reissued: Vec<DelegationCertificate>,
    pub retired_at: u64,
}

/// Replaces `manager`'s key pair and reissues its children's certificates
/// under the new key.
pub fn rotate_keys(
    provider: &dyn CryptoProvider,
    manager: &mut NodeRecord,
    new_keys: KeyPair,
    now: u64,
    lifetime: u64,
    rng: &mut dyn RngCore,
) -> Result<Rotation> {
    if !manager.role.can_issue() {
        return Err(Error::NotAManager);
    }
    let old_public = manager.keys.public.clone();
    manager.revocations.retired.insert(old_public.digest(), now);
    manager.keys = new_keys;
    manager.node_id = manager.keys.public.digest();
    let mut reissued = Vec::new();
    let previous: Vec<DelegationCertificate> = manager.issued.values().cloned().collect();
    for old in previous {
        let cert = sign_cert(
            provider,
            &manager.keys,
            &old.subject_pk,
            old.role,
            old.scope.clone(),
            Validity::starting(now, lifetime),
            Nonce::random(rng),
        )?;
        manager.issued.insert(old.subject_pk.clone(), cert.clone());
        reissued.push(cert);
    }
    Ok(Rotation { old_public, reissued, retired_at: now })
}

/// Child side of a parent's key rotation.
pub fn accept_parent_rotation(
    child: &mut NodeRecord,
    old_parent: &PublicKey,
    new_parent: &PublicKey,
    cert: DelegationCertificate,
    retired_at: u64,
) {
    child.known_keys.remove(old_parent);
    child.trusted.remove(old_parent);
    child.known_keys.insert(new_parent.clone());
    child.parent = Some(new_parent.clone());
    child.revocations.retired.insert(old_parent.digest(), retired_at);
    if let Some(chain) = child.cert_chain.as_mut() {
        if let Some(last) = chain.last_mut() {
            *last = cert.clone();
        }
    }
    child.cert = Some(cert);
}

/// Parent side of a child manager's key rotation: rekeys the children map
/// and reissues the child's certificate for its new key.
pub fn accept_child_rotation(
    provider: &dyn CryptoProvider,
    parent: &mut NodeRecord,
    old_child: &PublicKey,
    new_child: &PublicKey,
    now: u64,
    lifetime: u64,
    rng: &mut dyn RngCore,
) -> Result<DelegationCertificate> {
    let role = parent.children.remove(old_child).ok_or(Error::NotAuthorized)?;
    let scope = parent
        .issued
        .remove(old_child)
        .map(|c| c.scope)
        .unwrap_or_else(|| parent.cert.as_ref().map(|c| c.scope.clone()).unwrap_or_else(|| {
            ScopeLabel::tenant_root(&parent.tenant.unwrap_or_default())
        }));
    parent.known_keys.remove(old_child);
    parent.revocations.retired.insert(old_child.digest(), now);
    issue_delegation(provider, parent, new_child, role, scope, Validity::starting(now, lifetime), Nonce::random(rng))
}

/// Promotes a child whose upgrade was approved, returning its new manager
/// certificate.
pub fn promote_record(
    provider: &dyn CryptoProvider,
    parent: &mut NodeRecord,
    child_pk: &PublicKey,
    now: u64,
    lifetime: u64,
    nonce: Nonce,
) -> Result<DelegationCertificate> {
    if !parent.approved_upgrades.contains(child_pk) {
        return Err(Error::UpgradeNotApproved);
    }
    let scope = parent
        .issued
        .get(child_pk)
        .map(|c| c.scope.clone())
        .ok_or(Error::NotAuthorized)?;
    let cert = issue_delegation(
        provider,
        parent,
        child_pk,
        Role::Manager,
        scope,
        Validity::starting(now, lifetime),
        nonce,
    )?;
    parent.approved_upgrades.remove(child_pk);
    Ok(cert)
}

/// Child side of a promotion.
pub fn apply_promotion(child: &mut NodeRecord, cert: DelegationCertificate) {
    child.role = cert.role;
    if let Some(chain) = child.cert_chain.as_mut() {
        if let Some(last) = chain.last_mut() {
            *last = cert.clone();
        }
    }
    child.cert = Some(cert);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::MockProvider;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    struct Fixture {
        p: MockProvider,
        rng: ChaCha20Rng,
        nodes: Vec<NodeRecord>,
    }

    impl Fixture {
        fn new(seed: u64) -> Self {
            let p = MockProvider;
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let root = create_root(&p, "root", rng.gen(), &mut rng);
            Fixture { p, rng, nodes: vec![root] }
        }

        /// Admits a new node under `parent` (by index); returns its index.
        fn admit(&mut self, parent: usize, role: Role, full_path: bool) -> usize {
            let keys = self.p.generate(&mut self.rng);
            let mut child = NodeRecord::unaffiliated(&format!("n{}", self.nodes.len()), keys);
            let pk = child.public().clone();
            let nonce = Nonce::random(&mut self.rng);
            let par = &mut self.nodes[parent];
            if par.role == Role::Leaf {
                par.role = Role::Manager;
            }
            let scope = ScopeLabel::tenant_root(&par.tenant.unwrap());
            let cert = issue_delegation(&self.p, par, &pk, role, scope, Validity::starting(0, 100), nonce).unwrap();
            let chain = if full_path { Some(par.cert_chain.clone().unwrap_or_default()) } else { None };
            let (ppk, tenant, depth, salt) = (par.public().clone(), par.tenant.unwrap(), par.depth + 1, par.salt.unwrap());
            accept_membership(&mut child, &ppk, cert, tenant, depth, salt, chain);
            self.nodes.push(child);
            self.nodes.len() - 1
        }

        fn view(&self) -> TreeView<'_> {
            TreeView::new(self.nodes.iter())
        }
    }

    fn random_tree(seed: u64, size: usize) -> Fixture {
        let mut f = Fixture::new(seed);
        let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x5eed);
        let parents: Vec<usize> = (1..size).map(|i| rng.gen_range(0..i)).collect();
        let has_children = |i: usize| parents.contains(&i);
        for (i, &p) in parents.iter().enumerate() {
            let role = if has_children(i + 1) { Role::Manager } else { Role::Leaf };
            f.admit(p, role, true);
        }
        f
    }

    #[test]
    fn root_construction() {
        let f = Fixture::new(1);
        let r = &f.nodes[0];
        assert_eq!(r.role, Role::Root);
        assert!(r.children.is_empty());
        assert!(r.parent.is_none());
        assert_eq!(r.tenant, Some(TenantId(r.node_id)));
        let g = Fixture::new(2);
        assert_ne!(r.tenant, g.nodes[0].tenant);
    }

    #[test]
    fn admit_one_leaf_gives_size_two_depth_one() {
        let mut f = Fixture::new(3);
        let c = f.admit(0, Role::Leaf, false);
        let v = f.view();
        assert_eq!(v.len(), 2);
        assert_eq!(v.depth_of(&f.nodes[c].node_id), 1);
        assert!(v.is_rooted_tree());
        let cert = f.nodes[c].cert.clone().unwrap();
        assert!(cert.verify_signature(&f.p, f.nodes[0].public()));
        assert!(f.nodes[0].children.contains_key(f.nodes[c].public()));
    }

    #[test]
    fn leaf_cannot_issue() {
        let mut f = Fixture::new(4);
        let c = f.admit(0, Role::Leaf, false);
        let other = f.p.generate(&mut f.rng).public;
        let n = Nonce::random(&mut f.rng);
        let scope = ScopeLabel::tenant_root(&f.nodes[0].tenant.unwrap());
        let err = issue_delegation(&f.p, &mut f.nodes[c], &other, Role::Leaf, scope, Validity::starting(0, 1), n);
        assert_eq!(err, Err(Error::NotAManager));
    }

    #[test]
    fn revoked_manager_cannot_issue() {
        let mut f = Fixture::new(5);
        let m = f.admit(0, Role::Manager, false);
        let rev = revoke(&f.p, &f.nodes[0], &f.nodes[m].public().clone(), RevocationReason::Termination, 3, &f.view()).unwrap();
        apply_revocation(&mut f.nodes[m], &rev.notice, true);
        let other = f.p.generate(&mut f.rng).public;
        let n = Nonce::random(&mut f.rng);
        let scope = ScopeLabel::tenant_root(&f.nodes[0].tenant.unwrap());
        let err = issue_delegation(&f.p, &mut f.nodes[m], &other, Role::Leaf, scope, Validity::starting(0, 1), n);
        assert_eq!(err, Err(Error::IssuerRevoked));
    }

    #[test]
    fn chain_depth_one_and_expiry() {
        let mut f = Fixture::new(6);
        let c = f.admit(0, Role::Leaf, true);
        let chain = f.nodes[c].cert_chain.clone().unwrap();
        let anchor = f.nodes[0].public().clone();
        let st = RevocationSet::default();
        assert!(verify_chain(&f.p, &chain, &anchor, 50, &st));
        assert!(!verify_chain(&f.p, &chain, &anchor, 101, &st));
        assert!(!verify_chain(&f.p, &[], &anchor, 50, &st));
    }

    /// Independent re-derivation of a node's chain by walking parent links
    /// in the stored tree and reading the issuer's `issued` table.
    fn oracle_chain(nodes: &[NodeRecord], idx: usize) -> Vec<DelegationCertificate> {
        let by_pk: BTreeMap<&PublicKey, &NodeRecord> = nodes.iter().map(|n| (n.public(), n)).collect();
        let mut out = Vec::new();
        let mut cur = &nodes[idx];
        while let Some(p) = cur.parent.as_ref() {
            let parent = by_pk[p];
            out.push(parent.issued[cur.public()].clone());
            cur = parent;
        }
        out.reverse();
        out
    }

    #[test]
    fn chain_verification_matches_tree_walk_on_random_fifty_node_tree() {
        let f = random_tree(7, 50);
        let anchor = f.nodes[0].public().clone();
        let st = RevocationSet::default();
        for i in 1..f.nodes.len() {
            let stored = f.nodes[i].cert_chain.clone().unwrap();
            let walked = oracle_chain(&f.nodes, i);
            // stored chains carry the role at admission; compare links by issuer/subject
            let pairs = |c: &[DelegationCertificate]| {
                c.iter().map(|x| (x.issuer_pk_digest, x.subject_pk.digest())).collect::<Vec<_>>()
            };
            assert_eq!(pairs(&stored), pairs(&walked));
            assert!(verify_chain(&f.p, &walked, &anchor, 10, &st), "node {i}");
        }
        // spliced chains must fail: graft node j's last link onto node i's prefix
        for i in 1..f.nodes.len() {
            for j in 1..f.nodes.len() {
                let ci = oracle_chain(&f.nodes, i);
                let cj = oracle_chain(&f.nodes, j);
                let mut spliced = ci[..ci.len() - 1].to_vec();
                spliced.push(cj.last().unwrap().clone());
                let structurally_valid = f.nodes[j].parent == f.nodes[i].parent;
                assert_eq!(verify_chain(&f.p, &spliced, &anchor, 10, &st), structurally_valid, "{i} {j}");
            }
        }
    }

    #[test]
    fn revoked_subject_breaks_chain() {
        let mut f = Fixture::new(8);
        let m = f.admit(0, Role::Manager, true);
        let c = f.admit(m, Role::Leaf, true);
        let chain = f.nodes[c].cert_chain.clone().unwrap();
        let anchor = f.nodes[0].public().clone();
        let mut st = RevocationSet::default();
        assert!(verify_chain(&f.p, &chain, &anchor, 1, &st));
        st.revoked.insert(f.nodes[m].node_id);
        assert!(!verify_chain(&f.p, &chain, &anchor, 1, &st));
    }

    #[test]
    fn leaf_intermediate_is_rejected() {
        let mut f = Fixture::new(9);
        let c = f.admit(0, Role::Leaf, true);
        // the leaf signs a cert for some key directly, bypassing issue_delegation
        let other = f.p.generate(&mut f.rng).public;
        let n = Nonce::random(&mut f.rng);
        let scope = ScopeLabel::tenant_root(&f.nodes[0].tenant.unwrap());
        let forged = sign_cert(&f.p, &f.nodes[c].keys, &other, Role::Leaf, scope, Validity::starting(0, 100), n).unwrap();
        let mut chain = f.nodes[c].cert_chain.clone().unwrap();
        chain.push(forged);
        assert!(!verify_chain(&f.p, &chain, f.nodes[0].public(), 1, &RevocationSet::default()));
    }

    #[test]
    fn revoke_leaf_affects_only_leaf() {
        let mut f = Fixture::new(10);
        let c = f.admit(0, Role::Leaf, false);
        let rev = revoke(&f.p, &f.nodes[0], &f.nodes[c].public().clone(), RevocationReason::VoluntaryLeave, 1, &f.view()).unwrap();
        assert_eq!(rev.affected, BTreeSet::from([f.nodes[c].node_id]));
        assert!(f.p.verify(
            f.nodes[0].public(),
            &RevocationNotice::signed_bytes(&rev.notice.subject_pk_digest, 1, RevocationReason::VoluntaryLeave),
            &rev.notice.signature
        ));
    }

    #[test]
    fn revoke_manager_with_three_descendants() {
        let mut f = Fixture::new(11);
        let m = f.admit(0, Role::Manager, false);
        let a = f.admit(m, Role::Manager, false);
        f.admit(m, Role::Leaf, false);
        f.admit(a, Role::Leaf, false);
        f.admit(0, Role::Leaf, false);
        let v = f.view();
        let rev = revoke(&f.p, &f.nodes[0], f.nodes[m].public(), RevocationReason::Termination, 1, &v).unwrap();
        // brute force: nodes whose root path passes through m
        let brute: BTreeSet<Digest> = f
            .nodes
            .iter()
            .filter(|n| v.path_from_root(&n.node_id).contains(&f.nodes[m].node_id))
            .map(|n| n.node_id)
            .collect();
        assert_eq!(brute.len(), 4);
        assert_eq!(rev.affected, brute);
    }

    #[test]
    fn revoke_in_sibling_subtree_is_not_authorized() {
        let mut f = Fixture::new(12);
        let a = f.admit(0, Role::Manager, false);
        let b = f.admit(0, Role::Manager, false);
        let bl = f.admit(b, Role::Leaf, false);
        let err = revoke(&f.p, &f.nodes[a], &f.nodes[bl].public().clone(), RevocationReason::Termination, 1, &f.view());
        assert!(matches!(err, Err(Error::NotAuthorized)));
    }

    #[test]
    fn rotate_root_of_single_node_tree() {
        let mut f = Fixture::new(13);
        let nk = f.p.generate(&mut f.rng);
        let rot = rotate_keys(&f.p, &mut f.nodes[0], nk, 5, 100, &mut f.rng).unwrap();
        assert!(rot.reissued.is_empty());
    }

    #[test]
    fn rotate_manager_with_two_children_leaves_grandchildren_unchanged() {
        let mut f = Fixture::new(14);
        let m = f.admit(0, Role::Manager, false);
        let a = f.admit(m, Role::Manager, false);
        let b = f.admit(m, Role::Leaf, false);
        let g = f.admit(a, Role::Leaf, false);
        let before = f.nodes.clone();
        let nk = f.p.generate(&mut f.rng);
        let Fixture { p, rng, nodes } = &mut f;
        let rot = rotate_keys(p, &mut nodes[m], nk, 20, 100, rng).unwrap();
        assert_eq!(rot.reissued.len(), 2);
        let new_pk = nodes[m].public().clone();
        for cert in &rot.reissued {
            let idx = if &cert.subject_pk == nodes[a].public() { a } else { b };
            assert!(cert.verify_signature(p, &new_pk));
            accept_parent_rotation(&mut nodes[idx], &rot.old_public, &new_pk, cert.clone(), 20);
        }
        let mc = accept_child_rotation(p, &mut nodes[0], &rot.old_public, &new_pk, 20, 100, rng).unwrap();
        nodes[m].cert = Some(mc);
        let changed: BTreeSet<usize> = (0..nodes.len()).filter(|i| nodes[*i] != before[*i]).collect();
        assert_eq!(changed, BTreeSet::from([0, m, a, b]));
        assert_eq!(nodes[g], before[g]);
        assert!(f.view().is_rooted_tree());
        // a certificate issued under the old key now verifies as expired
        let old_cert = before[a].cert.clone().unwrap();
        let chain_old = vec![before[m].cert.clone().unwrap(), old_cert];
        assert!(!verify_chain(&f.p, &chain_old, f.nodes[0].public(), 20, &f.nodes[a].revocations));
        assert!(verify_chain(&f.p, &chain_old, f.nodes[0].public(), 19, &f.nodes[a].revocations));
    }

    #[test]
    fn promotion_requires_approval_and_enables_issuance() {
        let mut f = Fixture::new(15);
        let c = f.admit(0, Role::Leaf, false);
        let pk = f.nodes[c].public().clone();
        let n = Nonce::random(&mut f.rng);
        assert_eq!(
            promote_record(&f.p, &mut f.nodes[0], &pk, 1, 100, n),
            Err(Error::UpgradeNotApproved)
        );
        f.nodes[0].approved_upgrades.insert(pk.clone());
        let cert = promote_record(&f.p, &mut f.nodes[0], &pk, 1, 100, n).unwrap();
        apply_promotion(&mut f.nodes[c], cert);
        assert_eq!(f.nodes[c].role, Role::Manager);
        assert_eq!(f.nodes[0].children[&pk], Role::Manager);
        let g = f.admit(c, Role::Leaf, false);
        assert_eq!(f.nodes[g].depth, 2);
    }

    #[test]
    fn scope_containment_is_segment_wise() {
        let t = TenantId(crate::crypto::hash(b"t"));
        let root = ScopeLabel::tenant_root(&t);
        let storage = ScopeLabel::new(&t, "storage");
        let read = ScopeLabel::new(&t, "storage:read");
        let odd = ScopeLabel::new(&t, "storagex");
        assert!(root.contains(&storage) && root.contains(&read));
        assert!(storage.contains(&read));
        assert!(!storage.contains(&odd));
        assert!(!read.contains(&storage));
        let other = ScopeLabel::tenant_root(&TenantId(crate::crypto::hash(b"u")));
        assert!(!other.contains(&read));
        assert_eq!(ScopeLabel::parse(read.as_str()), Some(read.clone()));
        assert_eq!(ScopeLabel::parse("bogus"), None);
    }

    #[test]
    fn nonce_cache_rejects_duplicates_and_evicts() {
        let mut c = NonceCache::new(2);
        let n = |b| Nonce([b; 16]);
        assert!(c.insert(n(1)));
        assert!(!c.insert(n(1)));
        assert!(c.insert(n(2)));
        assert!(c.insert(n(3)));
        assert!(!c.contains(&n(1)));
        assert_eq!(c.len(), 2);
    }

    #[test]
    fn certificate_codec_round_trip() {
        let mut f = Fixture::new(16);
        let c = f.admit(0, Role::Leaf, false);
        let cert = f.nodes[c].cert.clone().unwrap();
        let back = DelegationCertificate::from_canonical(&cert.to_canonical()).unwrap();
        assert_eq!(back, cert);
        assert!(back.verify_signature(&f.p, f.nodes[0].public()));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn random_trees_keep_invariants(seed in any::<u64>(), size in 1usize..40) {
            let f = random_tree(seed, size);
            let v = f.view();
            prop_assert!(v.is_rooted_tree());
            for n in &f.nodes {
                prop_assert!(n.key_visibility_holds());
                prop_assert!(n.role_invariants_hold());
            }
            let ids: BTreeSet<_> = f.nodes.iter().map(|n| n.node_id).collect();
            prop_assert_eq!(ids.len(), f.nodes.len());
        }

        #[test]
        fn revocation_affected_set_is_exact_subtree(seed in any::<u64>(), size in 2usize..30, pick in any::<prop::sample::Index>()) {
            let f = random_tree(seed, size);
            let v = f.view();
            let subject = &f.nodes[1 + pick.index(f.nodes.len() - 1)];
            let rev = revoke(&f.p, &f.nodes[0], subject.public(), RevocationReason::Termination, 1, &v).unwrap();
            for n in &f.nodes {
                let under = v.path_from_root(&n.node_id).contains(&subject.node_id);
                prop_assert_eq!(rev.affected.contains(&n.node_id), under);
            }
        }
    }
}
