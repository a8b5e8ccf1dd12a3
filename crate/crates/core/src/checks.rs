//! Post-run scans over a finished world: containment diffs, privacy and
//! tenant isolation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use crate::crypto::{Digest, PublicKey};
use crate::messaging::Envelope;
use crate::overlay::NodeAddr;
use crate::sim::{NodeKind, World};
use crate::tenancy::{check_bridge_access, BridgeAccess};
use crate::tree::{Role, ScopeLabel};

/// Membership-relevant state of one node.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NodeView {
    pub id: Digest,
    pub parent: Option<Digest>,
    pub children: BTreeSet<Digest>,
    pub role: Role,
    pub revoked: bool,
    pub cert: Option<Digest>,
}

/// Snapshot of every node, keyed by name.
pub type Projection = BTreeMap<String, NodeView>;

pub fn project(w: &World) -> Projection {
    w.nodes
        .iter()
        .map(|n| {
            let r = &n.record;
            let view = NodeView {
                id: r.node_id,
                parent: r.parent.as_ref().map(|p| p.digest()),
                children: r.children.keys().map(|k| k.digest()).collect(),
                role: r.role,
                revoked: r.revoked,
                cert: r.cert.as_ref().map(|c| c.digest()),
            };
            (w.name(n.addr).to_string(), view)
        })
        .collect()
}

/// Names whose projection differs between two snapshots. Nodes only present
/// in `after` are included.
pub fn diff(before: &Projection, after: &Projection) -> Vec<String> {
    after.iter().filter(|(k, v)| before.get(*k) != Some(v)).map(|(k, _)| k.clone()).collect()
}

/// `name` and all its descendants according to `p`.
pub fn subtree_names(p: &Projection, name: &str) -> BTreeSet<String> {
    let by_id: BTreeMap<Digest, &str> = p.iter().map(|(k, v)| (v.id, k.as_str())).collect();
    let mut out = BTreeSet::new();
    let mut stack = vec![name.to_string()];
    while let Some(n) = stack.pop() {
        if !out.insert(n.clone()) {
            continue;
        }
        if let Some(v) = p.get(&n) {
            stack.extend(v.children.iter().filter_map(|c| by_id.get(c)).map(|s| s.to_string()));
        }
    }
    out
}

/// Nodes a key rotation of `name` may touch: the manager, its parent and
/// its direct children.
pub fn rotation_scope(p: &Projection, name: &str) -> BTreeSet<String> {
    let by_id: BTreeMap<Digest, &str> = p.iter().map(|(k, v)| (v.id, k.as_str())).collect();
    let mut out = BTreeSet::from([name.to_string()]);
    if let Some(v) = p.get(name) {
        out.extend(v.parent.iter().filter_map(|d| by_id.get(d)).map(|s| s.to_string()));
        out.extend(v.children.iter().filter_map(|d| by_id.get(d)).map(|s| s.to_string()));
    }
    out
}

/// Nodes revoking `name` may touch: its subtree and its parent.
pub fn revocation_scope(p: &Projection, name: &str) -> BTreeSet<String> {
    let mut out = subtree_names(p, name);
    if let Some(parent) = p.get(name).and_then(|v| v.parent) {
        out.extend(p.iter().filter(|(_, v)| v.id == parent).map(|(k, _)| k.clone()));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContainmentReport {
    pub label: String,
    pub allowed: BTreeSet<String>,
    pub changed: Vec<String>,
    pub outside: Vec<String>,
}

impl ContainmentReport {
    pub fn holds(&self) -> bool {
        self.outside.is_empty()
    }

    pub fn render(&self) -> String {
        let mut s = format!("containment {}: {} changed, {} outside\n", self.label, self.changed.len(), self.outside.len());
        for n in &self.changed {
            let tag = if self.allowed.contains(n) { "inside" } else { "OUTSIDE" };
            let _ = writeln!(s, "  {tag} {n}");
        }
        s
    }
}

pub fn containment(label: &str, before: &Projection, after: &Projection, allowed: BTreeSet<String>) -> ContainmentReport {
    let changed = diff(before, after);
    let outside = changed.iter().filter(|n| !allowed.contains(*n)).cloned().collect();
    ContainmentReport { label: label.to_string(), allowed, changed, outside }
}

/// Containment of the adversary's effects between the snapshot taken when
/// the first node was compromised and `after`.
pub fn compromise_containment(w: &World, after: &Projection) -> Option<ContainmentReport> {
    let (victim, before) = w.adversary.baseline.as_ref()?;
    let name = w.name(*victim);
    let allowed = subtree_names(before, name);
    Some(containment(&format!("compromise {name}"), before, after, allowed))
}

fn find(hay: &[u8], needle: &[u8]) -> bool {
    !needle.is_empty() && hay.windows(needle.len()).any(|win| win == needle)
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PrivacyReport {
    pub envelopes: usize,
    /// Envelopes whose ciphertext could be opened with archived keys.
    pub opened: usize,
    pub leaks: Vec<String>,
    /// Member identities (raw keys or key digests) seen by storage nodes.
    pub storage_exposures: usize,
}

impl PrivacyReport {
    pub fn holds(&self) -> bool {
        self.leaks.is_empty() && self.storage_exposures == 0
    }
}

/// Scans every envelope on the wire for raw identity keys.
///
/// A raw key may appear only inside a ciphertext, and only when the
/// recipient legitimately held that key at some point or the key belongs to
/// the sender. Storage nodes must see neither raw keys nor key digests of
/// any tenant member.
pub fn privacy_scan(w: &World) -> PrivacyReport {
    let p = w.provider.as_ref();
    let identities: Vec<(Digest, PublicKey, NodeAddr)> =
        w.key_owner.iter().map(|(d, a)| (*d, w.key_archive[d].public.clone(), *a)).collect();
    let members: Vec<&(Digest, PublicKey, NodeAddr)> =
        identities.iter().filter(|(_, _, a)| w.nodes[*a].kind == NodeKind::Member).collect();
    let mut r = PrivacyReport::default();
    for rec in &w.wire {
        r.envelopes += 1;
        for (_, pk, _) in &identities {
            if find(&rec.bytes, pk.as_bytes()) {
                r.leaks.push(format!("tick {}: raw key in wire bytes {} -> {}", rec.tick, w.name(rec.from), w.name(rec.to)));
            }
        }
        let Ok(env) = Envelope::from_wire(&rec.bytes) else { continue };
        let Some(keys) = w.key_archive.get(&env.recipient_digest) else { continue };
        let Ok(plain) = p.decrypt(&keys.private, &env.ciphertext) else { continue };
        r.opened += 1;
        let to = &w.nodes[rec.to];
        for (d, pk, owner) in &identities {
            if !find(&plain, pk.as_bytes()) {
                continue;
            }
            let legit = *owner == rec.to || *owner == rec.from || to.state.ever_known.contains(pk);
            if !legit {
                r.leaks.push(format!(
                    "tick {}: key {} of {} disclosed to {} in {:?}",
                    rec.tick,
                    d.short(),
                    w.name(*owner),
                    w.name(rec.to),
                    rec.msg_type
                ));
            }
        }
        if to.kind == NodeKind::Storage {
            for (d, pk, _) in &members {
                if find(&plain, pk.as_bytes()) || find(&plain, d.as_bytes()) {
                    r.storage_exposures += 1;
                }
            }
        }
    }
    r
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Attempt {
    pub op: &'static str,
    pub actor: String,
    pub target: String,
    /// `Ok` if the operation succeeded, otherwise the failure code.
    pub result: Result<(), String>,
    /// Whether success is legitimate (a bridge covers it).
    pub allowed: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IsolationReport {
    pub attempts: Vec<Attempt>,
}

impl IsolationReport {
    pub fn violations(&self) -> Vec<&Attempt> {
        self.attempts.iter().filter(|a| a.result.is_ok() != a.allowed).collect()
    }

    pub fn holds(&self) -> bool {
        self.violations().is_empty()
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for a in &self.attempts {
            let res = match &a.result {
                Ok(()) => "ok".to_string(),
                Err(e) => e.clone(),
            };
            let flag = if a.result.is_ok() != a.allowed { " VIOLATION" } else { "" };
            let _ = writeln!(s, "{} {} -> {}: {res}{flag}", a.op, a.actor, a.target);
        }
        let _ = writeln!(s, "attempts {} violations {}", self.attempts.len(), self.violations().len());
        s
    }
}

/// Attempts every cross-tenant operation (join, decrypt, verify,
/// enumerate) from every node of each tenant against every other tenant.
/// Keys learned by explicit disclosure from their holder do not count as
/// enumeration.
/// Bridges are exercised too: a bridged node's access within the bridge
/// scope must succeed, anything wider or presented by anyone else must not.
pub fn isolation_check(w: &World) -> IsolationReport {
    let p = w.provider.as_ref();
    let mut rep = IsolationReport::default();
    let affiliated = |t: usize| -> Vec<NodeAddr> {
        let id = w.tenants[t].id;
        w.nodes.iter().filter(|n| n.record.tenant == Some(id)).map(|n| n.addr).collect()
    };
    for ti in 0..w.tenants.len() {
        let targets = affiliated(ti);
        let target_keys: BTreeMap<PublicKey, NodeAddr> =
            targets.iter().map(|a| (w.nodes[*a].record.public().clone(), *a)).collect();
        let inbox: Vec<&crate::sim::WireRecord> = w
            .wire
            .iter()
            .filter(|r| w.key_owner.get(&Envelope::from_wire(&r.bytes).map(|e| e.recipient_digest).unwrap_or_default()).is_some_and(|a| targets.contains(a)))
            .collect();
        for tj in (0..w.tenants.len()).filter(|t| *t != ti) {
            for f in affiliated(tj) {
                let fr = &w.nodes[f].record;
                let actor = fr.name.clone();
                for m in &targets {
                    let mr = &w.nodes[*m].record;
                    if mr.role.can_issue() {
                        let result = if !fr.knows(mr.public()) {
                            Err(crate::Error::KeyNotVisible.code().to_string())
                        } else if !w.nodes[*m].state.invited.contains(&fr.node_id) {
                            Err(crate::Error::NotAuthorized.code().to_string())
                        } else {
                            Ok(())
                        };
                        rep.attempts.push(Attempt { op: "join", actor: actor.clone(), target: mr.name.clone(), result, allowed: false });
                    }
                    if mr.cert.is_some() {
                        let own_root = w.nodes[w.tenants[tj].root].record.public();
                        let chain = w.cert_chain(*m);
                        let accepted = crate::tree::verify_chain(p, &chain, own_root, w.now, &fr.revocations);
                        let result = if accepted { Ok(()) } else { Err(crate::Error::SignatureInvalid.code().to_string()) };
                        rep.attempts.push(Attempt { op: "verify", actor: actor.clone(), target: mr.name.clone(), result, allowed: false });
                    }
                }
                for r in &inbox {
                    let Ok(env) = Envelope::from_wire(&r.bytes) else { continue };
                    let result = match p.decrypt(&fr.keys.private, &env.ciphertext) {
                        Ok(_) => Ok(()),
                        Err(e) => Err(e.code().to_string()),
                    };
                    rep.attempts.push(Attempt {
                        op: "decrypt",
                        actor: actor.clone(),
                        target: format!("{}@{}", w.name(r.to), r.tick),
                        result,
                        allowed: false,
                    });
                }
                let bridged_issuers: BTreeSet<Digest> = w
                    .registry
                    .bridges
                    .iter()
                    .filter(|b| &b.subject_pk == fr.public() && b.issuer_tenant == w.tenants[ti].id)
                    .map(|b| b.issuer_digest)
                    .collect();
                for k in &fr.known_keys {
                    if let Some(m) = target_keys.get(k) {
                        let allowed = bridged_issuers.contains(&k.digest()) || w.disclosed.contains(&(k.digest(), f));
                        rep.attempts.push(Attempt { op: "enumerate", actor: actor.clone(), target: w.name(*m).to_string(), result: Ok(()), allowed });
                    }
                }
                if fr.known_keys.iter().all(|k| !target_keys.contains_key(k)) {
                    rep.attempts.push(Attempt {
                        op: "enumerate",
                        actor: actor.clone(),
                        target: w.tenants[ti].name.clone(),
                        result: Err(crate::Error::KeyNotVisible.code().to_string()),
                        allowed: false,
                    });
                }
            }
        }
    }
    for b in &w.registry.bridges {
        let Some(ti) = w.tenant_index(&b.issuer_tenant) else { continue };
        let Some(issuer) = w.nodes.iter().find(|n| n.record.node_id == b.issuer_digest) else { continue };
        let wider = ScopeLabel::new(&b.issuer_tenant, "admin");
        for n in &w.nodes {
            if n.record.tenant == Some(b.issuer_tenant) {
                continue;
            }
            let presenter = n.record.public();
            for (requested, label) in [(b.scope.clone(), b.scope.as_str().to_string()), (wider.clone(), wider.as_str().to_string())] {
                let access = BridgeAccess { bridge: b.clone(), requested };
                let result = check_bridge_access(p, &issuer.record, presenter, &access, w.now).map_err(|r| r.as_str().to_string());
                let allowed = presenter == &b.subject_pk && b.scope.contains(&access.requested) && b.validity.contains(w.now);
                rep.attempts.push(Attempt {
                    op: "bridge",
                    actor: n.record.name.clone(),
                    target: format!("{}:{label}", w.tenants[ti].name),
                    result,
                    allowed,
                });
            }
        }
    }
    rep
}
