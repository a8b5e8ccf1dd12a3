//! Network adversary wired into the simulator's send and relay paths.
//!
//! The adversary sees every envelope on the wire and can drop, delay,
//! replay, corrupt or inject. It can decrypt or sign only with private keys
//! of nodes it has compromised; anything else is a harness bug and raises
//! [`Error::ModelViolation`].

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::codec::Bytes;
use crate::crypto::{Digest, KeyPair, Nonce, PublicKey, Signature};
use crate::error::{Error, Result};
use crate::messages::{
    Body, ConflictResponse, DecisionRecord, HashProbe, JoinRequest, ProbeDirection, Reason, RevocationMsg, RevocationScope,
    RotationAnnounce, UpgradeForward, UpgradeGrant, Verdict,
};
use crate::messaging::{seal_with_keys, ControlPayload, Envelope, MsgType, TraceId};
use crate::overlay::{NodeAddr, RouteMode};
use crate::protocol::action::{ActionCertProposal, ActionRequest, Endorsement};
use crate::protocol::upgrade::{ManagerAttestation, UpgradeCertificate, UpgradeDecision, UpgradeHint, UpgradeRequest};
use crate::sim::{Directive, NodeKind, World};
use crate::trace::EventKind;
use crate::tree::{sign_cert, NodeRecord, RevocationNotice, RevocationReason, Role, ScopeLabel, Validity};

/// Matches envelopes as they are transmitted. Unset fields match anything;
/// `nth` picks the n-th match (0-based).
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Select {
    pub msg_type: Option<MsgType>,
    pub from: Option<NodeAddr>,
    pub to: Option<NodeAddr>,
    pub nth: usize,
}

impl Select {
    fn matches(&self, from: NodeAddr, to: NodeAddr, t: MsgType) -> bool {
        self.msg_type.is_none_or(|m| m == t) && self.from.is_none_or(|f| f == from) && self.to.is_none_or(|x| x == to)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Forgery {
    /// A join decision signed with a fresh adversary key, sent to `target`.
    Decision { target: NodeAddr },
    /// A delegation certificate for an adversary key that claims `manager`
    /// as issuer, delivered to `target` as an upgrade grant.
    Certificate { target: NodeAddr, manager: NodeAddr },
    /// A revocation notice sent from compromised `from` to `to`.
    RevocationFrom { from: NodeAddr, to: NodeAddr, subject: NodeAddr, scope: RevocationScope },
    /// A malicious leaf crafting arbitrary messages with its own key.
    LeafFuzz { leaf: NodeAddr, runs: usize, seed: u64 },
    /// Every forgery a compromised node's keys allow, aimed at every node
    /// whose key it holds.
    CompromiseProbe { victim: NodeAddr },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum AdversaryAction {
    Eavesdrop,
    Replay { select: Select, delay: u64 },
    Modify { select: Select, offset: usize },
    Drop { select: Select },
    /// Corrupts every envelope relayed through `node`.
    MaliciousRelay { node: NodeAddr, offset: usize },
    Inject(Forgery),
    SybilSpawn { count: usize, target: NodeAddr },
    Compromise { node: NodeAddr },
}

#[derive(Clone, Debug)]
enum Rule {
    Replay { delay: u64 },
    Modify { offset: usize },
    Drop,
}

#[derive(Clone, Debug)]
struct Armed {
    select: Select,
    rule: Rule,
    seen: usize,
    fired: bool,
}

/// What the adversary has achieved, for scenario assertions.
#[derive(Clone, Debug, Default)]
pub struct Adversary {
    /// Public keys the adversary may address. Without this it can only
    /// address keys known to compromised nodes.
    pub knows_all_keys: bool,
    pub eavesdropping: bool,
    held: BTreeMap<Digest, KeyPair>,
    /// Record of each compromised node as of the compromise.
    stolen: BTreeMap<NodeAddr, NodeRecord>,
    rules: Vec<Armed>,
    relays: BTreeMap<NodeAddr, usize>,
    /// Envelopes captured while eavesdropping.
    pub captured: usize,
    /// Captured envelopes the adversary could open, by recipient digest.
    pub decrypted: Vec<Digest>,
    pub sybils: Vec<NodeAddr>,
    pub compromised: BTreeSet<NodeAddr>,
    /// Membership projection of every node taken at compromise time.
    pub baseline: Option<(NodeAddr, crate::checks::Projection)>,
    pub injected: usize,
}

impl Adversary {
    pub fn holds(&self, d: &Digest) -> bool {
        self.held.contains_key(d)
    }

    fn stolen(&self, node: NodeAddr) -> Result<NodeRecord> {
        self.stolen.get(&node).cloned().ok_or_else(|| Error::ModelViolation(format!("node {node} not compromised")))
    }

    /// True when a captured envelope addressed to a non-compromised key was
    /// opened. Cannot happen by construction; asserted by scenarios.
    pub fn broke_confidentiality(&self) -> bool {
        self.decrypted.iter().any(|d| !self.held.contains_key(d))
    }
}

fn flip(env: &mut Envelope, offset: usize) {
    if !env.ciphertext.0.is_empty() {
        let i = offset % env.ciphertext.0.len();
        env.ciphertext.0[i] ^= 0x5a;
    }
}

/// Hook on every honest transmission. Returns the envelope to deliver, if
/// any.
pub(crate) fn intercept(w: &mut World, from: NodeAddr, to: NodeAddr, mut env: Envelope, t: MsgType) -> Option<Envelope> {
    if w.adversary.eavesdropping {
        w.adversary.captured += 1;
        if let Some(k) = w.adversary.held.get(&env.recipient_digest) {
            if w.provider.decrypt(&k.private, &env.ciphertext).is_ok() {
                w.adversary.decrypted.push(env.recipient_digest);
            }
        }
    }
    let mut deliver = true;
    let mut replays = Vec::new();
    for a in w.adversary.rules.iter_mut() {
        if a.fired || !a.select.matches(from, to, t) {
            continue;
        }
        a.seen += 1;
        if a.seen <= a.select.nth {
            continue;
        }
        a.fired = true;
        match a.rule {
            Rule::Drop => deliver = false,
            Rule::Modify { offset } => flip(&mut env, offset),
            Rule::Replay { delay } => replays.push(delay),
        }
    }
    let (f, d) = (w.name(from).to_string(), w.name(to).to_string());
    if !deliver {
        w.log(EventKind::Adversary, &f, &d, Some(t), Some(env.trace_id), Some("drop".into()));
        return None;
    }
    for delay in replays {
        w.log(EventKind::Adversary, &f, &d, Some(t), Some(env.trace_id), Some(format!("replay after {delay}")));
        w.inject(to, env.clone(), t, delay);
    }
    Some(env)
}

/// Hook on every relay hop.
pub(crate) fn relay_tamper(w: &mut World, at: NodeAddr, mut env: Envelope, t: MsgType) -> Option<Envelope> {
    if let Some(offset) = w.adversary.relays.get(&at).copied() {
        flip(&mut env, offset);
        let name = w.name(at).to_string();
        w.log(EventKind::Adversary, &name, "-", Some(t), Some(env.trace_id), Some("relay tamper".into()));
    }
    Some(env)
}

pub(crate) fn apply(w: &mut World, a: AdversaryAction) -> Result<()> {
    let arm = |w: &mut World, select: Select, rule: Rule| {
        w.adversary.rules.push(Armed { select, rule, seen: 0, fired: false });
    };
    match a {
        AdversaryAction::Eavesdrop => {
            w.adversary.eavesdropping = true;
            w.log(EventKind::Adversary, "-", "-", None, None, Some("eavesdrop on".into()));
        }
        AdversaryAction::Replay { select, delay } => arm(w, select, Rule::Replay { delay }),
        AdversaryAction::Modify { select, offset } => arm(w, select, Rule::Modify { offset }),
        AdversaryAction::Drop { select } => arm(w, select, Rule::Drop),
        AdversaryAction::MaliciousRelay { node, offset } => {
            w.adversary.relays.insert(node, offset);
        }
        AdversaryAction::Compromise { node } => compromise(w, node),
        AdversaryAction::SybilSpawn { count, target } => sybils(w, count, target)?,
        AdversaryAction::Inject(f) => forge(w, f)?,
    }
    Ok(())
}

fn compromise(w: &mut World, node: NodeAddr) {
    let rec = w.nodes[node].record.clone();
    w.adversary.held.insert(rec.node_id, rec.keys.clone());
    w.adversary.stolen.insert(node, rec);
    w.adversary.compromised.insert(node);
    w.nodes[node].compromised = true;
    if w.adversary.baseline.is_none() {
        w.adversary.baseline = Some((node, crate::checks::project(w)));
    }
    let name = w.name(node).to_string();
    w.log(EventKind::Adversary, &name, "-", None, None, Some("compromised".into()));
}

fn sybils(w: &mut World, count: usize, target: NodeAddr) -> Result<()> {
    let base = w.adversary.sybils.len();
    let tpk = w.nodes[target].record.public().clone();
    for i in 0..count {
        let name = format!("sybil{}", base + i);
        let a = w.add_node(&name, NodeKind::Sybil);
        // a sybil can learn a public key but never an invitation
        w.nodes[a].record.trust(tpk.clone());
        w.adversary.sybils.push(a);
        w.schedule(w.now + 1, Directive::Join { candidate: a, manager: target, mode: RouteMode::DirectIp, info: b"sybil".to_vec() });
    }
    let tn = w.name(target).to_string();
    w.log(EventKind::Adversary, "-", &tn, None, None, Some(format!("spawned {count} sybils")));
    Ok(())
}

/// Seals `body` from `keys` to `to` and puts it on the wire from `from`.
fn emit(w: &mut World, from: NodeAddr, to: NodeAddr, keys: &KeyPair, body: Body, signed: bool) -> Result<()> {
    if !w.adversary.knows_all_keys {
        let pk = w.nodes[to].record.public();
        let reachable = w.adversary.compromised.iter().any(|c| w.nodes[*c].record.knows(pk));
        if !reachable {
            return Err(Error::ModelViolation(format!("public key of {} unknown to adversary", w.name(to))));
        }
    }
    let p = w.provider.clone();
    let rpk = w.nodes[to].record.public().clone();
    let t = body.msg_type();
    let payload = ControlPayload::new(&keys.public, &body, w.now, &mut w.rng);
    let trace = TraceId::random(&mut w.rng);
    let env = seal_with_keys(p.as_ref(), &mut w.rng, keys, &rpk, &payload, signed, trace)?;
    w.adversary.injected += 1;
    let (f, d) = (w.name(from).to_string(), w.name(to).to_string());
    w.log(EventKind::Adversary, &f, &d, Some(t), Some(trace), Some(format!("inject {}", body.name())));
    w.put_on_wire(from, to, env, t, RouteMode::DirectIp);
    Ok(())
}

fn fresh_key(w: &mut World) -> KeyPair {
    let k = w.fresh_keys();
    w.adversary.held.insert(k.public.digest(), k.clone());
    k
}

fn forge(w: &mut World, f: Forgery) -> Result<()> {
    let p = w.provider.clone();
    match f {
        Forgery::Decision { target } => {
            let k = fresh_key(w);
            let h = crate::crypto::hash(b"forged");
            let bytes = DecisionRecord::signed_bytes(&h, Verdict::Approve, w.now, None);
            let rec = DecisionRecord { h, decision: Verdict::Approve, t: w.now, reason: None, signer_digest: k.public.digest(), signature: p.sign(&k.private, &bytes)? };
            emit(w, target, target, &k, Body::JoinDecision(rec), true)
        }
        Forgery::Certificate { target, manager } => {
            let k = fresh_key(w);
            let mpk = w.nodes[manager].record.public().clone();
            let tpk = w.nodes[target].record.public().clone();
            let mut cert = sign_cert(p.as_ref(), &k, &tpk, Role::Manager, forged_scope(w, manager), Validity::starting(w.now, 100), Nonce::random(&mut w.rng))?;
            cert.issuer_pk_digest = mpk.digest();
            let lh = w.nodes[target].record.leaf_hash().unwrap_or_default();
            let uc = UpgradeCertificate { leaf_hash: lh, new_role: Role::Manager, t: w.now, nonce: cert.nonce, signature: p.sign(&k.private, b"forged")? };
            // the envelope claims the manager as sender but carries the adversary's signature
            let body = Body::UpgradeGrant(UpgradeGrant { cert: uc, delegation: cert });
            emit_as(w, target, &k, &mpk, body)
        }
        Forgery::RevocationFrom { from, to, subject, scope } => {
            let k = w.adversary.stolen(from)?.keys;
            let sd = w.nodes[subject].record.node_id;
            let bytes = RevocationNotice::signed_bytes(&sd, w.now, RevocationReason::Compromise);
            let notice = RevocationNotice { subject_pk_digest: sd, issued_at: w.now, reason: RevocationReason::Compromise, signature: p.sign(&k.private, &bytes)? };
            emit(w, from, to, &k, Body::Revocation(RevocationMsg { notice, scope, in_subject_subtree: true }), true)
        }
        Forgery::LeafFuzz { leaf, runs, seed } => leaf_fuzz(w, leaf, runs, seed),
        Forgery::CompromiseProbe { victim } => compromise_probe(w, victim),
    }
}

fn forged_scope(w: &World, manager: NodeAddr) -> ScopeLabel {
    ScopeLabel::tenant_root(&w.nodes[manager].record.tenant.unwrap_or_default())
}

/// Seals a body whose payload names `claimed` as sender while the
/// signature comes from `keys`.
fn emit_as(w: &mut World, to: NodeAddr, keys: &KeyPair, claimed: &PublicKey, body: Body) -> Result<()> {
    let p = w.provider.clone();
    let rpk = w.nodes[to].record.public().clone();
    let t = body.msg_type();
    let mut payload = ControlPayload::new(&keys.public, &body, w.now, &mut w.rng);
    payload.sender_digest = claimed.digest();
    let trace = TraceId::random(&mut w.rng);
    let mut env = seal_with_keys(p.as_ref(), &mut w.rng, keys, &rpk, &payload, true, trace)?;
    // rewrap so the signer hint also names the claimed sender
    let sig = p.sign(&keys.private, &crate::codec::Canonical::to_canonical(&payload))?;
    let forged = Signature { signer_hint: claimed.digest(), bytes: sig.bytes };
    let signed = SignedLike { payload: Bytes(crate::codec::Canonical::to_canonical(&payload)), signature: forged };
    env.ciphertext = p.encrypt(&rpk, &crate::codec::Canonical::to_canonical(&signed), &mut w.rng)?;
    w.adversary.injected += 1;
    let d = w.name(to).to_string();
    w.log(EventKind::Adversary, "-", &d, Some(t), Some(trace), Some(format!("inject {} as {}", body.name(), claimed.digest().short())));
    w.put_on_wire(to, to, env, t, RouteMode::DirectIp);
    Ok(())
}

/// Same layout as the signed-envelope plaintext.
#[derive(Clone, Debug, PartialEq, Eq)]
struct SignedLike {
    payload: Bytes,
    signature: Signature,
}
crate::canonical_struct!(SignedLike { payload, signature });

/// Bodies a leaf can build with its own key and public knowledge.
fn leaf_bodies(w: &mut World, leaf: NodeAddr, rng: &mut ChaCha20Rng) -> Result<Vec<Body>> {
    let p = w.provider.clone();
    let rec = w.adversary.stolen(leaf)?;
    let k = rec.keys.clone();
    let lh = rec.leaf_hash().unwrap_or_default();
    let nonce = Nonce(rng.gen());
    let t = w.now;
    let mut req = UpgradeRequest {
        leaf_hash: lh,
        desired_role: Role::Manager,
        t,
        nonce,
        leaf_depth: rec.depth,
        p0_manager_children: 0,
        signature: Signature { signer_hint: rec.node_id, bytes: vec![] },
    };
    req.signature = p.sign(&k.private, &req.signed_bytes())?;
    let att = ManagerAttestation::create(p.as_ref(), &rec, lh, nonce, t)?;
    let approve = UpgradeDecision::sign(p.as_ref(), &rec, lh, nonce, true, None)?;
    let mut self_cert = sign_cert(p.as_ref(), &k, rec.public(), Role::Manager, forged_scope(w, leaf), Validity::starting(t, 100), nonce)?;
    if let Some(parent) = &rec.parent {
        self_cert.issuer_pk_digest = parent.digest();
    }
    let uc_bytes = UpgradeCertificate::signed_bytes(&lh, Role::Manager, t, &nonce);
    let uc = UpgradeCertificate { leaf_hash: lh, new_role: Role::Manager, t, nonce, signature: p.sign(&k.private, &uc_bytes)? };
    let scope = forged_scope(w, leaf);
    let proposal = ActionCertProposal::sign(p.as_ref(), &rec, lh, scope.clone(), t, nonce)?;
    let endorse_bytes = Endorsement::signed_bytes(Role::Manager, t, &nonce);
    let endorsement = Endorsement { endorsed_role: Role::Manager, t, nonce, signature: p.sign(&k.private, &endorse_bytes)? };
    let h = crate::crypto::hash(&rng.gen::<[u8; 32]>());
    let dec_bytes = DecisionRecord::signed_bytes(&h, Verdict::Approve, t, None);
    let decision = DecisionRecord { h, decision: Verdict::Approve, t, reason: None, signer_digest: rec.node_id, signature: p.sign(&k.private, &dec_bytes)? };
    let mut bodies = vec![
        Body::UpgradeHint(UpgradeHint { leaf_hash: lh, desired_role: Role::Manager }),
        Body::UpgradeForward(UpgradeForward { request: req.clone(), attestation: att.clone(), flags: vec![] }),
        Body::UpgradeDecision(approve),
        Body::UpgradeGrant(UpgradeGrant { cert: uc, delegation: self_cert }),
        Body::ActionRequest(ActionRequest { scope, nonce }),
        Body::ActionForward(crate::messages::ActionForward { proposal, endorsements: vec![endorsement] }),
        Body::JoinDecision(decision),
        Body::HashProbe(HashProbe { h, direction: ProbeDirection::Up }),
        Body::ConflictResponse(ConflictResponse { h, conflict: false }),
        Body::JoinRequest(JoinRequest { join_info: Bytes(b"fuzz".to_vec()), candidate_pk: rec.public().clone(), nonce }),
        Body::RotationAnnounce(RotationAnnounce { new_pk: rec.public().clone(), cert: None, retired_at: t }),
    ];
    // random tweaks to fields the parent checks
    for b in bodies.iter_mut() {
        if let Body::UpgradeForward(f) = b {
            if rng.gen_bool(0.5) {
                f.request.p0_manager_children = rng.gen_range(0..4);
            }
            if rng.gen_bool(0.3) {
                f.flags.push(crate::protocol::upgrade::PolicyFlag { layer: rec.node_id, approve: true, reason: None });
            }
        }
    }
    Ok(bodies)
}

fn leaf_fuzz(w: &mut World, leaf: NodeAddr, runs: usize, seed: u64) -> Result<()> {
    if !w.adversary.compromised.contains(&leaf) {
        compromise(w, leaf);
    }
    let rec = w.adversary.stolen(leaf)?;
    let k = rec.keys.clone();
    let parent = rec.parent.clone().ok_or(Error::NoParent)?;
    let p0 = w.addr_of(&parent, leaf).ok_or(Error::NoParent)?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    for _ in 0..runs {
        let bodies = leaf_bodies(w, leaf, &mut rng)?;
        let body = bodies[rng.gen_range(0..bodies.len())].clone();
        // to the parent, or to itself pretending to be the parent
        if rng.gen_bool(0.75) {
            let signed = rng.gen_bool(0.9);
            emit(w, leaf, p0, &k, body, signed)?;
        } else {
            emit_as(w, leaf, &k, &parent, body)?;
        }
    }
    Ok(())
}

/// Every forgery the victim's keys allow, sent to every node whose key the
/// victim holds.
fn compromise_probe(w: &mut World, victim: NodeAddr) -> Result<()> {
    if !w.adversary.compromised.contains(&victim) {
        compromise(w, victim);
    }
    let p = w.provider.clone();
    let rec = w.adversary.stolen(victim)?;
    let k = rec.keys.clone();
    let t = w.now;
    let mut targets: Vec<NodeAddr> = rec.known_keys.iter().filter_map(|pk| w.addr_of(pk, victim)).collect();
    targets.sort();
    targets.dedup();
    for to in targets {
        let to_pk = w.nodes[to].record.public().clone();
        let is_parent = rec.parent.as_ref() == Some(&to_pk);
        let mut bodies = Vec::new();
        // revoke the peer, both up and down
        let sd = to_pk.digest();
        let bytes = RevocationNotice::signed_bytes(&sd, t, RevocationReason::Compromise);
        let notice = RevocationNotice { subject_pk_digest: sd, issued_at: t, reason: RevocationReason::Compromise, signature: p.sign(&k.private, &bytes)? };
        for scope in [RevocationScope::Subtree, RevocationScope::ToRoot, RevocationScope::TenantWide] {
            bodies.push(Body::Revocation(RevocationMsg { notice: notice.clone(), scope, in_subject_subtree: true }));
        }
        // Toward children only: a rotation announced to the parent is the
        // victim's own authorized key change.
        if !is_parent {
            let nk = fresh_key(w);
            let cert = sign_cert(p.as_ref(), &nk, &to_pk, Role::Manager, forged_scope(w, victim), Validity::starting(t, 100), Nonce::random(&mut w.rng))?;
            bodies.push(Body::RotationAnnounce(RotationAnnounce { new_pk: nk.public.clone(), cert: Some(cert), retired_at: t }));
            let lh = w.nodes[to].record.leaf_hash().unwrap_or_default();
            let n = Nonce::random(&mut w.rng);
            let mc = sign_cert(p.as_ref(), &k, &to_pk, Role::Manager, forged_scope(w, victim), Validity::starting(t, 100), n)?;
            let uc = UpgradeCertificate { leaf_hash: lh, new_role: Role::Manager, t, nonce: n, signature: p.sign(&k.private, &UpgradeCertificate::signed_bytes(&lh, Role::Manager, t, &n))? };
            bodies.push(Body::UpgradeGrant(UpgradeGrant { cert: uc, delegation: mc }));
        }
        let h = crate::crypto::hash(b"probe");
        let db = DecisionRecord::signed_bytes(&h, Verdict::Reject, t, Some(Reason::Conflict));
        bodies.push(Body::JoinDecision(DecisionRecord { h, decision: Verdict::Reject, t, reason: Some(Reason::Conflict), signer_digest: rec.node_id, signature: p.sign(&k.private, &db)? }));
        for b in bodies {
            emit(w, victim, to, &k, b, true)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn select_matching_and_nth() {
        let s = Select { msg_type: Some(MsgType::JoinReq), from: None, to: Some(3), nth: 1 };
        assert!(s.matches(0, 3, MsgType::JoinReq));
        assert!(!s.matches(0, 2, MsgType::JoinReq));
        assert!(!s.matches(0, 3, MsgType::HashProbe));
    }

    #[test]
    fn flip_changes_one_byte() {
        let mut e = Envelope {
            recipient_digest: Digest::default(),
            kind: crate::messaging::EnvelopeKind::Plain,
            trace_id: TraceId(1),
            ciphertext: crate::crypto::Ciphertext(vec![0; 8]),
        };
        flip(&mut e, 11);
        assert_eq!(e.ciphertext.0.iter().filter(|b| **b != 0).count(), 1);
        assert_eq!(e.ciphertext.0[3], 0x5a);
    }
}
