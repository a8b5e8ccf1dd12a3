//! Deterministic discrete-event simulation of tenants sharing one overlay.
//!
//! Events run in `(tick, insertion order)`. Handlers are state transitions
//! on one node that may emit further sealed envelopes; every envelope goes
//! through [`World::transmit`], where the adversary can interpose.

mod action;
mod join;
mod membership;
mod upgrade;
mod validation;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::adversary::Adversary;
use crate::crypto::{CryptoProvider, Digest, KeyPair, Nonce, PublicKey};
use crate::error::{Error, Result};
use crate::gateway::{GatewayProof, CHALLENGE_LEN};
use crate::messages::{Body, Reason};
use crate::messaging::{seal_with_keys, unseal_with_keys, ControlPayload, Envelope, MsgType, Opened, TraceId};
use crate::overlay::{route, NodeAddr, RouteContext, RouteMode};
use crate::protocol::action::{ActionCertificate, PendingProposal};
use crate::protocol::join::{ConflictResponse, DecisionRecord, PendingJoin, ProbeDirection};
use crate::protocol::upgrade::{PendingUpgrade, Policy, PolicyHook};
use crate::tenancy::{CrossTenantDelegation, TenantRegistry};
use crate::trace::{EventKind, Trace, TraceLine};
use crate::tree::{
    accept_membership, create_root, issue_delegation, DelegationModel, NodeRecord, Role, ScopeLabel, TenantId, TreeView,
    Validity,
};

pub use crate::overlay::NodeAddr as Addr;

/// Timing and sizing knobs. Defaults match the documented protocol choices.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub max_ticks: u64,
    pub hop_latency: u64,
    pub cert_lifetime: u64,
    pub action_lifetime: u64,
    pub proof_validity: u64,
    pub challenge_timeout: u64,
    pub replay_window: u64,
    pub decision_skew: u64,
    pub fanout: usize,
    pub delivery_timeout: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            max_ticks: 100_000,
            hop_latency: 1,
            cert_lifetime: crate::tree::DEFAULT_CERT_LIFETIME,
            action_lifetime: 256,
            proof_validity: 32,
            challenge_timeout: 32,
            replay_window: 128,
            decision_skew: 8,
            fanout: 2,
            delivery_timeout: 16,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NodeKind {
    Member,
    Gateway,
    Storage,
    Validator,
    Sybil,
}

impl NodeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            NodeKind::Member => "member",
            NodeKind::Gateway => "gateway",
            NodeKind::Storage => "storage",
            NodeKind::Validator => "validator",
            NodeKind::Sybil => "sybil",
        }
    }
}

/// Aggregation of conflict answers at one manager.
#[derive(Clone, Debug)]
pub(crate) struct Aggregation {
    pub expected: BTreeSet<PublicKey>,
    pub responses: Vec<ConflictResponse>,
}

#[derive(Clone, Debug)]
pub(crate) struct PendingJoinAt {
    pub join: PendingJoin,
    pub candidate: NodeAddr,
}

/// Where a validation verdict must be returned.
#[derive(Clone, Debug)]
pub(crate) struct ReplyTo {
    pub addr: NodeAddr,
    pub pk: PublicKey,
    pub trace: TraceId,
    pub cert_hash: Digest,
}

#[derive(Clone, Debug)]
pub(crate) struct GatewayPending {
    pub origin: ReplyTo,
    pub cert_hash: Digest,
    pub storage_id: Option<Digest>,
}

#[derive(Clone, Debug)]
pub(crate) struct ValidatorPending {
    pub cert_hash: Digest,
    pub requester: String,
}

#[derive(Clone, Debug)]
pub(crate) struct StorageSession {
    pub session_pk: PublicKey,
    pub session_addr: NodeAddr,
    pub cert_hash: Digest,
    pub proof: Option<GatewayProof>,
    pub trace: TraceId,
    pub done: bool,
}

#[derive(Clone, Debug)]
pub(crate) struct ClientSession {
    pub keys: KeyPair,
    pub session_nonce: Nonce,
    pub storage: NodeAddr,
    pub storage_pk: PublicKey,
    pub challenge: Option<[u8; CHALLENGE_LEN]>,
    pub awaiting: bool,
    /// Set for impersonation attempts that never receive the challenge.
    pub guess: bool,
}

/// Per-node protocol state outside the membership record.
#[derive(Clone, Debug, Default)]
pub struct NodeState {
    pub(crate) seen_payloads: crate::tree::NonceCache,
    pub(crate) probes_seen: BTreeSet<(TraceId, Digest, bool)>,
    pub(crate) aggregations: BTreeMap<(TraceId, Digest), Aggregation>,
    pub(crate) pending_joins: BTreeMap<(Digest, Nonce), PendingJoinAt>,
    pub(crate) in_flight: BTreeMap<Digest, u64>,
    pub(crate) join_attempts: BTreeMap<Nonce, NodeAddr>,
    pub(crate) recent_revocations: BTreeMap<Digest, u64>,
    /// Candidate digests a manager has invited out of band.
    pub invited: BTreeSet<Digest>,
    /// Join decisions logged locally, one per run.
    pub decisions: Vec<(TraceId, DecisionRecord)>,
    pub(crate) consented_upgrades: BTreeSet<PublicKey>,
    pub(crate) pending_upgrades: BTreeMap<Nonce, (PendingUpgrade, TraceId)>,
    pub(crate) upgrade_routes: BTreeMap<Nonce, PublicKey>,
    pub(crate) pending_proposals: BTreeMap<Nonce, PendingProposal>,
    pub(crate) action_routes: BTreeMap<Nonce, PublicKey>,
    pub(crate) action_requests: BTreeSet<Nonce>,
    pub(crate) issued_action_nonces: BTreeSet<Nonce>,
    /// Action certificates held by this node, with P0's attestation.
    pub action_certs: Vec<(ActionCertificate, crate::protocol::upgrade::ManagerAttestation)>,
    pub(crate) validation_routes: BTreeMap<Nonce, ReplyTo>,
    pub(crate) gateway_pending: BTreeMap<Nonce, GatewayPending>,
    pub(crate) validator_pending: BTreeMap<Nonce, ValidatorPending>,
    /// Signature verifications performed by a validator, one per decision.
    pub gateway_verifications: u64,
    pub(crate) storage_sessions: BTreeMap<Nonce, StorageSession>,
    pub(crate) client_sessions: BTreeMap<TraceId, ClientSession>,
    pub(crate) revocations_seen: BTreeSet<(Digest, u64, u8)>,
    pub(crate) rotation_pending: Option<PublicKey>,
    pub bridges_held: Vec<CrossTenantDelegation>,
    /// Every public key this node has legitimately held at some point.
    pub ever_known: BTreeSet<PublicKey>,
}

pub struct SimNode {
    pub addr: NodeAddr,
    pub kind: NodeKind,
    pub record: NodeRecord,
    pub state: NodeState,
    pub hook: Option<PolicyHook>,
    pub compromised: bool,
    /// Tenant a gateway, storage or validator node serves.
    pub serves: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct TenantInfo {
    pub name: String,
    pub id: TenantId,
    pub root: NodeAddr,
    pub gateway: Option<NodeAddr>,
    pub model: DelegationModel,
    pub policy: Policy,
    pub open_admission: bool,
}

/// One envelope as it appeared on the simulated wire.
#[derive(Clone, Debug)]
pub struct WireRecord {
    pub tick: u64,
    pub from: NodeAddr,
    pub to: NodeAddr,
    pub msg_type: MsgType,
    pub bytes: Vec<u8>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutcomeKind {
    Join,
    Hint,
    Upgrade,
    Promotion,
    ActionCert,
    Validation,
    Storage,
    Bridge,
    BridgeAccess,
    Revocation,
    Rotation,
    Reject,
    Accept,
}

impl OutcomeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OutcomeKind::Join => "join",
            OutcomeKind::Hint => "hint",
            OutcomeKind::Upgrade => "upgrade",
            OutcomeKind::Promotion => "promotion",
            OutcomeKind::ActionCert => "action-cert",
            OutcomeKind::Validation => "validation",
            OutcomeKind::Storage => "storage",
            OutcomeKind::Bridge => "bridge",
            OutcomeKind::BridgeAccess => "bridge-access",
            OutcomeKind::Revocation => "revocation",
            OutcomeKind::Rotation => "rotation",
            OutcomeKind::Reject => "reject",
            OutcomeKind::Accept => "accept",
        }
    }
}

/// Structured result of a protocol step, used by scenario assertions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Outcome {
    pub tick: u64,
    pub kind: OutcomeKind,
    pub node: String,
    pub ok: bool,
    pub reason: Option<String>,
    pub trace_id: Option<TraceId>,
    /// For `Accept`/`Reject`: digest of the key that signed the message.
    pub signer: Option<Digest>,
}

#[derive(Clone, Debug)]
pub(crate) enum Timer {
    Aggregation { trace: TraceId, h: Digest },
    JoinExpiry { h: Digest, nonce: Nonce },
    Challenge { session: Nonce },
}

/// Scheduled protocol initiation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Directive {
    Disclose { from: NodeAddr, to: NodeAddr, invite: bool },
    Join { candidate: NodeAddr, manager: NodeAddr, mode: RouteMode, info: Vec<u8> },
    Upgrade { leaf: NodeAddr, hint: bool },
    Action { node: NodeAddr, permission: String },
    Validate { node: NodeAddr, validator: NodeAddr, permission: String },
    Storage { node: NodeAddr, storage: NodeAddr, permission: String },
    Impersonate { attacker: NodeAddr, victim: NodeAddr, storage: NodeAddr },
    Revoke { manager: NodeAddr, subject: NodeAddr, reason: crate::tree::RevocationReason },
    Rotate { manager: NodeAddr },
    Bridge { issuer: NodeAddr, foreign: NodeAddr, permission: String, duration: u64 },
    BridgeAccess { foreign: NodeAddr, issuer: NodeAddr, permission: String },
    /// Records a membership projection under a label for later diffs.
    Checkpoint { label: String },
    Adversary(crate::adversary::AdversaryAction),
}

#[derive(Clone, Debug)]
pub(crate) enum Event {
    Hop { env: Envelope, origin: NodeAddr, at: NodeAddr, dest: NodeAddr, rest: Vec<NodeAddr>, msg_type: MsgType },
    Fail { origin: NodeAddr, dest: NodeAddr, msg_type: MsgType, trace: TraceId, why: String },
    Timer { node: NodeAddr, timer: Timer },
    Directive(Directive),
}

/// How an outgoing message is sealed.
#[derive(Clone, Debug)]
pub(crate) struct Out {
    pub to: NodeAddr,
    pub pk: PublicKey,
    pub body: Body,
    pub trace: TraceId,
    pub signed: bool,
    /// Enforce the key-visibility rule at the sender.
    pub visible: bool,
    /// Sender key pair override (session or pre-rotation keys).
    pub keys: Option<KeyPair>,
    pub mode: RouteMode,
}

impl Out {
    pub fn control(to: NodeAddr, pk: &PublicKey, body: Body, trace: TraceId) -> Out {
        Out { to, pk: pk.clone(), body, trace, signed: true, visible: true, keys: None, mode: RouteMode::DirectIp }
    }
    /// Unsigned; used only for bodies that carry their own signature or
    /// for senders the recipient cannot know.
    pub fn plain(mut self) -> Out {
        self.signed = false;
        self
    }
    /// Reply to a key learned from the request itself.
    pub fn reply(mut self) -> Out {
        self.visible = false;
        self
    }
    pub fn with_keys(mut self, keys: KeyPair) -> Out {
        self.keys = Some(keys);
        self
    }
    pub fn via(mut self, mode: RouteMode) -> Out {
        self.mode = mode;
        self
    }
}

/// Summary of a finished run.
#[derive(Clone, Debug)]
pub struct RunReport {
    pub final_tick: u64,
    pub events: u64,
    pub violations: Vec<String>,
}

pub struct World {
    pub provider: Arc<dyn CryptoProvider>,
    pub config: SimConfig,
    pub(crate) rng: ChaCha20Rng,
    pub nodes: Vec<SimNode>,
    pub names: BTreeMap<String, NodeAddr>,
    pub tenants: Vec<TenantInfo>,
    pub registry: TenantRegistry,
    pub trace: Trace,
    pub wire: Vec<WireRecord>,
    pub outcomes: Vec<Outcome>,
    pub violations: Vec<String>,
    pub adversary: Adversary,
    /// Duplicate probe arrivals that were dropped.
    pub duplicate_probes: Vec<String>,
    pub checkpoints: BTreeMap<String, crate::checks::Projection>,
    /// Out-of-band disclosures as (holder digest, recipient) pairs.
    pub disclosed: BTreeSet<(Digest, NodeAddr)>,
    /// Per-link latency overrides, keyed by unordered address pair.
    pub link_latency: BTreeMap<(NodeAddr, NodeAddr), u64>,
    directory: BTreeMap<Digest, Vec<NodeAddr>>,
    /// Every key pair generated in this world, for post-run scans.
    pub(crate) key_archive: BTreeMap<Digest, KeyPair>,
    /// Node that held each identity key. Session and adversary keys are
    /// absent.
    pub(crate) key_owner: BTreeMap<Digest, NodeAddr>,
    queue: BTreeMap<(u64, u64), Event>,
    seq: u64,
    pub now: u64,
    events: u64,
}

impl World {
    pub fn new(provider: Arc<dyn CryptoProvider>, seed: u64, config: SimConfig) -> World {
        World {
            provider,
            config,
            rng: ChaCha20Rng::seed_from_u64(seed),
            nodes: Vec::new(),
            names: BTreeMap::new(),
            tenants: Vec::new(),
            registry: TenantRegistry::default(),
            trace: Trace::default(),
            wire: Vec::new(),
            outcomes: Vec::new(),
            violations: Vec::new(),
            adversary: Adversary::default(),
            duplicate_probes: Vec::new(),
            checkpoints: BTreeMap::new(),
            disclosed: BTreeSet::new(),
            link_latency: BTreeMap::new(),
            directory: BTreeMap::new(),
            key_archive: BTreeMap::new(),
            key_owner: BTreeMap::new(),
            queue: BTreeMap::new(),
            seq: 0,
            now: 0,
            events: 0,
        }
    }

    // ---- construction -------------------------------------------------

    fn push_node(&mut self, name: &str, kind: NodeKind, record: NodeRecord) -> NodeAddr {
        assert!(!self.names.contains_key(name), "duplicate node name {name}");
        let addr = self.nodes.len();
        self.directory.entry(record.node_id).or_default().push(addr);
        self.key_archive.insert(record.node_id, record.keys.clone());
        self.key_owner.insert(record.node_id, addr);
        let mut state = NodeState::default();
        state.ever_known.insert(record.public().clone());
        self.nodes.push(SimNode { addr, kind, record, state, hook: None, compromised: false, serves: None });
        self.names.insert(name.to_string(), addr);
        addr
    }

    pub fn fresh_keys(&mut self) -> KeyPair {
        let seed: [u8; 32] = self.rng.gen();
        let k = self.provider.keypair_from_seed(seed);
        self.key_archive.insert(k.public.digest(), k.clone());
        k
    }

    /// Creates a tenant and its root.
    pub fn add_tenant(&mut self, name: &str, root_name: &str, model: DelegationModel, policy: Policy) -> NodeAddr {
        let seed: [u8; 32] = self.rng.gen();
        let root = create_root(self.provider.as_ref(), root_name, seed, &mut self.rng);
        let id = root.tenant.unwrap();
        let addr = self.push_node(root_name, NodeKind::Member, root);
        self.registry.register(id, self.nodes[addr].record.node_id);
        self.tenants.push(TenantInfo {
            name: name.to_string(),
            id,
            root: addr,
            gateway: None,
            model,
            policy,
            open_admission: false,
        });
        if model == DelegationModel::FullPath {
            self.nodes[addr].record.cert_chain = Some(Vec::new());
        }
        self.log(EventKind::State, root_name, "-", None, None, Some(format!("tenant {name} created")));
        addr
    }

    /// Adds an unaffiliated node with fresh keys.
    pub fn add_node(&mut self, name: &str, kind: NodeKind) -> NodeAddr {
        let keys = self.fresh_keys();
        self.add_node_with_keys(name, kind, keys)
    }

    pub fn add_node_with_keys(&mut self, name: &str, kind: NodeKind, keys: KeyPair) -> NodeAddr {
        let record = NodeRecord::unaffiliated(name, keys);
        self.push_node(name, kind, record)
    }

    /// Declares `gw` the tenant gateway, with a routing handle to the root.
    pub fn set_gateway(&mut self, tenant: usize, gw: NodeAddr) {
        let root = self.tenants[tenant].root;
        self.tenants[tenant].gateway = Some(gw);
        self.nodes[gw].serves = Some(tenant);
        self.exchange(gw, root);
    }

    /// Attaches a storage or validator node to a tenant gateway.
    pub fn attach_to_gateway(&mut self, node: NodeAddr, tenant: usize) {
        let gw = self.tenants[tenant].gateway.expect("tenant has a gateway");
        self.nodes[node].serves = Some(tenant);
        self.exchange(node, gw);
    }

    fn exchange(&mut self, a: NodeAddr, b: NodeAddr) {
        self.disclose(a, b, false);
        self.disclose(b, a, false);
    }

    /// Trusted setup of a membership edge without running the join
    /// protocol. Used for scenario topologies and test fixtures.
    pub fn provision(&mut self, parent: NodeAddr, child: NodeAddr, role: Role) -> Result<()> {
        let p = self.provider.clone();
        let lifetime = self.config.cert_lifetime;
        let now = self.now;
        let nonce = Nonce::random(&mut self.rng);
        let (tenant, salt, depth, chain, child_pk, parent_pk) = {
            let pr = &self.nodes[parent].record;
            (pr.tenant.ok_or(Error::NotAManager)?, pr.salt.unwrap(), pr.depth + 1, pr.cert_chain.clone(), self.nodes[child].record.public().clone(), pr.public().clone())
        };
        let scope = self.nodes[parent]
            .record
            .cert
            .as_ref()
            .map(|c| c.scope.clone())
            .unwrap_or_else(|| ScopeLabel::tenant_root(&tenant));
        let cert = issue_delegation(p.as_ref(), &mut self.nodes[parent].record, &child_pk, role, scope, Validity::starting(now, lifetime), nonce)?;
        accept_membership(&mut self.nodes[child].record, &parent_pk, cert, tenant, depth, salt, chain);
        self.nodes[parent].state.ever_known.insert(child_pk);
        self.nodes[child].state.ever_known.insert(parent_pk);
        let (pn, cn) = (self.nodes[parent].record.name.clone(), self.nodes[child].record.name.clone());
        self.log(EventKind::State, &pn, &cn, None, None, Some(format!("provision {}", role.as_str())));
        Ok(())
    }

    /// Out-of-band key disclosure: `to` learns `from`'s public key. A
    /// manager disclosing to an unaffiliated node also invites it.
    pub fn disclose(&mut self, from: NodeAddr, to: NodeAddr, invite: bool) {
        let pk = self.nodes[from].record.public().clone();
        self.nodes[to].record.trust(pk.clone());
        self.disclosed.insert((pk.digest(), to));
        self.nodes[to].state.ever_known.insert(pk);
        if invite {
            let d = self.nodes[to].record.node_id;
            self.nodes[from].state.invited.insert(d);
            let theirs = self.nodes[to].record.public().clone();
            self.nodes[from].state.ever_known.insert(theirs);
        }
        let (f, t) = (self.name(from).to_string(), self.name(to).to_string());
        self.log(EventKind::Trust, &f, &t, None, None, Some(if invite { "disclose+invite" } else { "disclose" }.into()));
    }

    pub fn schedule(&mut self, at: u64, d: Directive) {
        self.enqueue(at, Event::Directive(d));
    }

    // ---- lookups ------------------------------------------------------

    pub fn addr(&self, name: &str) -> Option<NodeAddr> {
        self.names.get(name).copied()
    }

    pub fn name(&self, a: NodeAddr) -> &str {
        &self.nodes[a].record.name
    }

    pub fn tenant_of(&self, a: NodeAddr) -> Option<usize> {
        let t = self.nodes[a].record.tenant?;
        self.tenants.iter().position(|x| x.id == t)
    }

    pub fn tenant_index(&self, id: &TenantId) -> Option<usize> {
        self.tenants.iter().position(|x| &x.id == id)
    }

    /// Address currently holding `pk`, preferring nodes in `near`'s tenant.
    pub fn addr_of(&self, pk: &PublicKey, near: NodeAddr) -> Option<NodeAddr> {
        let addrs = self.directory.get(&pk.digest())?;
        let t = self.nodes[near].record.tenant;
        addrs
            .iter()
            .copied()
            .find(|a| self.nodes[*a].record.tenant == t && t.is_some())
            .or_else(|| addrs.first().copied())
    }

    pub(crate) fn register_key(&mut self, d: Digest, addr: NodeAddr) {
        let v = self.directory.entry(d).or_default();
        if !v.contains(&addr) {
            v.push(addr);
        }
    }

    pub(crate) fn unregister_key(&mut self, d: &Digest, addr: NodeAddr) {
        if let Some(v) = self.directory.get_mut(d) {
            v.retain(|a| *a != addr);
        }
    }

    /// Members of a tenant (non-revoked, affiliated records).
    pub fn members(&self, tenant: usize) -> Vec<NodeAddr> {
        let id = self.tenants[tenant].id;
        self.nodes
            .iter()
            .filter(|n| n.record.tenant == Some(id) && !n.record.revoked)
            .map(|n| n.addr)
            .collect()
    }

    pub fn tree_view(&self) -> TreeView<'_> {
        TreeView::new(self.nodes.iter().filter(|n| n.record.tenant.is_some()).map(|n| &n.record))
    }

    /// Every identity key any node has held, current or rotated out, with
    /// its holder.
    pub fn identity_keys(&self) -> Vec<(PublicKey, NodeAddr)> {
        self.key_owner.iter().map(|(d, a)| (self.key_archive[d].public.clone(), *a)).collect()
    }

    /// Certificates along the tree path to `a`, root's child first.
    pub fn cert_chain(&self, a: NodeAddr) -> Vec<crate::tree::DelegationCertificate> {
        self.tree_path(a).into_iter().filter_map(|x| self.nodes[x].record.cert.clone()).collect()
    }

    /// Tree path from the tenant root to `a`, root first.
    pub fn tree_path(&self, a: NodeAddr) -> Vec<NodeAddr> {
        let mut path = vec![a];
        let mut cur = a;
        while let Some(p) = self.nodes[cur].record.parent.clone() {
            match self.addr_of(&p, cur) {
                Some(pa) if !path.contains(&pa) => {
                    path.push(pa);
                    cur = pa;
                }
                _ => break,
            }
        }
        path.reverse();
        path
    }

    /// Conflict-check oracle: does any non-revoked member of the tenant hold
    /// a key with digest `h`?
    pub fn oracle_conflict(&self, tenant: usize, h: &Digest) -> bool {
        self.members(tenant).iter().any(|a| &self.nodes[*a].record.node_id == h)
    }

    pub(crate) fn agg_timeout(&self, tenant: Option<usize>) -> u64 {
        let depth = tenant.map(|t| self.tenants[t].policy.max_depth).unwrap_or(16) as u64;
        4 * depth
    }

    // ---- logging ------------------------------------------------------

    pub(crate) fn log(&mut self, kind: EventKind, from: &str, to: &str, msg_type: Option<MsgType>, trace_id: Option<TraceId>, detail: Option<String>) {
        self.trace.push(TraceLine { tick: self.now, kind, from: from.to_string(), to: to.to_string(), msg_type, trace_id, detail });
    }

    pub(crate) fn outcome(&mut self, kind: OutcomeKind, node: NodeAddr, ok: bool, reason: Option<String>, trace_id: Option<TraceId>) {
        let name = self.name(node).to_string();
        self.outcomes.push(Outcome { tick: self.now, kind, node: name, ok, reason, trace_id, signer: None });
    }

    /// Records a handler-level rejection.
    pub(crate) fn reject(&mut self, at: NodeAddr, from: &str, msg_type: Option<MsgType>, trace: Option<TraceId>, why: &str, signer: Option<Digest>) {
        let to = self.name(at).to_string();
        self.log(EventKind::Reject, from, &to, msg_type, trace, Some(why.to_string()));
        self.outcomes.push(Outcome {
            tick: self.now,
            kind: OutcomeKind::Reject,
            node: to,
            ok: false,
            reason: Some(why.to_string()),
            trace_id: trace,
            signer,
        });
    }

    // ---- transmission -------------------------------------------------

    fn enqueue(&mut self, at: u64, ev: Event) {
        self.queue.insert((at, self.seq), ev);
        self.seq += 1;
    }

    /// Seals and transmits one message from `from`. Errors are traced and
    /// returned.
    pub(crate) fn send(&mut self, from: NodeAddr, out: Out) -> Result<()> {
        let p = self.provider.clone();
        let msg_type = out.body.msg_type();
        let keys = out.keys.clone().unwrap_or_else(|| self.nodes[from].record.keys.clone());
        if out.visible && !self.nodes[from].record.known_keys.contains(&out.pk) {
            let (f, t) = (self.name(from).to_string(), self.name(out.to).to_string());
            self.log(EventKind::Reject, &f, &t, Some(msg_type), Some(out.trace), Some(Error::KeyNotVisible.code().into()));
            return Err(Error::KeyNotVisible);
        }
        let payload = ControlPayload::new(&keys.public, &out.body, self.now, &mut self.rng);
        let env = seal_with_keys(p.as_ref(), &mut self.rng, &keys, &out.pk, &payload, out.signed, out.trace)?;
        self.transmit(from, out.to, env, msg_type, out.mode);
        Ok(())
    }

    /// Puts an envelope on the wire: trace, adversary interposition,
    /// routing and delivery scheduling.
    pub(crate) fn transmit(&mut self, from: NodeAddr, to: NodeAddr, env: Envelope, msg_type: MsgType, mode: RouteMode) {
        let (f, t) = (self.name(from).to_string(), self.name(to).to_string());
        self.log(EventKind::Send, &f, &t, Some(msg_type), Some(env.trace_id), None);
        self.put_on_wire(from, to, env, msg_type, mode);
    }

    /// Routing and adversary hooks shared by honest sends and injections.
    pub(crate) fn put_on_wire(&mut self, from: NodeAddr, to: NodeAddr, env: Envelope, msg_type: MsgType, mode: RouteMode) {
        self.wire.push(WireRecord { tick: self.now, from, to, msg_type, bytes: env.to_wire() });
        let Some(env) = crate::adversary::intercept(self, from, to, env, msg_type) else {
            return;
        };
        let tenant = self.tenant_of(to).or_else(|| self.tenant_of(from));
        let path = if mode == RouteMode::TreePath { Some(self.tree_path(to)) } else { None };
        let ctx = RouteContext {
            overlay_size: self.nodes.len(),
            fanout: self.config.fanout,
            tree_path: path.as_deref(),
            gateway: tenant.and_then(|t| self.tenants[t].gateway),
        };
        match route(mode, from, to, &ctx) {
            Ok(hops) => {
                let first = hops[0];
                let rest = hops[1..].to_vec();
                let at = self.now + self.latency(from, first);
                self.enqueue(at, Event::Hop { env, origin: from, at: first, dest: to, rest, msg_type });
            }
            Err(e) => {
                let at = self.now + self.config.delivery_timeout;
                let trace = env.trace_id;
                self.enqueue(at, Event::Fail { origin: from, dest: to, msg_type, trace, why: e.to_string() });
            }
        }
    }

    fn latency(&self, a: NodeAddr, b: NodeAddr) -> u64 {
        self.link_latency.get(&(a.min(b), a.max(b))).copied().unwrap_or(self.config.hop_latency)
    }

    /// Delivers an envelope straight to `to` after `delay`, bypassing the
    /// sender-side trace. Used for adversarial replays and injections.
    pub(crate) fn inject(&mut self, to: NodeAddr, env: Envelope, msg_type: MsgType, delay: u64) {
        let at = self.now + delay.max(1);
        let origin = to;
        self.enqueue(at, Event::Hop { env, origin, at: to, dest: to, rest: vec![], msg_type });
    }

    // ---- event loop ---------------------------------------------------

    /// Runs until the queue is empty.
    pub fn run(&mut self) -> Result<RunReport> {
        while let Some(((tick, _), ev)) = self.queue.pop_first() {
            if tick > self.config.max_ticks {
                self.log(EventKind::Fail, "-", "-", None, None, Some(format!("NonTermination at {tick}")));
                return Err(Error::NonTermination(self.config.max_ticks));
            }
            self.now = tick;
            self.events += 1;
            self.handle_event(ev);
        }
        self.check_quiescent_invariants();
        Ok(RunReport { final_tick: self.now, events: self.events, violations: self.violations.clone() })
    }

    fn handle_event(&mut self, ev: Event) {
        match ev {
            Event::Hop { env, origin, at, dest, mut rest, msg_type } => {
                if at != dest {
                    let next = rest.remove(0);
                    let (a, n) = (self.name(at).to_string(), self.name(next).to_string());
                    self.log(EventKind::Relay, &a, &n, Some(msg_type), Some(env.trace_id), None);
                    let env = match crate::adversary::relay_tamper(self, at, env, msg_type) {
                        Some(e) => e,
                        None => return,
                    };
                    let t = self.now + self.latency(at, next);
                    self.enqueue(t, Event::Hop { env, origin, at: next, dest, rest, msg_type });
                    return;
                }
                self.deliver(origin, dest, env, msg_type);
            }
            Event::Fail { origin, dest, msg_type, trace, why } => {
                let (o, d) = (self.name(origin).to_string(), self.name(dest).to_string());
                self.log(EventKind::Fail, &o, &d, Some(msg_type), Some(trace), Some(format!("DeliveryFailed: {why}")));
            }
            Event::Timer { node, timer } => self.fire_timer(node, timer),
            Event::Directive(d) => self.run_directive(d),
        }
    }

    fn deliver(&mut self, origin: NodeAddr, to: NodeAddr, env: Envelope, msg_type: MsgType) {
        let o = self.name(origin).to_string();
        let t = self.name(to).to_string();
        self.log(EventKind::Deliver, &o, &t, Some(msg_type), Some(env.trace_id), None);
        let trace = env.trace_id;
        let opened = match self.open(to, &env) {
            Ok(x) => x,
            Err(e) => {
                let keys = &self.nodes[to].record.keys;
                let claimed = crate::messaging::claimed_signer(self.provider.as_ref(), keys, &env);
                self.reject(to, &o, Some(msg_type), Some(trace), e.code(), claimed);
                return;
            }
        };
        let signer = opened.opened.signer.clone();
        let signer_d = signer.as_ref().map(|s| s.digest());
        if self.nodes[to].record.revoked {
            self.reject(to, &o, Some(msg_type), Some(trace), Reason::Revoked.as_str(), signer_d);
            return;
        }
        let payload = &opened.opened.payload;
        let stale = self.now.abs_diff(payload.timestamp) > self.config.replay_window;
        if stale || !self.nodes[to].state.seen_payloads.insert(payload.nonce) {
            self.reject(to, &o, Some(msg_type), Some(trace), Error::ReplayRejected.code(), signer_d);
            return;
        }
        let body = match payload.decode_body() {
            Ok(b) => b,
            Err(e) => {
                self.reject(to, &o, Some(msg_type), Some(trace), e.code(), signer_d);
                return;
            }
        };
        let msg = Incoming { from: origin, signer, trace, via_session: opened.session };
        match self.dispatch(to, msg, body) {
            Ok(()) => {
                self.outcomes.push(Outcome {
                    tick: self.now,
                    kind: OutcomeKind::Accept,
                    node: t,
                    ok: true,
                    reason: None,
                    trace_id: Some(trace),
                    signer: signer_d,
                });
            }
            Err(e) => self.reject(to, &o, Some(msg_type), Some(trace), e.code(), signer_d),
        }
        self.check_node_invariants(to);
    }

    /// Chooses the key pair the envelope is addressed to and unseals it.
    fn open(&self, to: NodeAddr, env: &Envelope) -> Result<OpenedAt> {
        let node = &self.nodes[to];
        let p = self.provider.as_ref();
        let resolve = |d: &Digest| node.record.known_by_digest(d).cloned();
        if env.recipient_digest == node.record.node_id {
            let opened = unseal_with_keys(p, &node.record.keys, env, resolve)?;
            return Ok(OpenedAt { opened, session: None });
        }
        for (tid, s) in &node.state.client_sessions {
            if s.keys.public.digest() == env.recipient_digest {
                let opened = unseal_with_keys(p, &s.keys, env, resolve)?;
                return Ok(OpenedAt { opened, session: Some(*tid) });
            }
        }
        Err(Error::DecryptionFailure)
    }

    fn dispatch(&mut self, at: NodeAddr, msg: Incoming, body: Body) -> Result<()> {
        match body {
            Body::JoinRequest(b) => self.on_join_request(at, msg, b),
            Body::HashProbe(b) => self.on_hash_probe(at, msg, b),
            Body::ConflictResponse(b) => self.on_conflict_response(at, msg, b),
            Body::JoinDecision(b) => self.on_join_decision(at, msg, b),
            Body::JoinResult(b) => self.on_join_result(at, msg, b),
            Body::UpgradeHint(b) => self.on_upgrade_hint(at, msg, b),
            Body::UpgradeForward(b) => self.on_upgrade_forward(at, msg, b),
            Body::UpgradeDecision(b) => self.on_upgrade_decision(at, msg, b),
            Body::UpgradeGrant(b) => self.on_upgrade_grant(at, msg, b),
            Body::ActionRequest(b) => self.on_action_request(at, msg, b),
            Body::ActionForward(b) => self.on_action_forward(at, msg, b),
            Body::ActionOutcome(b) => self.on_action_outcome(at, msg, b),
            Body::ActionGrant(b) => self.on_action_grant(at, msg, b),
            Body::ActionInvoke(b) => self.on_action_invoke(at, msg, b),
            Body::ValidationQuery(b) => self.on_validation_query(at, msg, b),
            Body::ValidationVerdict(b) => self.on_validation_verdict(at, msg, b),
            Body::ChallengeDelivery(b) => self.on_challenge_delivery(at, msg, b),
            Body::GatewayProof(b) => self.on_gateway_proof(at, msg, b),
            Body::GatewayDenial(b) => self.on_gateway_denial(at, msg, b),
            Body::StorageRequest(b) => self.on_storage_request(at, msg, b),
            Body::ChallengeRequest(b) => self.on_challenge_request(at, msg, b),
            Body::ChallengeAnswer(b) => self.on_challenge_answer(at, msg, b),
            Body::AccessResult(b) => self.on_access_result(at, msg, b),
            Body::Revocation(b) => self.on_revocation(at, msg, b),
            Body::RotationAnnounce(b) => self.on_rotation_announce(at, msg, b),
            Body::RotationAck(b) => self.on_rotation_ack(at, msg, b),
            Body::BridgeGrant(b) => self.on_bridge_grant(at, msg, b),
            Body::BridgeAccess(b) => self.on_bridge_access(at, msg, b),
            Body::BridgeResult(b) => self.on_bridge_result(at, msg, b),
        }
    }

    fn fire_timer(&mut self, node: NodeAddr, timer: Timer) {
        match timer {
            Timer::Aggregation { trace, h } => self.on_aggregation_timeout(node, trace, h),
            Timer::JoinExpiry { h, nonce } => self.on_join_expiry(node, h, nonce),
            Timer::Challenge { session } => self.on_challenge_timeout(node, session),
        }
    }

    pub(crate) fn set_timer(&mut self, node: NodeAddr, after: u64, timer: Timer) {
        let at = self.now + after;
        self.enqueue(at, Event::Timer { node, timer });
    }

    fn run_directive(&mut self, d: Directive) {
        let result = match d {
            Directive::Disclose { from, to, invite } => {
                self.disclose(from, to, invite);
                Ok(())
            }
            Directive::Join { candidate, manager, mode, info } => self.start_join(candidate, manager, mode, &info),
            Directive::Upgrade { leaf, hint } => self.start_upgrade(leaf, hint),
            Directive::Action { node, permission } => self.start_action(node, &permission),
            Directive::Validate { node, validator, permission } => self.start_validation(node, validator, &permission),
            Directive::Storage { node, storage, permission } => self.start_storage(node, storage, &permission),
            Directive::Impersonate { attacker, victim, storage } => self.start_impersonation(attacker, victim, storage),
            Directive::Revoke { manager, subject, reason } => self.start_revocation(manager, subject, reason),
            Directive::Rotate { manager } => self.start_rotation(manager),
            Directive::Bridge { issuer, foreign, permission, duration } => self.start_bridge(issuer, foreign, &permission, duration),
            Directive::BridgeAccess { foreign, issuer, permission } => self.start_bridge_access(foreign, issuer, &permission),
            Directive::Checkpoint { label } => {
                let p = crate::checks::project(self);
                self.checkpoints.insert(label, p);
                Ok(())
            }
            Directive::Adversary(a) => crate::adversary::apply(self, a),
        };
        if let Err(e) = result {
            if let Error::ModelViolation(m) = &e {
                self.violations.push(format!("tick {}: adversary model violation: {m}", self.now));
            }
            self.log(EventKind::Fail, "-", "-", None, None, Some(format!("directive failed: {}", e.code())));
        }
    }

    // ---- invariants ---------------------------------------------------

    fn check_node_invariants(&mut self, a: NodeAddr) {
        let n = &self.nodes[a];
        if !n.record.key_visibility_holds() {
            self.violations.push(format!("tick {}: key visibility broken at {}", self.now, n.record.name));
        }
        if !n.record.role_invariants_hold() {
            self.violations.push(format!("tick {}: role invariant broken at {}", self.now, n.record.name));
        }
        if n.kind == NodeKind::Storage {
            let gw = n.serves.and_then(|t| self.tenants[t].gateway).map(|g| self.nodes[g].record.public().clone());
            let only_gw = match gw {
                Some(g) => n.record.known_keys.iter().all(|k| *k == g),
                None => n.record.known_keys.is_empty(),
            };
            if !only_gw {
                self.violations.push(format!("tick {}: storage {} holds non-gateway keys", self.now, n.record.name));
            }
        }
        let known: Vec<PublicKey> = self.nodes[a].record.known_keys.iter().cloned().collect();
        self.nodes[a].state.ever_known.extend(known);
    }

    fn check_quiescent_invariants(&mut self) {
        let mut found = Vec::new();
        for (ti, t) in self.tenants.iter().enumerate() {
            let members: Vec<&NodeRecord> = self.members(ti).into_iter().map(|a| &self.nodes[a].record).collect();
            let view = TreeView::new(members.iter().copied());
            if !view.is_rooted_tree() {
                found.push(format!("tenant {} is not a rooted tree", t.name));
            }
            let mut seen = BTreeSet::new();
            for m in &members {
                if !seen.insert(m.node_id) {
                    found.push(format!("tenant {}: key {} appears twice", t.name, m.node_id.short()));
                }
            }
        }
        for n in &self.nodes {
            if !n.record.key_visibility_holds() {
                found.push(format!("key visibility broken at {}", n.record.name));
            }
        }
        self.violations.extend(found);
    }
}

pub(crate) struct OpenedAt {
    pub opened: Opened,
    pub session: Option<TraceId>,
}

/// A delivered, authenticated message.
#[derive(Clone, Debug)]
pub(crate) struct Incoming {
    pub from: NodeAddr,
    pub signer: Option<PublicKey>,
    pub trace: TraceId,
    pub via_session: Option<TraceId>,
}

impl Incoming {
    /// The sender must be `expected` and the envelope signed by it.
    pub fn signed_by(&self, expected: Option<&PublicKey>) -> Result<PublicKey> {
        match (&self.signer, expected) {
            (Some(s), Some(e)) if s == e => Ok(s.clone()),
            _ => Err(Error::SignatureInvalid),
        }
    }

    pub fn signed(&self) -> Result<PublicKey> {
        self.signer.clone().ok_or(Error::SignatureInvalid)
    }
}

pub(crate) fn probe_key(trace: TraceId, h: Digest, dir: ProbeDirection) -> (TraceId, Digest, bool) {
    (trace, h, dir == ProbeDirection::Up)
}
