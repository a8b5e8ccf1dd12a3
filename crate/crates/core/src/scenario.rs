//! Scenario files: topology, a timed script of protocol and adversary
//! steps, and expected outcomes. The grammar is TOML; `scenario.schema.json`
//! at the crate root documents it.

use std::fmt::Write as _;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::adversary::{AdversaryAction, Forgery, Select};
use crate::checks;
use crate::crypto::CryptoProvider;
use crate::error::Error;
use crate::messages::RevocationScope;
use crate::messaging::MsgType;
use crate::overlay::{NodeAddr, RouteMode};
use crate::protocol::upgrade::{Policy, PolicyHook};
use crate::sim::{Directive, NodeKind, OutcomeKind, RunReport, SimConfig, World};
use crate::topology;
use crate::tree::{DelegationModel, RevocationReason, Role};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub config: SimConfig,
    #[serde(default, rename = "tenant")]
    pub tenants: Vec<TenantSpec>,
    #[serde(default, rename = "node")]
    pub nodes: Vec<NodeSpec>,
    #[serde(default, rename = "link")]
    pub links: Vec<LinkSpec>,
    #[serde(default)]
    pub adversary: AdversarySpec,
    #[serde(default, rename = "step")]
    pub steps: Vec<Step>,
    #[serde(default, rename = "expect")]
    pub expects: Vec<Expect>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Model {
    #[default]
    HierarchicalOnly,
    FullPath,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RoleSpec {
    Manager,
    Leaf,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySpec {
    #[serde(default = "PolicySpec::depth")]
    pub max_depth: u32,
    #[serde(default = "PolicySpec::subtree")]
    pub max_subtree: u64,
    #[serde(default)]
    pub manager_quota: Option<u32>,
}

impl PolicySpec {
    fn depth() -> u32 {
        Policy::default().max_depth
    }
    fn subtree() -> u64 {
        Policy::default().max_subtree
    }
}

impl Default for PolicySpec {
    fn default() -> Self {
        PolicySpec { max_depth: Self::depth(), max_subtree: Self::subtree(), manager_quota: None }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeSpec {
    pub parent: String,
    pub child: String,
    pub role: RoleSpec,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BalancedSpec {
    pub prefix: String,
    pub branching: usize,
    pub depth: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomSpec {
    pub prefix: String,
    pub nodes: usize,
    pub max_depth: u32,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HookSpec {
    pub node: String,
    #[serde(flatten)]
    pub hook: PolicyHook,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TenantSpec {
    pub name: String,
    pub root: String,
    #[serde(default)]
    pub model: Model,
    #[serde(default)]
    pub open_admission: bool,
    #[serde(default)]
    pub policy: PolicySpec,
    #[serde(default)]
    pub gateway: Option<String>,
    #[serde(default)]
    pub storage: Vec<String>,
    #[serde(default)]
    pub validators: Vec<String>,
    #[serde(default)]
    pub balanced: Option<BalancedSpec>,
    #[serde(default)]
    pub random: Option<RandomSpec>,
    #[serde(default, rename = "edge")]
    pub edges: Vec<EdgeSpec>,
    #[serde(default, rename = "hook")]
    pub hooks: Vec<HookSpec>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub name: String,
    #[serde(default = "NodeSpec::member")]
    pub kind: NodeKind,
}

impl NodeSpec {
    fn member() -> NodeKind {
        NodeKind::Member
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkSpec {
    pub a: String,
    pub b: String,
    pub latency: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdversarySpec {
    /// The adversary may address any public key, not just those its
    /// compromised nodes know.
    #[serde(default)]
    pub knows_all_keys: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReasonSpec {
    Leave,
    Termination,
    Compromise,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScopeSpec {
    Subtree,
    ToRoot,
    TenantWide,
}

/// Envelope selector fields shared by replay, modify and drop.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectSpec {
    #[serde(default)]
    pub msg_type: Option<String>,
    #[serde(default)]
    pub from: Option<String>,
    #[serde(default)]
    pub to: Option<String>,
    #[serde(default)]
    pub nth: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Op {
    Disclose {
        from: String,
        to: String,
        #[serde(default)]
        invite: bool,
    },
    Join {
        candidate: String,
        manager: String,
        #[serde(default)]
        mode: RouteMode,
        #[serde(default)]
        info: String,
    },
    Upgrade {
        leaf: String,
        #[serde(default = "yes")]
        hint: bool,
    },
    Action {
        node: String,
        permission: String,
    },
    Validate {
        node: String,
        validator: String,
        permission: String,
    },
    Storage {
        node: String,
        storage: String,
        permission: String,
    },
    Impersonate {
        attacker: String,
        victim: String,
        storage: String,
    },
    Revoke {
        manager: String,
        subject: String,
        reason: ReasonSpec,
    },
    Rotate {
        manager: String,
    },
    Bridge {
        issuer: String,
        foreign: String,
        permission: String,
        duration: u64,
    },
    BridgeAccess {
        foreign: String,
        issuer: String,
        permission: String,
    },
    Checkpoint {
        label: String,
    },
    Eavesdrop,
    Replay {
        select: SelectSpec,
        delay: u64,
    },
    Modify {
        select: SelectSpec,
        #[serde(default)]
        offset: usize,
    },
    Drop {
        select: SelectSpec,
    },
    MaliciousRelay {
        node: String,
        #[serde(default)]
        offset: usize,
    },
    ForgeDecision {
        target: String,
    },
    ForgeCertificate {
        target: String,
        manager: String,
    },
    ForgeRevocation {
        from: String,
        to: String,
        subject: String,
        scope: ScopeSpec,
    },
    LeafFuzz {
        leaf: String,
        runs: usize,
        #[serde(default)]
        seed: u64,
    },
    CompromiseProbe {
        victim: String,
    },
    Sybil {
        count: usize,
        target: String,
    },
    Compromise {
        node: String,
    },
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub at: u64,
    #[serde(flatten)]
    pub op: Op,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContainScope {
    /// The node and its descendants.
    Subtree,
    /// The node, its parent and its direct children.
    Rotation,
    /// The node's subtree and its parent, whose children map loses it.
    Revocation,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Expect {
    /// Counts outcomes matching every given filter.
    Outcome {
        outcome: OutcomeKind,
        #[serde(default)]
        node: Option<String>,
        #[serde(default)]
        ok: Option<bool>,
        #[serde(default)]
        reason: Option<String>,
        /// Signer key: the key `signer` held at checkpoint `signer_at`
        /// (or at the end of the run).
        #[serde(default)]
        signer: Option<String>,
        #[serde(default)]
        signer_at: Option<String>,
        #[serde(default)]
        after: Option<u64>,
        #[serde(default = "one")]
        min: usize,
        #[serde(default)]
        max: Option<usize>,
    },
    Role {
        node: String,
        role: String,
    },
    Member {
        node: String,
        member: bool,
    },
    Revoked {
        node: String,
        revoked: bool,
    },
    /// Number of members among nodes whose name starts with `prefix`.
    Memberships {
        prefix: String,
        count: usize,
    },
    /// State changes since checkpoint `since` stay within the scope of
    /// `node` as it was at that checkpoint.
    Contained {
        since: String,
        node: String,
        scope: ContainScope,
    },
    /// Adversary effects stay within the first compromised node's subtree,
    /// up to checkpoint `until` or the end of the run.
    CompromiseContained {
        #[serde(default)]
        until: Option<String>,
    },
    Privacy,
    Isolation,
    /// The eavesdropper captured traffic and opened none of it.
    Confidential,
    /// Trace lines containing `contains`.
    Trace {
        contains: String,
        #[serde(default = "one")]
        min: usize,
        #[serde(default)]
        max: Option<usize>,
    },
}

fn one() -> usize {
    1
}

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("{0}")]
    Parse(String),
    #[error("unknown node `{0}`")]
    UnknownNode(String),
    #[error("unknown msg_type `{0}`")]
    UnknownMsgType(String),
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("setup failed: {0}")]
    Setup(#[from] Error),
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Scenario, ScenarioError> {
        toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))
    }

    /// Fails for integers above `i64::MAX`, which TOML cannot represent.
    pub fn to_toml(&self) -> Result<String, ScenarioError> {
        toml::to_string(self).map_err(|e| ScenarioError::Invalid(e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Assertion {
    pub label: String,
    pub pass: bool,
    pub detail: String,
}

/// A finished run.
pub struct Run {
    pub world: World,
    pub report: Result<RunReport, Error>,
    pub assertions: Vec<Assertion>,
}

impl Run {
    /// True when the run reached quiescence, no invariant broke and every
    /// assertion held.
    pub fn passed(&self) -> bool {
        matches!(&self.report, Ok(r) if r.violations.is_empty()) && self.assertions.iter().all(|a| a.pass)
    }

    /// Trace lines, final snapshot and assertion results.
    pub fn render(&self) -> String {
        let mut s = self.world.trace.render();
        s.push_str("# snapshot\n");
        s.push_str(&crate::snapshot::Snapshot::of(&self.world).render());
        s.push_str("# result\n");
        match &self.report {
            Ok(r) => {
                let _ = writeln!(s, "quiescent at {} after {} events", r.final_tick, r.events);
                for v in &r.violations {
                    let _ = writeln!(s, "violation {v}");
                }
            }
            Err(e) => {
                let _ = writeln!(s, "error {}", e.code());
            }
        }
        for a in &self.assertions {
            let _ = writeln!(s, "{} {} {}", if a.pass { "pass" } else { "FAIL" }, a.label, a.detail);
        }
        s
    }
}

fn resolve(w: &World, name: &str) -> Result<NodeAddr, ScenarioError> {
    w.addr(name).ok_or_else(|| ScenarioError::UnknownNode(name.to_string()))
}

fn select(w: &World, s: &SelectSpec) -> Result<Select, ScenarioError> {
    let msg_type = match &s.msg_type {
        Some(m) => Some(MsgType::parse(m).ok_or_else(|| ScenarioError::UnknownMsgType(m.clone()))?),
        None => None,
    };
    let from = s.from.as_deref().map(|n| resolve(w, n)).transpose()?;
    let to = s.to.as_deref().map(|n| resolve(w, n)).transpose()?;
    Ok(Select { msg_type, from, to, nth: s.nth })
}

fn reason(r: ReasonSpec) -> RevocationReason {
    match r {
        ReasonSpec::Leave => RevocationReason::VoluntaryLeave,
        ReasonSpec::Termination => RevocationReason::Termination,
        ReasonSpec::Compromise => RevocationReason::Compromise,
    }
}

fn scope(s: ScopeSpec) -> RevocationScope {
    match s {
        ScopeSpec::Subtree => RevocationScope::Subtree,
        ScopeSpec::ToRoot => RevocationScope::ToRoot,
        ScopeSpec::TenantWide => RevocationScope::TenantWide,
    }
}

fn directive(w: &World, op: &Op) -> Result<Directive, ScenarioError> {
    let r = |n: &str| resolve(w, n);
    let adv = |a: AdversaryAction| Ok(Directive::Adversary(a));
    match op {
        Op::Disclose { from, to, invite } => Ok(Directive::Disclose { from: r(from)?, to: r(to)?, invite: *invite }),
        Op::Join { candidate, manager, mode, info } => {
            Ok(Directive::Join { candidate: r(candidate)?, manager: r(manager)?, mode: *mode, info: info.as_bytes().to_vec() })
        }
        Op::Upgrade { leaf, hint } => Ok(Directive::Upgrade { leaf: r(leaf)?, hint: *hint }),
        Op::Action { node, permission } => Ok(Directive::Action { node: r(node)?, permission: permission.clone() }),
        Op::Validate { node, validator, permission } => {
            Ok(Directive::Validate { node: r(node)?, validator: r(validator)?, permission: permission.clone() })
        }
        Op::Storage { node, storage, permission } => {
            Ok(Directive::Storage { node: r(node)?, storage: r(storage)?, permission: permission.clone() })
        }
        Op::Impersonate { attacker, victim, storage } => {
            Ok(Directive::Impersonate { attacker: r(attacker)?, victim: r(victim)?, storage: r(storage)? })
        }
        Op::Revoke { manager, subject, reason: why } => {
            Ok(Directive::Revoke { manager: r(manager)?, subject: r(subject)?, reason: reason(*why) })
        }
        Op::Rotate { manager } => Ok(Directive::Rotate { manager: r(manager)? }),
        Op::Bridge { issuer, foreign, permission, duration } => {
            Ok(Directive::Bridge { issuer: r(issuer)?, foreign: r(foreign)?, permission: permission.clone(), duration: *duration })
        }
        Op::BridgeAccess { foreign, issuer, permission } => {
            Ok(Directive::BridgeAccess { foreign: r(foreign)?, issuer: r(issuer)?, permission: permission.clone() })
        }
        Op::Checkpoint { label } => Ok(Directive::Checkpoint { label: label.clone() }),
        Op::Eavesdrop => adv(AdversaryAction::Eavesdrop),
        Op::Replay { select: s, delay } => adv(AdversaryAction::Replay { select: select(w, s)?, delay: *delay }),
        Op::Modify { select: s, offset } => adv(AdversaryAction::Modify { select: select(w, s)?, offset: *offset }),
        Op::Drop { select: s } => adv(AdversaryAction::Drop { select: select(w, s)? }),
        Op::MaliciousRelay { node, offset } => adv(AdversaryAction::MaliciousRelay { node: r(node)?, offset: *offset }),
        Op::ForgeDecision { target } => adv(AdversaryAction::Inject(Forgery::Decision { target: r(target)? })),
        Op::ForgeCertificate { target, manager } => {
            adv(AdversaryAction::Inject(Forgery::Certificate { target: r(target)?, manager: r(manager)? }))
        }
        Op::ForgeRevocation { from, to, subject, scope: sc } => adv(AdversaryAction::Inject(Forgery::RevocationFrom {
            from: r(from)?,
            to: r(to)?,
            subject: r(subject)?,
            scope: scope(*sc),
        })),
        Op::LeafFuzz { leaf, runs, seed } => adv(AdversaryAction::Inject(Forgery::LeafFuzz { leaf: r(leaf)?, runs: *runs, seed: *seed })),
        Op::CompromiseProbe { victim } => adv(AdversaryAction::Inject(Forgery::CompromiseProbe { victim: r(victim)? })),
        Op::Sybil { count, target } => adv(AdversaryAction::SybilSpawn { count: *count, target: r(target)? }),
        Op::Compromise { node } => adv(AdversaryAction::Compromise { node: r(node)? }),
    }
}

/// Builds the world described by `sc` with its script scheduled.
pub fn build(sc: &Scenario, provider: Arc<dyn CryptoProvider>, seed: u64, config: SimConfig) -> Result<World, ScenarioError> {
    let mut w = World::new(provider, seed, config);
    w.adversary.knows_all_keys = sc.adversary.knows_all_keys;
    for t in &sc.tenants {
        if w.addr(&t.root).is_some() {
            return Err(ScenarioError::Invalid(format!("duplicate node `{}`", t.root)));
        }
        let model = match t.model {
            Model::HierarchicalOnly => DelegationModel::HierarchicalOnly,
            Model::FullPath => DelegationModel::FullPath,
        };
        let policy = Policy { max_depth: t.policy.max_depth, max_subtree: t.policy.max_subtree, manager_quota: t.policy.manager_quota };
        let root = w.add_tenant(&t.name, &t.root, model, policy);
        let ti = w.tenants.len() - 1;
        w.tenants[ti].open_admission = t.open_admission;
        if let Some(b) = &t.balanced {
            topology::balanced(&mut w, root, &b.prefix, b.branching, b.depth)?;
        }
        if let Some(r) = &t.random {
            let mut rng = ChaCha20Rng::seed_from_u64(r.seed);
            let shape = topology::random_shape(r.nodes, r.max_depth, &mut rng);
            topology::provision_shape(&mut w, root, &r.prefix, &shape)?;
        }
        for e in &t.edges {
            let parent = resolve(&w, &e.parent)?;
            let child = match w.addr(&e.child) {
                Some(a) => a,
                None => w.add_node(&e.child, NodeKind::Member),
            };
            let role = match e.role {
                RoleSpec::Manager => Role::Manager,
                RoleSpec::Leaf => Role::Leaf,
            };
            w.provision(parent, child, role)?;
        }
        if let Some(g) = &t.gateway {
            let gw = w.add_node(g, NodeKind::Gateway);
            w.set_gateway(ti, gw);
        }
        for s in &t.storage {
            let a = w.add_node(s, NodeKind::Storage);
            w.attach_to_gateway(a, ti);
        }
        for v in &t.validators {
            let a = w.add_node(v, NodeKind::Validator);
            w.attach_to_gateway(a, ti);
        }
        for h in &t.hooks {
            let a = resolve(&w, &h.node)?;
            w.nodes[a].hook = Some(h.hook.clone());
        }
    }
    for n in &sc.nodes {
        if w.addr(&n.name).is_some() {
            return Err(ScenarioError::Invalid(format!("duplicate node `{}`", n.name)));
        }
        w.add_node(&n.name, n.kind);
    }
    for l in &sc.links {
        let (a, b) = (resolve(&w, &l.a)?, resolve(&w, &l.b)?);
        w.link_latency.insert((a.min(b), a.max(b)), l.latency);
    }
    for s in &sc.steps {
        let d = directive(&w, &s.op)?;
        w.schedule(s.at, d);
    }
    Ok(w)
}

/// Builds, runs and evaluates a scenario. `seed` and `max_ticks` override
/// the file when given.
pub fn run(sc: &Scenario, provider: Arc<dyn CryptoProvider>, seed: Option<u64>, max_ticks: Option<u64>) -> Result<Run, ScenarioError> {
    let mut config = sc.config.clone();
    if let Some(m) = max_ticks {
        config.max_ticks = m;
    }
    let mut world = build(sc, provider, seed.unwrap_or(sc.seed), config)?;
    let report = world.run();
    let assertions = if report.is_ok() { sc.expects.iter().map(|e| evaluate(&world, e)).collect() } else { Vec::new() };
    Ok(Run { world, report, assertions })
}

fn count_check(n: usize, min: usize, max: Option<usize>) -> bool {
    n >= min && max.is_none_or(|m| n <= m)
}

fn bounds(min: usize, max: Option<usize>) -> String {
    match max {
        Some(m) if m == min => format!("={m}"),
        Some(m) => format!("in {min}..={m}"),
        None => format!(">={min}"),
    }
}

/// Evaluates one expectation against a finished world.
pub fn evaluate(w: &World, e: &Expect) -> Assertion {
    let node_pass = |label: String, r: Result<(bool, String), String>| match r {
        Ok((pass, detail)) => Assertion { label, pass, detail },
        Err(detail) => Assertion { label, pass: false, detail },
    };
    match e {
        Expect::Outcome { outcome, node, ok, reason, signer, signer_at, after, min, max } => {
            let signer_d = match signer {
                Some(name) => {
                    let d = match signer_at {
                        Some(cp) => w.checkpoints.get(cp).and_then(|p| p.get(name)).map(|v| v.id),
                        None => w.addr(name).map(|a| w.nodes[a].record.node_id),
                    };
                    match d {
                        Some(d) => Some(d),
                        None => {
                            return Assertion {
                                label: format!("outcome {}", outcome.as_str()),
                                pass: false,
                                detail: format!("signer `{name}` not found"),
                            }
                        }
                    }
                }
                None => None,
            };
            let n = w
                .outcomes
                .iter()
                .filter(|o| o.kind == *outcome)
                .filter(|o| node.as_ref().is_none_or(|x| &o.node == x))
                .filter(|o| ok.is_none_or(|x| o.ok == x))
                .filter(|o| reason.as_ref().is_none_or(|x| o.reason.as_ref() == Some(x)))
                .filter(|o| signer_d.is_none_or(|d| o.signer == Some(d)))
                .filter(|o| after.is_none_or(|t| o.tick > t))
                .count();
            let mut label = format!("outcome {}", outcome.as_str());
            if let Some(x) = node {
                let _ = write!(label, " node={x}");
            }
            if let Some(x) = ok {
                let _ = write!(label, " ok={x}");
            }
            if let Some(x) = reason {
                let _ = write!(label, " reason={x}");
            }
            if let Some(x) = signer {
                let _ = write!(label, " signer={x}");
            }
            Assertion { label, pass: count_check(n, *min, *max), detail: format!("count {n}, want {}", bounds(*min, *max)) }
        }
        Expect::Role { node, role } => node_pass(
            format!("role {node}={role}"),
            w.addr(node).ok_or(format!("unknown node {node}")).map(|a| {
                let got = w.nodes[a].record.role.as_str();
                (got == role, format!("got {got}"))
            }),
        ),
        Expect::Member { node, member } => node_pass(
            format!("member {node}={member}"),
            w.addr(node).ok_or(format!("unknown node {node}")).map(|a| {
                let got = w.nodes[a].record.is_member();
                (got == *member, format!("got {got}"))
            }),
        ),
        Expect::Revoked { node, revoked } => node_pass(
            format!("revoked {node}={revoked}"),
            w.addr(node).ok_or(format!("unknown node {node}")).map(|a| {
                let got = w.nodes[a].record.revoked;
                (got == *revoked, format!("got {got}"))
            }),
        ),
        Expect::Memberships { prefix, count } => {
            let n = w.nodes.iter().filter(|x| x.record.name.starts_with(prefix.as_str()) && x.record.is_member()).count();
            Assertion { label: format!("memberships {prefix}*"), pass: n == *count, detail: format!("count {n}, want {count}") }
        }
        Expect::Contained { since, node, scope } => {
            let label = format!("contained {node} since {since}");
            let Some(before) = w.checkpoints.get(since) else {
                return Assertion { label, pass: false, detail: format!("no checkpoint `{since}`") };
            };
            let allowed = match scope {
                ContainScope::Subtree => checks::subtree_names(before, node),
                ContainScope::Rotation => checks::rotation_scope(before, node),
                ContainScope::Revocation => checks::revocation_scope(before, node),
            };
            let rep = checks::containment(node, before, &checks::project(w), allowed);
            Assertion { label, pass: rep.holds(), detail: format!("changed {:?} outside {:?}", rep.changed, rep.outside) }
        }
        Expect::CompromiseContained { until } => {
            let after = match until {
                Some(cp) => match w.checkpoints.get(cp) {
                    Some(p) => p.clone(),
                    None => return Assertion { label: "compromise contained".into(), pass: false, detail: format!("no checkpoint `{cp}`") },
                },
                None => checks::project(w),
            };
            match checks::compromise_containment(w, &after) {
                Some(rep) => Assertion {
                    label: rep.label.clone(),
                    pass: rep.holds(),
                    detail: format!("changed {:?} outside {:?}", rep.changed, rep.outside),
                },
                None => Assertion { label: "compromise contained".into(), pass: false, detail: "no compromise happened".into() },
            }
        }
        Expect::Privacy => {
            let r = checks::privacy_scan(w);
            Assertion {
                label: "privacy".into(),
                pass: r.holds(),
                detail: format!("envelopes {} leaks {} storage exposures {}", r.envelopes, r.leaks.len(), r.storage_exposures),
            }
        }
        Expect::Isolation => {
            let r = checks::isolation_check(w);
            let v = r.violations();
            let detail = match v.first() {
                Some(a) => format!("attempts {} violations {} first {} {} -> {}", r.attempts.len(), v.len(), a.op, a.actor, a.target),
                None => format!("attempts {} violations 0", r.attempts.len()),
            };
            Assertion { label: "isolation".into(), pass: v.is_empty() && !r.attempts.is_empty(), detail }
        }
        Expect::Confidential => {
            let a = &w.adversary;
            let pass = a.captured > 0 && a.decrypted.is_empty();
            Assertion {
                label: "confidential".into(),
                pass,
                detail: format!("captured {} opened {}", a.captured, a.decrypted.len()),
            }
        }
        Expect::Trace { contains, min, max } => {
            let n = w.trace.render().lines().filter(|l| l.contains(contains.as_str())).count();
            Assertion {
                label: format!("trace contains `{contains}`"),
                pass: count_check(n, *min, *max),
                detail: format!("count {n}, want {}", bounds(*min, *max)),
            }
        }
    }
}

/// A random single-tenant scenario mixing joins, upgrades, actions,
/// validations, revocations and rotations over a random tree. Used for
/// termination fuzzing.
pub fn fuzz(seed: u64) -> Scenario {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let n = rng.gen_range(5..=30);
    let max_depth = rng.gen_range(2..=5);
    let shape = topology::random_shape(n, max_depth, &mut rng);
    let mut has_kids = vec![false; n];
    for p in shape.iter().flatten() {
        has_kids[*p] = true;
    }
    let name = |i: usize| if i == 0 { "root".to_string() } else { format!("f{i}") };
    let managers: Vec<usize> = (0..n).filter(|i| has_kids[*i]).collect();
    let leaves: Vec<usize> = (1..n).filter(|i| !has_kids[*i]).collect();
    let mut nodes = Vec::new();
    let mut steps = Vec::new();
    let candidates = rng.gen_range(1..=4);
    let mut t = 1u64;
    for c in 0..candidates {
        let cand = format!("cand{c}");
        nodes.push(NodeSpec { name: cand.clone(), kind: NodeKind::Member });
        let m = managers[rng.gen_range(0..managers.len())];
        steps.push(Step { at: t, op: Op::Disclose { from: name(m), to: cand.clone(), invite: true } });
        // some candidates race on the same tick
        let at = t + rng.gen_range(0..3);
        steps.push(Step { at, op: Op::Join { candidate: cand, manager: name(m), mode: RouteMode::DirectIp, info: String::new() } });
        t += rng.gen_range(0..6);
    }
    let ops = rng.gen_range(2..8);
    for _ in 0..ops {
        t += rng.gen_range(1..20);
        let op = match rng.gen_range(0..5) {
            0 if !leaves.is_empty() => Op::Upgrade { leaf: name(leaves[rng.gen_range(0..leaves.len())]), hint: rng.gen_bool(0.5) },
            1 => Op::Action { node: name(rng.gen_range(1..n)), permission: ["read", "write", "admin"][rng.gen_range(0..3)].into() },
            2 => {
                let child = rng.gen_range(1..n);
                let parent = shape[child].unwrap();
                let why = [ReasonSpec::Leave, ReasonSpec::Termination, ReasonSpec::Compromise][rng.gen_range(0..3)];
                Op::Revoke { manager: name(parent), subject: name(child), reason: why }
            }
            3 => Op::Rotate { manager: name(managers[rng.gen_range(0..managers.len())]) },
            _ => {
                let m = managers[rng.gen_range(0..managers.len())];
                let cand = format!("late{t}");
                nodes.push(NodeSpec { name: cand.clone(), kind: NodeKind::Member });
                steps.push(Step { at: t, op: Op::Disclose { from: name(m), to: cand.clone(), invite: true } });
                Op::Join { candidate: cand, manager: name(m), mode: RouteMode::DirectIp, info: String::new() }
            }
        };
        steps.push(Step { at: t, op });
    }
    let edges = (1..n)
        .map(|i| EdgeSpec {
            parent: name(shape[i].unwrap()),
            child: name(i),
            role: if has_kids[i] { RoleSpec::Manager } else { RoleSpec::Leaf },
        })
        .collect();
    Scenario {
        name: format!("fuzz-{seed}"),
        description: String::new(),
        seed: seed & i64::MAX as u64,
        config: SimConfig { max_ticks: 10_000, ..SimConfig::default() },
        tenants: vec![TenantSpec {
            name: "fuzz".into(),
            root: "root".into(),
            model: if rng.gen_bool(0.5) { Model::HierarchicalOnly } else { Model::FullPath },
            open_admission: false,
            policy: PolicySpec { max_depth: max_depth + 2, ..PolicySpec::default() },
            gateway: None,
            storage: vec![],
            validators: vec![],
            balanced: None,
            random: None,
            edges,
            hooks: vec![],
        }],
        nodes,
        links: vec![],
        adversary: AdversarySpec::default(),
        steps,
        expects: vec![],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::MockProvider;

    const SMALL: &str = r#"
name = "small"
seed = 3

[[tenant]]
name = "acme"
root = "root"

[[tenant.edge]]
parent = "root"
child = "m1"
role = "manager"

[[node]]
name = "cand"

[[step]]
at = 0
op = "disclose"
from = "m1"
to = "cand"
invite = true

[[step]]
at = 1
op = "join"
candidate = "cand"
manager = "m1"

[[expect]]
kind = "outcome"
outcome = "join"
node = "cand"
ok = true

[[expect]]
kind = "member"
node = "cand"
member = true
"#;

    #[test]
    fn parses_and_runs() {
        let sc = Scenario::parse(SMALL).unwrap();
        assert_eq!(sc.steps.len(), 2);
        let run = run(&sc, Arc::new(MockProvider), None, None).unwrap();
        assert!(run.passed(), "{}", run.render());
    }

    #[test]
    fn toml_round_trip() {
        let sc = Scenario::parse(SMALL).unwrap();
        assert_eq!(Scenario::parse(&sc.to_toml().unwrap()).unwrap(), sc);
        let f = fuzz(9);
        assert_eq!(Scenario::parse(&f.to_toml().unwrap()).unwrap(), f);
    }

    #[test]
    fn unknown_fields_and_nodes_are_errors() {
        let bad = SMALL.replace("invite = true", "invite = true\nbogus = 1");
        assert!(matches!(Scenario::parse(&bad), Err(ScenarioError::Parse(_))));
        let sc = Scenario::parse(&SMALL.replace("manager = \"m1\"", "manager = \"nobody\"")).unwrap();
        assert!(matches!(run(&sc, Arc::new(MockProvider), None, None), Err(ScenarioError::UnknownNode(_))));
    }
}
