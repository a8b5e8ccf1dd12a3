//! Acceptance suite. Runs every criterion, prints one line each and exits
//! non-zero if any fails.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use pvtn::adversary::{AdversaryAction, Forgery};
use pvtn::checks::{self, Projection};
use pvtn::crypto::{CryptoProvider, MockProvider, PublicKey, RealProvider};
use pvtn::overlay::{NodeAddr, RouteMode};
use pvtn::protocol::upgrade::Policy;
use pvtn::scenario::{self, Scenario};
use pvtn::sim::{Directive, NodeKind, OutcomeKind, SimConfig, World};
use pvtn::snapshot::Snapshot;
use pvtn::topology;
use pvtn::tree::{DelegationModel, RevocationReason, Role};

type Verdict = Result<String, String>;
type Criterion = (&'static str, fn() -> Verdict);

fn mock() -> Arc<dyn CryptoProvider> {
    Arc::new(MockProvider)
}

fn scenarios_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios")
}

fn toml_files(dir: &Path) -> Vec<PathBuf> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "toml"))
        .collect();
    out.sort();
    out
}

fn bundled() -> Vec<(String, Scenario)> {
    let mut out = Vec::new();
    for sub in ["threat", "golden"] {
        for p in toml_files(&scenarios_dir().join(sub)) {
            let sc = Scenario::parse(&std::fs::read_to_string(&p).unwrap()).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
            out.push((format!("{sub}/{}", sc.name), sc));
        }
    }
    out
}

fn run_scenario(sc: &Scenario, provider: Arc<dyn CryptoProvider>) -> scenario::Run {
    scenario::run(sc, provider, None, None).unwrap_or_else(|e| panic!("{}: {e}", sc.name))
}

/// A random single-tenant world. Returns the world, the shape and the
/// address of each shape index.
fn random_tree(seed: u64, nodes: std::ops::RangeInclusive<usize>, max_depth: u32) -> (World, Vec<Option<usize>>, Vec<NodeAddr>, ChaCha20Rng) {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let n = rng.gen_range(nodes);
    let depth = rng.gen_range(1..=max_depth);
    let shape = topology::random_shape(n, depth, &mut rng);
    let mut w = World::new(mock(), seed, SimConfig::default());
    let root = w.add_tenant("acme", "root", DelegationModel::HierarchicalOnly, Policy::default());
    let addrs = topology::provision_shape(&mut w, root, "n", &shape).unwrap();
    (w, shape, addrs, rng)
}

fn descendants(shape: &[Option<usize>], i: usize) -> BTreeSet<usize> {
    let mut out = BTreeSet::from([i]);
    let mut grew = true;
    while grew {
        grew = false;
        for (j, p) in shape.iter().enumerate() {
            if p.is_some_and(|p| out.contains(&p)) && out.insert(j) {
                grew = true;
            }
        }
    }
    out
}

fn changed(before: &Projection, after: &Projection) -> BTreeSet<String> {
    let names: BTreeSet<&String> = before.keys().chain(after.keys()).collect();
    names.into_iter().filter(|n| before.get(*n) != after.get(*n)).cloned().collect()
}

fn names(w: &World, addrs: &[NodeAddr], idx: impl IntoIterator<Item = usize>) -> BTreeSet<String> {
    idx.into_iter().map(|i| w.name(addrs[i]).to_string()).collect()
}

fn joined(w: &World, name: &str) -> Vec<bool> {
    w.outcomes.iter().filter(|o| o.kind == OutcomeKind::Join && o.node == name).map(|o| o.ok).collect()
}

/// Trace fields of a rendered line, split on the column separator.
fn fields(line: &str) -> Vec<&str> {
    line.split(" | ").collect()
}

fn conflict_equivalence() -> Verdict {
    let start = Instant::now();
    let seeds = 1000..1200u64;
    let mut mismatches = Vec::new();
    let (mut approve, mut reject) = (0, 0);
    for seed in seeds.clone() {
        let (mut w, shape, addrs, mut rng) = random_tree(seed, 5..=60, 6);
        let tenant = w.nodes[addrs[0]].record.tenant;
        let managers: Vec<usize> = (0..shape.len()).filter(|i| i == &0 || shape.contains(&Some(*i))).collect();
        let mgr = addrs[managers[rng.gen_range(0..managers.len())]];
        let cand = if rng.gen_bool(0.5) {
            w.add_node("cand", NodeKind::Member)
        } else {
            let twin = addrs[rng.gen_range(0..addrs.len())];
            let keys = w.nodes[twin].record.keys.clone();
            w.add_node_with_keys("cand", NodeKind::Member, keys)
        };
        let pk = w.nodes[cand].record.public().clone();
        // whole-tree scan on raw key bytes
        let conflict = w
            .nodes
            .iter()
            .filter(|n| n.addr != cand && n.record.tenant == tenant && !n.record.revoked)
            .any(|n| n.record.public().as_bytes() == pk.as_bytes());
        w.schedule(0, Directive::Disclose { from: mgr, to: cand, invite: true });
        w.schedule(1, Directive::Join { candidate: cand, manager: mgr, mode: RouteMode::DirectIp, info: vec![] });
        w.run().map_err(|e| format!("seed {seed}: {e}"))?;
        let got = joined(&w, "cand");
        if got.len() != 1 || got[0] == conflict {
            mismatches.push(format!("seed {seed} (n={}, conflict={conflict}, outcomes {got:?})", shape.len()));
        }
        if conflict {
            reject += 1;
        } else {
            approve += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let summary = format!(
        "{}/200 match, {approve} approve / {reject} reject, seeds {}..{}, {secs:.1}s",
        200 - mismatches.len(),
        seeds.start,
        seeds.end - 1
    );
    if !mismatches.is_empty() {
        return Err(format!("{summary}; first {}", mismatches[0]));
    }
    if secs >= 30.0 {
        return Err(format!("{summary}; over the 30 s budget"));
    }
    Ok(summary)
}

/// Two tenants sharing the overlay with some traffic in each, a foreign
/// root that learned the other root's key and tried to join, and a bridge.
fn two_tenant_world(seed: u64, a: &[Option<usize>], b: &[Option<usize>], bridge: bool) -> World {
    let mut w = World::new(mock(), seed, SimConfig::default());
    let ra = w.add_tenant("alpha", "ra", DelegationModel::HierarchicalOnly, Policy::default());
    let an = topology::provision_shape(&mut w, ra, "a", a).unwrap();
    let rb = w.add_tenant("beta", "rb", DelegationModel::HierarchicalOnly, Policy::default());
    let bn = topology::provision_shape(&mut w, rb, "b", b).unwrap();
    w.schedule(0, Directive::Adversary(AdversaryAction::Eavesdrop));
    for (tag, nodes, shape) in [("ca", &an, a), ("cb", &bn, b)] {
        if shape.len() < 15 {
            let c = w.add_node(tag, NodeKind::Member);
            let mgr = nodes[*shape.iter().flatten().max().unwrap_or(&0)];
            w.schedule(1, Directive::Disclose { from: mgr, to: c, invite: true });
            w.schedule(2, Directive::Join { candidate: c, manager: mgr, mode: RouteMode::DirectIp, info: vec![] });
        }
    }
    w.schedule(1, Directive::Disclose { from: ra, to: rb, invite: false });
    w.schedule(2, Directive::Join { candidate: rb, manager: ra, mode: RouteMode::DirectIp, info: vec![] });
    if bridge {
        let foreign = *bn.last().unwrap();
        w.schedule(60, Directive::Disclose { from: ra, to: foreign, invite: false });
        w.schedule(60, Directive::Disclose { from: foreign, to: ra, invite: false });
        w.schedule(61, Directive::Bridge { issuer: ra, foreign, permission: "read".into(), duration: 200 });
        w.schedule(70, Directive::BridgeAccess { foreign, issuer: ra, permission: "read".into() });
    }
    w
}

fn balanced_shape(depth: u32) -> Vec<Option<usize>> {
    let mut shape = vec![None];
    for i in 1..(1usize << (depth + 1)) - 1 {
        shape.push(Some((i - 1) / 2));
    }
    shape
}

fn isolation() -> Verdict {
    let mut shapes: Vec<Vec<Option<usize>>> = (0..4).map(balanced_shape).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(2);
    for _ in 0..6 {
        let n = rng.gen_range(2..=15);
        shapes.push(topology::random_shape(n, rng.gen_range(1..=4), &mut rng));
    }
    let (mut worlds, mut attempts) = (0, 0);
    let mut ops = BTreeSet::new();
    for (i, a) in shapes.iter().enumerate() {
        for (j, b) in shapes.iter().enumerate() {
            let seed = (i * shapes.len() + j) as u64;
            let mut w = two_tenant_world(seed, a, b, (i + j) % 2 == 0);
            w.run().map_err(|e| format!("world {seed}: {e}"))?;
            let rep = checks::isolation_check(&w);
            if !rep.holds() {
                let v = rep.violations()[0];
                return Err(format!("world {seed}: {} violations, first {} {} -> {}", rep.violations().len(), v.op, v.actor, v.target));
            }
            let snap = Snapshot::of(&w).isolation_violations();
            if !snap.is_empty() {
                return Err(format!("world {seed}: {}", snap[0]));
            }
            if joined(&w, "rb").iter().any(|ok| *ok) {
                return Err(format!("world {seed}: foreign root joined"));
            }
            attempts += rep.attempts.len();
            ops.extend(rep.attempts.iter().map(|a| a.op));
            worlds += 1;
        }
    }
    for op in ["join", "decrypt", "verify", "enumerate"] {
        if !ops.contains(op) {
            return Err(format!("no {op} attempts exercised"));
        }
    }
    Ok(format!("{worlds} worlds, {attempts} cross-tenant attempts, 0 violations"))
}

/// Probe processing lines per (node, trace id, direction, h); each must
/// appear at most once.
fn probe_census(trace: &str) -> Result<usize, String> {
    let mut seen: BTreeMap<(String, String, String), usize> = BTreeMap::new();
    for line in trace.lines() {
        let f = fields(line);
        if f.len() == 7 && f[1] == "state" && f[6].starts_with("probe ") {
            *seen.entry((f[2].to_string(), f[5].to_string(), f[6].to_string())).or_default() += 1;
        }
    }
    match seen.iter().find(|(_, n)| **n > 1) {
        Some(((node, trace_id, what), n)) => Err(format!("{node} processed {what} of {trace_id} {n} times")),
        None => Ok(seen.len()),
    }
}

fn termination() -> Verdict {
    let mut runs: Vec<(String, Scenario)> = bundled();
    runs.extend((0..100u64).map(|s| (format!("fuzz seed {s}"), scenario::fuzz(s))));
    let mut probes = 0;
    for (label, sc) in &runs {
        let run = run_scenario(sc, mock());
        let report = run.report.as_ref().map_err(|e| format!("{label}: {e}"))?;
        let bound = sc.config.max_ticks;
        if report.final_tick > bound {
            return Err(format!("{label}: final tick {} beyond {bound}", report.final_tick));
        }
        if let Some(v) = report.violations.first() {
            return Err(format!("{label}: {v}"));
        }
        probes += probe_census(&run.world.trace.render()).map_err(|e| format!("{label}: {e}"))?;
    }
    Ok(format!("{} scenarios quiescent, {probes} probe arrivals, 0 duplicates processed", runs.len()))
}

fn threat_table() -> Verdict {
    let files = toml_files(&scenarios_dir().join("threat"));
    let mut failed = Vec::new();
    for p in &files {
        let sc = Scenario::parse(&std::fs::read_to_string(p).unwrap()).map_err(|e| e.to_string())?;
        let run = run_scenario(&sc, mock());
        if !run.passed() {
            let first = run.assertions.iter().find(|a| !a.pass).map(|a| a.label.clone()).unwrap_or_default();
            failed.push(format!("{} ({first})", sc.name));
        }
    }
    if files.len() != 8 {
        return Err(format!("{} threat scenarios, want 8", files.len()));
    }
    if !failed.is_empty() {
        return Err(format!("failed: {}", failed.join(", ")));
    }
    Ok("8/8 mitigations fire".into())
}

fn no_self_promotion() -> Verdict {
    let (mut promotions, mut self_issued, mut injected) = (0, 0, 0);
    let mut first = None;
    for run in 0..500u64 {
        let (mut w, shape, addrs, mut rng) = random_tree(5000 + run, 3..=15, 3);
        let leaves: Vec<usize> = (1..shape.len()).filter(|i| !shape.contains(&Some(*i))).collect();
        let leaf = addrs[leaves[rng.gen_range(0..leaves.len())]];
        let name = w.name(leaf).to_string();
        let leaf_id = w.nodes[leaf].record.node_id;
        w.schedule(1, Directive::Adversary(AdversaryAction::Inject(Forgery::LeafFuzz { leaf, runs: 6, seed: run })));
        w.run().map_err(|e| format!("run {run}: {e}"))?;
        injected += w.adversary.injected;
        let promoted = w.outcomes.iter().any(|o| o.kind == OutcomeKind::Promotion && o.ok && o.node == name)
            || w.nodes[leaf].record.role != Role::Leaf;
        let issued_by_leaf = w
            .nodes
            .iter()
            .flat_map(|n| {
                let r = &n.record;
                r.cert.iter().chain(r.cert_chain.iter().flatten()).chain(r.issued.values())
            })
            .filter(|c| c.issuer_pk_digest == leaf_id)
            .count();
        if promoted {
            promotions += 1;
        }
        self_issued += issued_by_leaf;
        if (promoted || issued_by_leaf > 0) && first.is_none() {
            first = Some(run);
        }
    }
    let summary = format!("500 runs, {injected} crafted messages, {promotions} promotions, {self_issued} leaf-issued certificates");
    match first {
        Some(run) => Err(format!("{summary}; first at run {run}")),
        None if injected == 0 => Err(format!("{summary}; nothing was injected")),
        None => Ok(summary),
    }
}

fn containment_fixture(seed: u64) -> Result<(), String> {
    // compromise: adversary with a manager's keys
    let (mut w, shape, addrs, mut rng) = random_tree(seed, 5..=40, 5);
    let managers: Vec<usize> = (1..shape.len()).filter(|i| shape.contains(&Some(*i))).collect();
    if let Some(&m) = managers.get(rng.gen_range(0..managers.len().max(1))) {
        let before = checks::project(&w);
        let victim = addrs[m];
        w.schedule(1, Directive::Adversary(AdversaryAction::Compromise { node: victim }));
        w.schedule(2, Directive::Adversary(AdversaryAction::Inject(Forgery::CompromiseProbe { victim })));
        w.run().map_err(|e| e.to_string())?;
        let after = checks::project(&w);
        let allowed = names(&w, &addrs, descendants(&shape, m));
        let outside: Vec<_> = changed(&before, &after).difference(&allowed).cloned().collect();
        let reported = checks::compromise_containment(&w, &after).ok_or("no compromise baseline")?;
        if !outside.is_empty() || !reported.holds() {
            return Err(format!("compromise of {}: changed outside {outside:?}, report {}", w.name(victim), reported.render()));
        }
    }
    // revocation by the parent
    let (mut w, shape, addrs, mut rng) = random_tree(seed, 5..=40, 5);
    let s = rng.gen_range(1..shape.len());
    let parent = shape[s].unwrap();
    let before = checks::project(&w);
    w.schedule(1, Directive::Revoke { manager: addrs[parent], subject: addrs[s], reason: RevocationReason::Termination });
    w.run().map_err(|e| e.to_string())?;
    let after = checks::project(&w);
    let mut allowed = names(&w, &addrs, descendants(&shape, s));
    allowed.insert(w.name(addrs[parent]).to_string());
    let outside: Vec<_> = changed(&before, &after).difference(&allowed).cloned().collect();
    let subject = w.name(addrs[s]).to_string();
    let reported = checks::containment("revocation", &before, &after, checks::revocation_scope(&before, &subject));
    if !outside.is_empty() || !reported.holds() || !after[&subject].revoked {
        return Err(format!("revocation of {subject}: changed outside {outside:?}, revoked {}", after[&subject].revoked));
    }
    // rotation of a manager's key
    let (mut w, shape, addrs, mut rng) = random_tree(seed, 5..=40, 5);
    let managers: Vec<usize> = (0..shape.len()).filter(|i| shape.contains(&Some(*i))).collect();
    let m = managers[rng.gen_range(0..managers.len())];
    let before = checks::project(&w);
    w.schedule(1, Directive::Rotate { manager: addrs[m] });
    w.run().map_err(|e| e.to_string())?;
    let after = checks::project(&w);
    let scope = shape.iter().enumerate().filter(|(_, p)| **p == Some(m)).map(|(j, _)| j).chain([m]).chain(shape[m]);
    let allowed = names(&w, &addrs, scope);
    let outside: Vec<_> = changed(&before, &after).difference(&allowed).cloned().collect();
    let name = w.name(addrs[m]).to_string();
    let reported = checks::containment("rotation", &before, &after, checks::rotation_scope(&before, &name));
    let rotated = w.outcomes.iter().any(|o| o.kind == OutcomeKind::Rotation && o.ok && o.node == name);
    if !outside.is_empty() || !reported.holds() || !rotated {
        return Err(format!("rotation of {name}: changed outside {outside:?}, rotated {rotated}"));
    }
    Ok(())
}

fn containment() -> Verdict {
    let seeds = 7000..7050u64;
    let mut failures = Vec::new();
    for seed in seeds.clone() {
        if let Err(e) = containment_fixture(seed) {
            failures.push(format!("seed {seed}: {e}"));
        }
    }
    match failures.first() {
        Some(f) => Err(format!("{}/50 contained; {f}", 50 - failures.len())),
        None => Ok(format!("50/50 fixtures contained (compromise, revocation, rotation), seeds {}..{}", seeds.start, seeds.end - 1)),
    }
}

fn contains(hay: &[u8], needle: &[u8]) -> bool {
    !needle.is_empty() && hay.windows(needle.len()).any(|w| w == needle)
}

fn privacy() -> Verdict {
    let (mut envelopes, mut storage_runs) = (0, 0);
    for (label, sc) in bundled() {
        let run = run_scenario(&sc, mock());
        let w = &run.world;
        let rep = checks::privacy_scan(w);
        if let Some(l) = rep.leaks.first() {
            return Err(format!("{label}: {l}"));
        }
        if rep.storage_exposures > 0 {
            return Err(format!("{label}: {} identities exposed to storage", rep.storage_exposures));
        }
        // raw byte scan of the wire: a key may appear in clear only as the
        // sender's or recipient's own
        let ids = w.identity_keys();
        for r in &w.wire {
            for (pk, owner) in &ids {
                if *owner != r.from && *owner != r.to && contains(&r.bytes, pk.as_bytes()) {
                    return Err(format!("{label}: key of {} in clear on {} -> {} at {}", w.name(*owner), w.name(r.from), w.name(r.to), r.tick));
                }
            }
        }
        for n in w.nodes.iter().filter(|n| n.kind == NodeKind::Storage) {
            storage_runs += 1;
            let gateways: BTreeSet<&PublicKey> = w.tenants.iter().filter_map(|t| t.gateway).map(|g| w.nodes[g].record.public()).collect();
            if let Some(k) = n.record.known_keys.iter().find(|k| !gateways.contains(k)) {
                return Err(format!("{label}: storage {} knows {}", n.record.name, k.digest().short()));
            }
        }
        envelopes += rep.envelopes;
    }
    Ok(format!("{envelopes} envelopes scanned, 0 leaks; {storage_runs} storage nodes saw only gateway keys"))
}

fn determinism() -> Verdict {
    let mut checked = 0;
    for (label, sc) in bundled() {
        for provider in [mock(), Arc::new(RealProvider) as Arc<dyn CryptoProvider>] {
            let a = run_scenario(&sc, provider.clone()).render();
            let b = run_scenario(&sc, provider).render();
            if a != b {
                return Err(format!("{label}: two runs differ"));
            }
            checked += 1;
        }
    }
    let dir = scenarios_dir().join("golden");
    let files = toml_files(&dir);
    if files.len() != 10 {
        return Err(format!("{} golden scenarios, want 10", files.len()));
    }
    for p in &files {
        let sc = Scenario::parse(&std::fs::read_to_string(p).unwrap()).map_err(|e| e.to_string())?;
        let golden = p.with_extension("trace");
        let want = std::fs::read_to_string(&golden).map_err(|e| format!("{}: {e}", golden.display()))?;
        if run_scenario(&sc, mock()).render() != want {
            return Err(format!("{} differs from its golden trace", sc.name));
        }
    }
    Ok(format!("{checked} repeat runs identical, 10/10 golden traces match"))
}

fn message_complexity() -> Verdict {
    let mut w = World::new(mock(), 4, SimConfig::default());
    let root = w.add_tenant("acme", "root", DelegationModel::HierarchicalOnly, Policy::default());
    let nodes = topology::balanced(&mut w, root, "n", 2, 4).unwrap();
    let n = nodes.len();
    let depth = 4;
    let cand = w.add_node("cand", NodeKind::Member);
    let mgr = nodes[n - 1];
    let mgr = w.addr_of(&w.nodes[mgr].record.parent.clone().unwrap(), mgr).unwrap();
    w.schedule(0, Directive::Disclose { from: mgr, to: cand, invite: true });
    w.schedule(1, Directive::Join { candidate: cand, manager: mgr, mode: RouteMode::DirectIp, info: vec![] });
    w.run().map_err(|e| e.to_string())?;
    if joined(&w, "cand") != [true] {
        return Err("join did not complete".into());
    }
    let sends = w.trace.render().lines().filter(|l| fields(l).get(1) == Some(&"send")).count();
    let bound = 2 * n + 2 * depth;
    let summary = format!("N={n}, depth {depth}: {sends} sends, bound {bound}");
    if sends <= bound {
        Ok(summary)
    } else {
        Err(summary)
    }
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("conflict detection equals whole-tree scan", conflict_equivalence),
        ("cross-tenant isolation", isolation),
        ("termination and probe uniqueness", termination),
        ("threat table", threat_table),
        ("no self-promotion", no_self_promotion),
        ("containment", containment),
        ("privacy scans", privacy),
        ("determinism and golden traces", determinism),
        ("join message complexity", message_complexity),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let verdict = std::panic::catch_unwind(check).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = start.elapsed().as_secs_f64();
        match verdict {
            Ok(d) => println!("criterion {} {name}: PASS ({d}) [{secs:.1}s]", i + 1),
            Err(d) => {
                failed += 1;
                println!("criterion {} {name}: FAIL ({d}) [{secs:.1}s]", i + 1);
            }
        }
    }
    println!("acceptance: {}/9 criteria pass", 9 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
