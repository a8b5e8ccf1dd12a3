use std::sync::Arc;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use pvtn::checks;
use pvtn::crypto::MockProvider;
use pvtn::overlay::RouteMode;
use pvtn::protocol::upgrade::Policy;
use pvtn::scenario::{self, Scenario};
use pvtn::sim::{Directive, NodeKind, OutcomeKind, SimConfig, World};
use pvtn::snapshot::Snapshot;
use pvtn::topology;
use pvtn::trace::Trace;
use pvtn::tree::DelegationModel;

fn tree(seed: u64, n: usize, depth: u32) -> (World, Vec<Option<usize>>, Vec<usize>) {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let shape = topology::random_shape(n, depth, &mut rng);
    let mut w = World::new(Arc::new(MockProvider), seed, SimConfig::default());
    let root = w.add_tenant("acme", "root", DelegationModel::HierarchicalOnly, Policy::default());
    let addrs = topology::provision_shape(&mut w, root, "n", &shape).unwrap();
    (w, shape, addrs)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn fuzzed_scenarios_survive_toml(seed in any::<u64>()) {
        let sc = scenario::fuzz(seed);
        prop_assert_eq!(Scenario::parse(&sc.to_toml().unwrap()).unwrap(), sc);
    }

    #[test]
    fn fuzzed_runs_are_reproducible_and_parse_back(seed in 0u64..10_000) {
        let sc = scenario::fuzz(seed);
        let a = scenario::run(&sc, Arc::new(MockProvider), None, None).unwrap();
        let b = scenario::run(&sc, Arc::new(MockProvider), None, None).unwrap();
        prop_assert_eq!(a.render(), b.render());
        let text = a.world.trace.render();
        prop_assert_eq!(Trace::parse(&text).unwrap().render(), text);
        let snap = Snapshot::of(&a.world);
        prop_assert_eq!(Snapshot::parse(&snap.render()).unwrap(), snap);
    }

    #[test]
    fn fresh_candidate_is_admitted_exactly_once(seed in any::<u64>(), n in 2usize..40, depth in 1u32..6, pick in any::<prop::sample::Index>()) {
        let (mut w, shape, addrs) = tree(seed, n, depth);
        let managers: Vec<usize> = (0..shape.len()).filter(|i| *i == 0 || shape.contains(&Some(*i))).collect();
        let mgr = addrs[managers[pick.index(managers.len())]];
        let cand = w.add_node("cand", NodeKind::Member);
        w.schedule(0, Directive::Disclose { from: mgr, to: cand, invite: true });
        w.schedule(1, Directive::Join { candidate: cand, manager: mgr, mode: RouteMode::DirectIp, info: vec![] });
        let r = w.run().unwrap();
        prop_assert!(r.violations.is_empty(), "{:?}", r.violations);
        let joins: Vec<bool> = w.outcomes.iter().filter(|o| o.kind == OutcomeKind::Join).map(|o| o.ok).collect();
        prop_assert_eq!(joins, vec![true]);
        prop_assert_eq!(w.nodes[cand].record.depth, w.nodes[mgr].record.depth + 1);
        prop_assert!(w.duplicate_probes.is_empty());
    }

    #[test]
    fn revocation_changes_only_subtree_and_parent(seed in any::<u64>(), n in 2usize..40, depth in 1u32..6, pick in any::<prop::sample::Index>()) {
        let (mut w, shape, addrs) = tree(seed, n, depth);
        let s = 1 + pick.index(shape.len() - 1);
        let parent = shape[s].unwrap();
        let before = checks::project(&w);
        w.schedule(1, Directive::Revoke { manager: addrs[parent], subject: addrs[s], reason: pvtn::tree::RevocationReason::Compromise });
        w.run().unwrap();
        let after = checks::project(&w);
        let name = w.name(addrs[s]).to_string();
        let rep = checks::containment("revocation", &before, &after, checks::revocation_scope(&before, &name));
        prop_assert!(rep.holds(), "{}", rep.render());
        prop_assert!(after[&name].revoked);
    }
}
