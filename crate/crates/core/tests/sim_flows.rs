use std::sync::Arc;

use pvtn::crypto::MockProvider;
use pvtn::overlay::RouteMode;
use pvtn::protocol::upgrade::Policy;
use pvtn::sim::{Directive, NodeKind, OutcomeKind, SimConfig, World};
use pvtn::topology;
use pvtn::trace::EventKind;
use pvtn::tree::{DelegationModel, RevocationReason, Role};

fn world(seed: u64) -> World {
    World::new(Arc::new(MockProvider), seed, SimConfig::default())
}

fn joined(w: &World, name: &str) -> bool {
    w.outcomes.iter().any(|o| o.kind == OutcomeKind::Join && o.node == name && o.ok)
}

fn dump(w: &World) -> String {
    w.trace.render()
}

#[test]
fn join_under_a_leaf_manager() {
    let mut w = world(1);
    let root = w.add_tenant("acme", "root", DelegationModel::HierarchicalOnly, Policy::default());
    let nodes = topology::balanced(&mut w, root, "n", 2, 2).unwrap();
    let mgr = nodes[1];
    let cand = w.add_node("cand", NodeKind::Member);
    w.schedule(0, Directive::Disclose { from: mgr, to: cand, invite: true });
    w.schedule(1, Directive::Join { candidate: cand, manager: mgr, mode: RouteMode::DirectIp, info: b"hi".to_vec() });
    let r = w.run().unwrap();
    assert!(r.violations.is_empty(), "{:?}", r.violations);
    assert!(joined(&w, "cand"), "{}", dump(&w));
    assert_eq!(w.nodes[cand].record.role, Role::Leaf);
    assert_eq!(w.nodes[cand].record.depth, 2);
}

#[test]
fn uninvited_candidate_is_rejected() {
    let mut w = world(2);
    let root = w.add_tenant("acme", "root", DelegationModel::HierarchicalOnly, Policy::default());
    let cand = w.add_node("cand", NodeKind::Member);
    w.schedule(0, Directive::Disclose { from: root, to: cand, invite: false });
    w.schedule(1, Directive::Join { candidate: cand, manager: root, mode: RouteMode::DirectIp, info: vec![] });
    w.run().unwrap();
    assert!(!joined(&w, "cand"));
    assert!(w.nodes[cand].record.tenant.is_none());
}

#[test]
fn duplicate_key_is_rejected() {
    let mut w = world(3);
    let root = w.add_tenant("acme", "root", DelegationModel::HierarchicalOnly, Policy::default());
    let nodes = topology::balanced(&mut w, root, "n", 2, 3).unwrap();
    let existing = nodes[5];
    let keys = w.nodes[existing].record.keys.clone();
    let clone = w.add_node_with_keys("clone", NodeKind::Member, keys);
    let mgr = nodes[2];
    w.schedule(0, Directive::Disclose { from: mgr, to: clone, invite: true });
    w.schedule(1, Directive::Join { candidate: clone, manager: mgr, mode: RouteMode::DirectIp, info: vec![] });
    let r = w.run().unwrap();
    assert!(r.violations.is_empty(), "{:?}", r.violations);
    assert!(!joined(&w, "clone"), "{}", dump(&w));
}

#[test]
fn balanced_31_join_message_count() {
    let mut w = world(4);
    let root = w.add_tenant("acme", "root", DelegationModel::HierarchicalOnly, Policy::default());
    let nodes = topology::balanced(&mut w, root, "n", 2, 4).unwrap();
    assert_eq!(nodes.len(), 31);
    let mgr = nodes[7]; // depth 3
    let cand = w.add_node("cand", NodeKind::Member);
    w.schedule(0, Directive::Disclose { from: mgr, to: cand, invite: true });
    w.schedule(1, Directive::Join { candidate: cand, manager: mgr, mode: RouteMode::DirectIp, info: vec![] });
    w.run().unwrap();
    assert!(joined(&w, "cand"), "{}", dump(&w));
    let sends = w.trace.of_kind(EventKind::Send).count();
    assert!(sends <= 70, "{sends}\n{}", dump(&w));
    // request + probes up to the root + one probe and one answer per
    // non-root manager + one decision per tree edge + the result
    let managers = nodes[1..15].len();
    let edges = nodes.len() - 1;
    let manager_depth = 3;
    assert_eq!(sends, 1 + manager_depth + 2 * managers + edges + 1);
}

#[test]
fn upgrade_action_and_validation() {
    let mut w = world(5);
    let root = w.add_tenant("acme", "root", DelegationModel::HierarchicalOnly, Policy::default());
    let nodes = topology::balanced(&mut w, root, "n", 2, 3).unwrap();
    let leaf = nodes[8];
    let gw = w.add_node("gw", NodeKind::Gateway);
    w.set_gateway(0, gw);
    let v = w.add_node("val", NodeKind::Validator);
    w.attach_to_gateway(v, 0);
    w.schedule(1, Directive::Upgrade { leaf, hint: true });
    w.schedule(40, Directive::Action { node: leaf, permission: "read".into() });
    w.schedule(80, Directive::Validate { node: leaf, validator: v, permission: "read".into() });
    let r = w.run().unwrap();
    assert!(r.violations.is_empty(), "{:?}", r.violations);
    let ok = |k| w.outcomes.iter().any(|o| o.kind == k && o.ok);
    assert!(ok(OutcomeKind::Promotion), "{}", dump(&w));
    assert!(ok(OutcomeKind::ActionCert), "{}", dump(&w));
    assert!(ok(OutcomeKind::Validation), "{}", dump(&w));
    assert_eq!(w.nodes[v].state.gateway_verifications, 1);
}

#[test]
fn storage_access_and_impersonation() {
    let mut w = world(6);
    let root = w.add_tenant("acme", "root", DelegationModel::HierarchicalOnly, Policy::default());
    let nodes = topology::balanced(&mut w, root, "n", 2, 2).unwrap();
    let leaf = nodes[4];
    let other = nodes[5];
    let gw = w.add_node("gw", NodeKind::Gateway);
    w.set_gateway(0, gw);
    let st = w.add_node("store", NodeKind::Storage);
    w.attach_to_gateway(st, 0);
    w.schedule(1, Directive::Action { node: leaf, permission: "read".into() });
    w.schedule(40, Directive::Storage { node: leaf, storage: st, permission: "read".into() });
    w.schedule(120, Directive::Impersonate { attacker: other, victim: leaf, storage: st });
    let r = w.run().unwrap();
    assert!(r.violations.is_empty(), "{:?}", r.violations);
    let storage: Vec<_> = w.outcomes.iter().filter(|o| o.kind == OutcomeKind::Storage).collect();
    assert!(storage.iter().any(|o| o.ok), "{}", dump(&w));
    assert!(storage.iter().any(|o| !o.ok), "{}", dump(&w));
    assert!(w.nodes[st].record.known_keys.iter().all(|k| k == w.nodes[gw].record.public()));
}

#[test]
fn revocation_and_rotation() {
    let mut w = world(7);
    let root = w.add_tenant("acme", "root", DelegationModel::HierarchicalOnly, Policy::default());
    let nodes = topology::balanced(&mut w, root, "n", 2, 3).unwrap();
    let subject = nodes[1];
    let rot = nodes[2];
    w.schedule(1, Directive::Revoke { manager: root, subject, reason: RevocationReason::Compromise });
    w.schedule(30, Directive::Rotate { manager: rot });
    let r = w.run().unwrap();
    assert!(r.violations.is_empty(), "{:?}", r.violations);
    assert!(w.nodes[subject].record.revoked, "{}", dump(&w));
    for a in [nodes[3], nodes[4], nodes[7], nodes[8]] {
        assert!(w.nodes[a].record.revoked, "{} not revoked\n{}", w.name(a), dump(&w));
    }
    assert!(!w.nodes[nodes[5]].record.revoked);
    assert!(w.outcomes.iter().any(|o| o.kind == OutcomeKind::Rotation && o.ok), "{}", dump(&w));
    let new_pk = w.nodes[rot].record.public().clone();
    assert_eq!(w.nodes[nodes[5]].record.parent.as_ref(), Some(&new_pk));
    assert!(w.nodes[root].record.children.contains_key(&new_pk));
}
