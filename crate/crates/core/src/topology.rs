//! Tree builders for fixtures, scenarios and the acceptance suite.

use rand::Rng;

use crate::error::Result;
use crate::sim::{NodeKind, World};
use crate::overlay::NodeAddr;
use crate::tree::Role;

/// Provisions a complete `branching`-ary tree of the given depth under
/// `root` (depth 0 is the root alone). Interior nodes are managers, the
/// last level is leaves. Returns every node, root first, level by level.
pub fn balanced(w: &mut World, root: NodeAddr, prefix: &str, branching: usize, depth: u32) -> Result<Vec<NodeAddr>> {
    let mut all = vec![root];
    let mut level = vec![root];
    for d in 1..=depth {
        let role = if d == depth { Role::Leaf } else { Role::Manager };
        let mut next = Vec::new();
        for parent in level {
            for _ in 0..branching {
                let name = format!("{prefix}{}", all.len());
                let a = w.add_node(&name, NodeKind::Member);
                w.provision(parent, a, role)?;
                next.push(a);
                all.push(a);
            }
        }
        level = next;
    }
    Ok(all)
}

/// Random parent array for a tree of `n` nodes with depth at most
/// `max_depth`. Entry 0 is the root; every other node picks a uniformly
/// random earlier node with room below it.
pub fn random_shape(n: usize, max_depth: u32, rng: &mut impl Rng) -> Vec<Option<usize>> {
    let mut parent = vec![None];
    let mut depth = vec![0u32];
    for _ in 1..n {
        let open: Vec<usize> = (0..depth.len()).filter(|i| depth[*i] < max_depth).collect();
        let p = open[rng.gen_range(0..open.len())];
        parent.push(Some(p));
        depth.push(depth[p] + 1);
    }
    parent
}

/// Provisions `shape` under `root`. Nodes with children become managers.
pub fn provision_shape(w: &mut World, root: NodeAddr, prefix: &str, shape: &[Option<usize>]) -> Result<Vec<NodeAddr>> {
    let mut has_kids = vec![false; shape.len()];
    for p in shape.iter().flatten() {
        has_kids[*p] = true;
    }
    let mut all = vec![root];
    for (i, p) in shape.iter().enumerate().skip(1) {
        let parent = all[p.expect("only the root lacks a parent")];
        let a = w.add_node(&format!("{prefix}{i}"), NodeKind::Member);
        let role = if has_kids[i] { Role::Manager } else { Role::Leaf };
        w.provision(parent, a, role)?;
        all.push(a);
    }
    Ok(all)
}
