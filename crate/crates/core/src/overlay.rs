//! Routing over the simulated hierarchical overlay. Routing sees only
//! addresses and topology, never payloads.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Index of a node in the simulation.
pub type NodeAddr = usize;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RouteMode {
    /// Known public address: one hop.
    #[default]
    DirectIp,
    /// Unknown location: relay through upper overlay layers.
    OverlayLookup,
    /// Private address: relay through the tenant gateway.
    GatewayRelay,
    /// From the tenant root down the tree path to the destination.
    TreePath,
}

/// Topology facts a route may depend on.
#[derive(Clone, Debug, Default)]
pub struct RouteContext<'a> {
    pub overlay_size: usize,
    /// Children per overlay layer node.
    pub fanout: usize,
    /// Tenant tree path from the root to the destination, root first.
    pub tree_path: Option<&'a [NodeAddr]>,
    pub gateway: Option<NodeAddr>,
}

/// Position of `a` in the overlay hierarchy: layer parent, or `None` at the top.
pub fn overlay_parent(a: NodeAddr, fanout: usize) -> Option<NodeAddr> {
    (a > 0).then(|| (a - 1) / fanout.max(1))
}

fn overlay_ancestors(mut a: NodeAddr, fanout: usize) -> Vec<NodeAddr> {
    let mut out = vec![a];
    while let Some(p) = overlay_parent(a, fanout) {
        out.push(p);
        a = p;
    }
    out
}

/// Hops from `src` to `dest`, excluding `src` and ending with `dest`.
pub fn route(mode: RouteMode, src: NodeAddr, dest: NodeAddr, ctx: &RouteContext<'_>) -> Result<Vec<NodeAddr>> {
    if dest >= ctx.overlay_size {
        return Err(Error::DeliveryFailed(format!("no node at address {dest}")));
    }
    let hops = match mode {
        RouteMode::DirectIp => vec![dest],
        RouteMode::GatewayRelay => {
            let gw = ctx.gateway.ok_or_else(|| Error::DeliveryFailed("no gateway".into()))?;
            if gw == src || gw == dest {
                vec![dest]
            } else {
                vec![gw, dest]
            }
        }
        RouteMode::TreePath => {
            let path = ctx.tree_path.ok_or_else(|| Error::DeliveryFailed("no tree path".into()))?;
            if path.last() != Some(&dest) {
                return Err(Error::DeliveryFailed("tree path does not end at destination".into()));
            }
            path.iter().copied().filter(|a| *a != src).collect()
        }
        RouteMode::OverlayLookup => {
            let up = overlay_ancestors(src, ctx.fanout);
            let down = overlay_ancestors(dest, ctx.fanout);
            let meet = up.iter().position(|a| down.contains(a)).expect("overlay layers share a top node");
            let top = up[meet];
            let mut hops: Vec<NodeAddr> = up[1..=meet].to_vec();
            let below = down.iter().position(|a| *a == top).unwrap();
            hops.extend(down[..below].iter().rev());
            if hops.is_empty() {
                hops.push(dest);
            }
            hops
        }
    };
    Ok(hops)
}
