//! Upgrade handlers. A leaf can only hint; P0 starts a run when the
//! scenario gives it consent for that leaf.

use crate::crypto::{Nonce, PublicKey};
use crate::error::{Error, Result};
use crate::messages::{Body, UpgradeForward, UpgradeGrant};
use crate::messaging::TraceId;
use crate::overlay::NodeAddr;
use crate::protocol::upgrade::{
    issue_upgrade_cert, layer_verify, leaf_request_upgrade, parent_sign_upgrade, root_upgrade_decide, LayerInput, LayerOutcome,
    PendingUpgrade, UpgradeDecision, UpgradeHint,
};
use crate::trace::EventKind;
use crate::tree::{apply_promotion, leaf_hash, promote_record, Role};

use super::{Incoming, Out, OutcomeKind, World};

impl World {
    /// Directive: P0 consents to upgrading `leaf`. With `hint`, the leaf
    /// first sends its informational request and P0 acts on receipt.
    pub(crate) fn start_upgrade(&mut self, leaf: NodeAddr, hint: bool) -> Result<()> {
        let parent = self.nodes[leaf].record.parent.clone().ok_or(Error::NoParent)?;
        let p0 = self.addr_of(&parent, leaf).ok_or(Error::NoParent)?;
        let leaf_pk = self.nodes[leaf].record.public().clone();
        let trace = TraceId::random(&mut self.rng);
        if hint {
            self.nodes[p0].state.consented_upgrades.insert(leaf_pk);
            let h = leaf_request_upgrade(&self.nodes[leaf].record, Role::Manager).ok_or(Error::InvalidRole)?;
            return self.send(leaf, Out::control(p0, &parent, Body::UpgradeHint(h), trace));
        }
        self.p0_begin(p0, &leaf_pk, trace)
    }

    pub(crate) fn on_upgrade_hint(&mut self, at: NodeAddr, msg: Incoming, hint: UpgradeHint) -> Result<()> {
        let signer = msg.signed()?;
        if self.nodes[at].record.children.get(&signer) != Some(&Role::Leaf) {
            return Err(Error::NotAuthorized);
        }
        let salt = self.nodes[at].record.salt.ok_or(Error::NotAManager)?;
        if leaf_hash(&salt, &signer) != hint.leaf_hash {
            return Err(Error::NotAuthorized);
        }
        let consented = self.nodes[at].state.consented_upgrades.remove(&signer);
        let leaf = msg.from;
        self.outcome(OutcomeKind::Hint, leaf, consented, (!consented).then(|| "no parent consent".into()), Some(msg.trace));
        if consented {
            self.p0_begin(at, &signer, msg.trace)?;
        }
        Ok(())
    }

    fn p0_begin(&mut self, p0: NodeAddr, leaf_pk: &PublicKey, trace: TraceId) -> Result<()> {
        let p = self.provider.clone();
        let nonce = Nonce::random(&mut self.rng);
        let (req, att) = parent_sign_upgrade(p.as_ref(), &self.nodes[p0].record, leaf_pk, Role::Manager, self.now, nonce)?;
        self.nodes[p0]
            .state
            .pending_upgrades
            .insert(nonce, (PendingUpgrade { leaf_pk: leaf_pk.clone(), request: req.clone() }, trace));
        let name = self.name(p0).to_string();
        self.log(EventKind::State, &name, "-", None, Some(trace), Some(format!("upgrade signed leaf={}", req.leaf_hash.short())));
        if self.nodes[p0].record.role == Role::Root {
            let tenant = self.tenant_of(p0).ok_or(Error::NotAManager)?;
            let policy = self.tenants[tenant].policy.clone();
            let d = root_upgrade_decide(p.as_ref(), &self.nodes[p0].record, &req, &[], &policy, self.nodes[p0].hook.as_ref())?;
            return self.p0_decided(p0, d, trace);
        }
        let parent = self.nodes[p0].record.parent.clone().ok_or(Error::NoParent)?;
        let to = self.addr_of(&parent, p0).ok_or(Error::NoParent)?;
        let fwd = UpgradeForward { request: req, attestation: att, flags: vec![] };
        self.send(p0, Out::control(to, &parent, Body::UpgradeForward(fwd), trace))
    }

    pub(crate) fn on_upgrade_forward(&mut self, at: NodeAddr, msg: Incoming, mut fwd: UpgradeForward) -> Result<()> {
        let child = msg.signed()?;
        let p = self.provider.clone();
        let tenant = self.tenant_of(at).ok_or(Error::NotAManager)?;
        let policy = self.tenants[tenant].policy.clone();
        let subtree_size = self.tree_view().subtree(&self.nodes[at].record.node_id).len() as u64;
        let input = LayerInput {
            child_pk: &child,
            request: &fwd.request,
            attestation: &fwd.attestation,
            flags: &fwd.flags,
            first_layer: fwd.flags.is_empty(),
            subtree_size,
        };
        let node = &self.nodes[at];
        let outcome = layer_verify(p.as_ref(), &node.record, &input, &policy, node.hook.as_ref());
        let name = self.name(at).to_string();
        let nonce = fwd.request.nonce;
        match outcome {
            LayerOutcome::Deny(reason) => {
                self.log(EventKind::State, &name, "-", None, Some(msg.trace), Some(format!("upgrade deny {reason}")));
                let d = UpgradeDecision::sign(p.as_ref(), &self.nodes[at].record, fwd.request.leaf_hash, nonce, false, Some(reason))?;
                self.send(at, Out::control(msg.from, &child, Body::UpgradeDecision(d), msg.trace))
            }
            LayerOutcome::Forward(flag) => {
                self.log(EventKind::State, &name, "-", None, Some(msg.trace), Some("upgrade layer ok".into()));
                fwd.flags.push(flag);
                self.nodes[at].state.upgrade_routes.insert(nonce, child.clone());
                if self.nodes[at].record.role == Role::Root {
                    let d = root_upgrade_decide(p.as_ref(), &self.nodes[at].record, &fwd.request, &fwd.flags, &policy, self.nodes[at].hook.as_ref())?;
                    let verdict = if d.approved { "approve".to_string() } else { format!("deny {}", d.reason.map(|r| r.as_str()).unwrap_or("-")) };
                    self.log(EventKind::State, &name, "-", None, Some(msg.trace), Some(format!("upgrade root {verdict}")));
                    return self.route_upgrade_decision(at, d, msg.trace);
                }
                let parent = self.nodes[at].record.parent.clone().ok_or(Error::NoParent)?;
                let to = self.addr_of(&parent, at).ok_or(Error::NoParent)?;
                self.send(at, Out::control(to, &parent, Body::UpgradeForward(fwd), msg.trace))
            }
        }
    }

    /// Sends a decision this node signed to the child it came from.
    fn route_upgrade_decision(&mut self, at: NodeAddr, d: UpgradeDecision, trace: TraceId) -> Result<()> {
        let child = self.nodes[at].state.upgrade_routes.remove(&d.nonce).ok_or(Error::DecisionMismatch)?;
        let to = self.addr_of(&child, at).ok_or(Error::DeliveryFailed("child".into()))?;
        self.send(at, Out::control(to, &child, Body::UpgradeDecision(d), trace))
    }

    pub(crate) fn on_upgrade_decision(&mut self, at: NodeAddr, msg: Incoming, d: UpgradeDecision) -> Result<()> {
        let parent = self.nodes[at].record.parent.clone();
        let signer = msg.signed_by(parent.as_ref())?;
        let p = self.provider.clone();
        if !d.verify(p.as_ref(), &signer) {
            return Err(Error::SignatureInvalid);
        }
        if self.nodes[at].state.pending_upgrades.contains_key(&d.nonce) {
            return self.p0_decided(at, d, msg.trace);
        }
        if !self.nodes[at].state.upgrade_routes.contains_key(&d.nonce) {
            return Err(Error::DecisionMismatch);
        }
        let out = d.resign(p.as_ref(), &self.nodes[at].record)?;
        self.route_upgrade_decision(at, out, msg.trace)
    }

    fn p0_decided(&mut self, p0: NodeAddr, d: UpgradeDecision, trace: TraceId) -> Result<()> {
        let p = self.provider.clone();
        let (pending, _) = self.nodes[p0].state.pending_upgrades.remove(&d.nonce).ok_or(Error::DecisionMismatch)?;
        let now = self.now;
        let cert = issue_upgrade_cert(p.as_ref(), &mut self.nodes[p0].record, &d, &pending, now)?;
        let leaf = self.addr_of(&pending.leaf_pk, p0).ok_or(Error::DeliveryFailed("leaf".into()))?;
        let Some(cert) = cert else {
            self.outcome(OutcomeKind::Upgrade, leaf, false, d.reason.map(|r| r.as_str().into()), Some(trace));
            return Ok(());
        };
        self.outcome(OutcomeKind::Upgrade, leaf, true, None, Some(trace));
        let nonce = Nonce::random(&mut self.rng);
        let lifetime = self.config.cert_lifetime;
        let delegation = promote_record(p.as_ref(), &mut self.nodes[p0].record, &pending.leaf_pk, now, lifetime, nonce)?;
        let grant = UpgradeGrant { cert, delegation };
        self.send(p0, Out::control(leaf, &pending.leaf_pk, Body::UpgradeGrant(grant), trace))
    }

    pub(crate) fn on_upgrade_grant(&mut self, at: NodeAddr, msg: Incoming, g: UpgradeGrant) -> Result<()> {
        let parent = self.nodes[at].record.parent.clone();
        let signer = msg.signed_by(parent.as_ref())?;
        let p = self.provider.clone();
        let rec = &self.nodes[at].record;
        if Some(g.cert.leaf_hash) != rec.leaf_hash()
            || !g.cert.verify(p.as_ref(), &signer)
            || g.delegation.subject_pk != *rec.public()
            || !g.delegation.verify_signature(p.as_ref(), &signer)
            || g.delegation.role != g.cert.new_role
        {
            return Err(Error::SignatureInvalid);
        }
        apply_promotion(&mut self.nodes[at].record, g.delegation);
        self.outcome(OutcomeKind::Promotion, at, true, None, Some(msg.trace));
        Ok(())
    }
}
