//! Action-certificate handlers: proposal at P0, endorsements on the way
//! up, a signed decision on the way down, finalization at P0.

use crate::crypto::Nonce;
use crate::error::{Error, Result};
use crate::messages::{ActionForward, ActionGrant, ActionOutcome, Body, Reason};
use crate::messaging::TraceId;
use crate::overlay::NodeAddr;
use crate::protocol::action::{
    endorse, finalize_action_cert, parent_propose, policy_decide, request_action_cert, ActionDecision, ActionRequest,
    PendingProposal,
};
use crate::protocol::upgrade::ManagerAttestation;
use crate::trace::EventKind;
use crate::tree::{Role, ScopeLabel};

use super::{Incoming, Out, OutcomeKind, World};

impl World {
    pub(crate) fn start_action(&mut self, node: NodeAddr, permission: &str) -> Result<()> {
        let tenant = self.nodes[node].record.tenant.ok_or(Error::NoParent)?;
        let scope = ScopeLabel::new(&tenant, permission);
        let nonce = Nonce::random(&mut self.rng);
        let trace = TraceId::random(&mut self.rng);
        let (parent, req) = match request_action_cert(&self.nodes[node].record, scope, nonce) {
            Ok(x) => x,
            Err(e) => {
                self.outcome(OutcomeKind::ActionCert, node, false, Some(e.code().into()), Some(trace));
                return Err(e);
            }
        };
        let to = self.addr_of(&parent, node).ok_or(Error::NoParent)?;
        self.nodes[node].state.action_requests.insert(nonce);
        self.send(node, Out::control(to, &parent, Body::ActionRequest(req), trace))
    }

    pub(crate) fn on_action_request(&mut self, at: NodeAddr, msg: Incoming, req: ActionRequest) -> Result<()> {
        let requester = msg.signed()?;
        let p = self.provider.clone();
        let proposal = match parent_propose(p.as_ref(), &self.nodes[at].record, &requester, &req, self.now) {
            Ok(x) => x,
            Err(Error::ScopeExceeded) => {
                // rejected locally; nothing travels upward
                let d = ActionDecision::sign(p.as_ref(), &self.nodes[at].record, Default::default(), req.nonce, false, Some(Reason::ScopeExceeded))?;
                let out = ActionOutcome { decision: d, endorsements: vec![] };
                return self.send(at, Out::control(msg.from, &requester, Body::ActionOutcome(out), msg.trace));
            }
            Err(e) => return Err(e),
        };
        let name = self.name(at).to_string();
        self.log(EventKind::State, &name, "-", None, Some(msg.trace), Some(format!("action proposal {}", proposal.scope)));
        if let Err(reason) = policy_decide(self.nodes[at].hook.as_ref(), &proposal) {
            let d = ActionDecision::sign(p.as_ref(), &self.nodes[at].record, proposal.subject_hash, req.nonce, false, Some(reason))?;
            let out = ActionOutcome { decision: d, endorsements: vec![] };
            return self.send(at, Out::control(msg.from, &requester, Body::ActionOutcome(out), msg.trace));
        }
        self.nodes[at]
            .state
            .pending_proposals
            .insert(req.nonce, PendingProposal { requester, proposal: proposal.clone() });
        if self.nodes[at].record.role == Role::Root {
            let d = ActionDecision::sign(p.as_ref(), &self.nodes[at].record, proposal.subject_hash, req.nonce, true, None)?;
            return self.p0_action_decided(at, ActionOutcome { decision: d, endorsements: vec![] }, msg.trace);
        }
        let parent = self.nodes[at].record.parent.clone().ok_or(Error::NoParent)?;
        let to = self.addr_of(&parent, at).ok_or(Error::NoParent)?;
        let fwd = ActionForward { proposal, endorsements: vec![] };
        self.send(at, Out::control(to, &parent, Body::ActionForward(fwd), msg.trace))
    }

    pub(crate) fn on_action_forward(&mut self, at: NodeAddr, msg: Incoming, mut fwd: ActionForward) -> Result<()> {
        let child = msg.signed()?;
        let p = self.provider.clone();
        let now = self.now;
        let rec = &self.nodes[at].record;
        // only signatures by keys this layer holds can be checked here
        let below_ok = match fwd.endorsements.last() {
            None => fwd.proposal.verify(p.as_ref(), &child),
            Some(e) => e.verify(p.as_ref(), &child) && e.nonce == fwd.proposal.nonce,
        };
        let verdict = if !below_ok {
            Err(Reason::SignatureInvalid)
        } else {
            endorse(p.as_ref(), rec, &child, &fwd.proposal, now)
                .and_then(|e| policy_decide(self.nodes[at].hook.as_ref(), &fwd.proposal).map(|_| e))
        };
        let name = self.name(at).to_string();
        let nonce = fwd.proposal.nonce;
        let subject = fwd.proposal.subject_hash;
        match verdict {
            Err(reason) => {
                self.log(EventKind::State, &name, "-", None, Some(msg.trace), Some(format!("action deny {reason}")));
                let d = ActionDecision::sign(p.as_ref(), &self.nodes[at].record, subject, nonce, false, Some(reason))?;
                let out = ActionOutcome { decision: d, endorsements: vec![] };
                self.send(at, Out::control(msg.from, &child, Body::ActionOutcome(out), msg.trace))
            }
            Ok(e) => {
                self.log(EventKind::State, &name, "-", None, Some(msg.trace), Some("action endorse".into()));
                fwd.endorsements.push(e);
                self.nodes[at].state.action_routes.insert(nonce, child);
                if self.nodes[at].record.role == Role::Root {
                    let d = ActionDecision::sign(p.as_ref(), &self.nodes[at].record, subject, nonce, true, None)?;
                    let out = ActionOutcome { decision: d, endorsements: fwd.endorsements };
                    return self.route_action_outcome(at, out, msg.trace);
                }
                let parent = self.nodes[at].record.parent.clone().ok_or(Error::NoParent)?;
                let to = self.addr_of(&parent, at).ok_or(Error::NoParent)?;
                self.send(at, Out::control(to, &parent, Body::ActionForward(fwd), msg.trace))
            }
        }
    }

    fn route_action_outcome(&mut self, at: NodeAddr, out: ActionOutcome, trace: TraceId) -> Result<()> {
        let child = self.nodes[at].state.action_routes.remove(&out.decision.nonce).ok_or(Error::DecisionMismatch)?;
        let to = self.addr_of(&child, at).ok_or(Error::DeliveryFailed("child".into()))?;
        self.send(at, Out::control(to, &child, Body::ActionOutcome(out), trace))
    }

    pub(crate) fn on_action_outcome(&mut self, at: NodeAddr, msg: Incoming, out: ActionOutcome) -> Result<()> {
        let parent = self.nodes[at].record.parent.clone();
        let signer = msg.signed_by(parent.as_ref())?;
        let p = self.provider.clone();
        if !out.decision.verify(p.as_ref(), &signer) {
            return Err(Error::SignatureInvalid);
        }
        let nonce = out.decision.nonce;
        let name = self.name(at).to_string();
        let verdict = if out.decision.approved { "approve".to_string() } else { format!("deny {}", out.decision.reason.map(|r| r.as_str()).unwrap_or("-")) };
        self.log(EventKind::State, &name, "-", None, Some(msg.trace), Some(format!("action decision {verdict}")));
        if self.nodes[at].state.pending_proposals.contains_key(&nonce) {
            return self.p0_action_decided(at, out, msg.trace);
        }
        if self.nodes[at].state.action_routes.contains_key(&nonce) {
            let decision = out.decision.resign(p.as_ref(), &self.nodes[at].record)?;
            return self.route_action_outcome(at, ActionOutcome { decision, endorsements: out.endorsements }, msg.trace);
        }
        if self.nodes[at].state.action_requests.remove(&nonce) && !out.decision.approved {
            let reason = out.decision.reason.map(|r| r.as_str().to_string());
            self.outcome(OutcomeKind::ActionCert, at, false, reason, Some(msg.trace));
            return Ok(());
        }
        Err(Error::DecisionMismatch)
    }

    fn p0_action_decided(&mut self, p0: NodeAddr, out: ActionOutcome, trace: TraceId) -> Result<()> {
        let p = self.provider.clone();
        let pending = self.nodes[p0].state.pending_proposals.remove(&out.decision.nonce).ok_or(Error::DecisionMismatch)?;
        let to = self.addr_of(&pending.requester, p0).ok_or(Error::DeliveryFailed("requester".into()))?;
        let cert = finalize_action_cert(p.as_ref(), &self.nodes[p0].record, &out.decision, &pending, out.endorsements)?;
        let Some(cert) = cert else {
            let decision = out.decision.resign(p.as_ref(), &self.nodes[p0].record)?;
            let body = Body::ActionOutcome(ActionOutcome { decision, endorsements: vec![] });
            return self.send(p0, Out::control(to, &pending.requester, body, trace));
        };
        let nonce = cert.proposal.nonce;
        self.nodes[p0].state.issued_action_nonces.insert(nonce);
        let attestation = ManagerAttestation::create(p.as_ref(), &self.nodes[p0].record, cert.proposal.subject_hash, nonce, self.now)?;
        self.send(p0, Out::control(to, &pending.requester, Body::ActionGrant(ActionGrant { cert, attestation }), trace))
    }

    pub(crate) fn on_action_grant(&mut self, at: NodeAddr, msg: Incoming, g: ActionGrant) -> Result<()> {
        let parent = self.nodes[at].record.parent.clone();
        let signer = msg.signed_by(parent.as_ref())?;
        let p = self.provider.clone();
        let rec = &self.nodes[at].record;
        if !g.cert.verify(p.as_ref(), &signer)
            || Some(g.cert.proposal.subject_hash) != rec.leaf_hash()
            || !self.nodes[at].state.action_requests.remove(&g.cert.proposal.nonce)
        {
            return Err(Error::SignatureInvalid);
        }
        self.nodes[at].state.action_certs.push((g.cert, g.attestation));
        self.outcome(OutcomeKind::ActionCert, at, true, None, Some(msg.trace));
        Ok(())
    }
}
