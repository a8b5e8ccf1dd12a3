//! Join handlers: request intake, probe relay, aggregation, decision
//! dissemination and finalization.

use crate::codec::Bytes;
use crate::crypto::{Digest, Nonce};
use crate::error::{Error, Result};
use crate::messages::{Body, ConflictResponse, DecisionRecord, HashProbe, JoinRequest, JoinResult, ProbeDirection, Reason, Verdict};
use crate::messaging::TraceId;
use crate::overlay::{NodeAddr, RouteMode};
use crate::protocol::join::{conflict_check_local, finalize_join, handle_join_request, root_decide, disseminate_decision, PendingJoin};
use crate::trace::EventKind;
use crate::tree::{accept_membership, DelegationModel, Role};

use super::{probe_key, Aggregation, Incoming, Out, OutcomeKind, PendingJoinAt, Timer, World};

impl World {
    pub(crate) fn start_join(&mut self, candidate: NodeAddr, manager: NodeAddr, mode: RouteMode, info: &[u8]) -> Result<()> {
        let mpk = self.nodes[manager].record.public().clone();
        let req = JoinRequest {
            join_info: Bytes(info.to_vec()),
            candidate_pk: self.nodes[candidate].record.public().clone(),
            nonce: Nonce::random(&mut self.rng),
        };
        let trace = TraceId::random(&mut self.rng);
        self.nodes[candidate].state.join_attempts.insert(req.nonce, manager);
        let sent = self.send(candidate, Out::control(manager, &mpk, Body::JoinRequest(req), trace).via(mode));
        if let Err(e) = &sent {
            self.outcome(OutcomeKind::Join, candidate, false, Some(e.code().into()), Some(trace));
        }
        sent
    }

    pub(crate) fn on_join_request(&mut self, at: NodeAddr, msg: Incoming, req: JoinRequest) -> Result<()> {
        msg.signed_by(Some(&req.candidate_pk))?;
        let p = self.provider.clone();
        let h = handle_join_request(p.as_ref(), &mut self.nodes[at].record, &req)?;
        let tenant = self.tenant_of(at);
        let open = tenant.is_some_and(|t| self.tenants[t].open_admission);
        if !open && !self.nodes[at].state.invited.contains(&h) {
            return self.send_join_reject(at, msg.from, &req, msg.trace, Reason::NotAuthorized);
        }
        let max_depth = tenant.map(|t| self.tenants[t].policy.max_depth).unwrap_or(16) as u64;
        let expiry = self.agg_timeout(tenant) + 2 * max_depth;
        let pending = PendingJoin { request: req.clone(), h, trace_id: msg.trace, expires_at: self.now + expiry };
        self.nodes[at].state.pending_joins.insert((h, req.nonce), PendingJoinAt { join: pending, candidate: msg.from });
        self.set_timer(at, expiry, Timer::JoinExpiry { h, nonce: req.nonce });
        let probe = HashProbe { h, direction: ProbeDirection::Up };
        self.nodes[at].state.probes_seen.insert(probe_key(msg.trace, h, ProbeDirection::Up));
        if self.nodes[at].record.role == Role::Root {
            self.conflict_phase(at, msg.trace, h)
        } else {
            let parent = self.nodes[at].record.parent.clone().ok_or(Error::NoParent)?;
            let to = self.addr_of(&parent, at).ok_or(Error::NoParent)?;
            self.send(at, Out::control(to, &parent, Body::HashProbe(probe), msg.trace))
        }
    }

    fn send_join_reject(&mut self, at: NodeAddr, to: NodeAddr, req: &JoinRequest, trace: TraceId, reason: Reason) -> Result<()> {
        let rec = &self.nodes[at].record;
        let result = JoinResult {
            nonce: req.nonce,
            decision: Verdict::Reject,
            reason: Some(reason),
            cert: None,
            tenant: rec.tenant.unwrap_or_default(),
            depth: rec.depth + 1,
            salt: None,
            chain: None,
        };
        self.send(at, Out::control(to, &req.candidate_pk, Body::JoinResult(result), trace).reply())
    }

    pub(crate) fn on_hash_probe(&mut self, at: NodeAddr, msg: Incoming, probe: HashProbe) -> Result<()> {
        let signer = msg.signed()?;
        let rec = &self.nodes[at].record;
        let from_ok = match probe.direction {
            ProbeDirection::Up => rec.children.get(&signer) == Some(&Role::Manager),
            ProbeDirection::Down => rec.parent.as_ref() == Some(&signer),
        };
        if !from_ok || !rec.role.can_issue() {
            return Err(Error::NotAuthorized);
        }
        if !self.nodes[at].state.probes_seen.insert(probe_key(msg.trace, probe.h, probe.direction)) {
            let name = self.name(at).to_string();
            self.duplicate_probes.push(format!("{name} {} {}", msg.trace, probe.h.short()));
            self.log(EventKind::Drop, "-", &name, None, Some(msg.trace), Some("duplicate probe".into()));
            return Ok(());
        }
        let name = self.name(at).to_string();
        let dir = if probe.direction == ProbeDirection::Up { "up" } else { "down" };
        self.log(EventKind::State, &name, "-", None, Some(msg.trace), Some(format!("probe {dir} h={}", probe.h.short())));
        match probe.direction {
            ProbeDirection::Up if self.nodes[at].record.role != Role::Root => {
                let parent = self.nodes[at].record.parent.clone().ok_or(Error::NoParent)?;
                let to = self.addr_of(&parent, at).ok_or(Error::NoParent)?;
                self.send(at, Out::control(to, &parent, Body::HashProbe(probe), msg.trace))
            }
            _ => self.conflict_phase(at, msg.trace, probe.h),
        }
    }

    /// Local check, then broadcast to manager children unless the local
    /// answer is already YES.
    fn conflict_phase(&mut self, at: NodeAddr, trace: TraceId, h: Digest) -> Result<()> {
        let window = self.agg_timeout(self.tenant_of(at));
        let now = self.now;
        let node = &self.nodes[at];
        let recently_revoked = node.state.recent_revocations.get(&h).is_some_and(|t| now.saturating_sub(*t) <= window);
        if conflict_check_local(&node.record, &h) || recently_revoked {
            return self.answer(at, trace, h, true, false);
        }
        let managers: Vec<_> = node
            .record
            .children
            .iter()
            .filter(|(k, r)| **r == Role::Manager && !node.record.revocations.is_revoked(&k.digest()))
            .map(|(k, _)| k.clone())
            .collect();
        if managers.is_empty() {
            return self.answer(at, trace, h, false, false);
        }
        self.nodes[at]
            .state
            .aggregations
            .insert((trace, h), Aggregation { expected: managers.iter().cloned().collect(), responses: Vec::new() });
        self.set_timer(at, window, Timer::Aggregation { trace, h });
        for child in managers {
            if let Some(to) = self.addr_of(&child, at) {
                let body = Body::HashProbe(HashProbe { h, direction: ProbeDirection::Down });
                self.send(at, Out::control(to, &child, body, trace))?;
            }
        }
        Ok(())
    }

    fn answer(&mut self, at: NodeAddr, trace: TraceId, h: Digest, conflict: bool, timed_out: bool) -> Result<()> {
        if self.nodes[at].record.role == Role::Root {
            return self.root_decision(at, trace, h, conflict, timed_out);
        }
        let parent = self.nodes[at].record.parent.clone().ok_or(Error::NoParent)?;
        let to = self.addr_of(&parent, at).ok_or(Error::NoParent)?;
        self.send(at, Out::control(to, &parent, Body::ConflictResponse(ConflictResponse { h, conflict }), trace))
    }

    pub(crate) fn on_conflict_response(&mut self, at: NodeAddr, msg: Incoming, resp: ConflictResponse) -> Result<()> {
        let signer = msg.signed()?;
        let key = (msg.trace, resp.h);
        let Some(agg) = self.nodes[at].state.aggregations.get_mut(&key) else {
            let name = self.name(at).to_string();
            self.log(EventKind::Drop, "-", &name, None, Some(msg.trace), Some("no open aggregation".into()));
            return Ok(());
        };
        if !agg.expected.remove(&signer) {
            return Err(Error::NotAuthorized);
        }
        agg.responses.push(resp.clone());
        if resp.conflict || agg.expected.is_empty() {
            self.nodes[at].state.aggregations.remove(&key);
            return self.answer(at, msg.trace, resp.h, resp.conflict, false);
        }
        Ok(())
    }

    pub(crate) fn on_aggregation_timeout(&mut self, at: NodeAddr, trace: TraceId, h: Digest) {
        if self.nodes[at].state.aggregations.remove(&(trace, h)).is_none() {
            return;
        }
        let name = self.name(at).to_string();
        self.log(EventKind::Timeout, &name, "-", None, Some(trace), Some("aggregation; missing answers count as YES".into()));
        if let Err(e) = self.answer(at, trace, h, true, true) {
            self.log(EventKind::Fail, &name, "-", None, Some(trace), Some(e.code().into()));
        }
    }

    fn root_decision(&mut self, root: NodeAddr, trace: TraceId, h: Digest, conflict: bool, timed_out: bool) -> Result<()> {
        let p = self.provider.clone();
        let now = self.now;
        let tenant = self.tenant_of(root);
        let hold = self.agg_timeout(tenant) + 2 * tenant.map(|t| self.tenants[t].policy.max_depth).unwrap_or(16) as u64;
        let state = &mut self.nodes[root].state;
        state.in_flight.retain(|_, until| *until > now);
        let in_flight = state.in_flight.contains_key(&h);
        let rec = &self.nodes[root].record;
        let decision = if timed_out {
            DecisionRecord::sign(p.as_ref(), rec, h, Verdict::Reject, now, Some(Reason::AggregationTimeout))?
        } else {
            root_decide(p.as_ref(), rec, conflict, in_flight, h, now)?
        };
        if decision.decision == Verdict::Approve {
            self.nodes[root].state.in_flight.insert(h, now + hold);
        }
        self.after_decision(root, trace, decision.clone(), decision)
    }

    pub(crate) fn on_join_decision(&mut self, at: NodeAddr, msg: Incoming, rec: DecisionRecord) -> Result<()> {
        let parent = self.nodes[at].record.parent.clone();
        msg.signed_by(parent.as_ref())?;
        let p = self.provider.clone();
        let out = disseminate_decision(p.as_ref(), &self.nodes[at].record, &rec)?;
        self.after_decision(at, msg.trace, rec, out)
    }

    /// Logs a verified decision, finalizes matching pending joins and
    /// forwards the re-signed record to every child.
    fn after_decision(&mut self, at: NodeAddr, trace: TraceId, received: DecisionRecord, out: DecisionRecord) -> Result<()> {
        let name = self.name(at).to_string();
        let verdict = match received.decision {
            Verdict::Approve => "approve".to_string(),
            Verdict::Reject => format!("reject {}", received.reason.map(|r| r.as_str()).unwrap_or("-")),
        };
        self.log(EventKind::State, &name, "-", None, Some(trace), Some(format!("decision {verdict} h={}", received.h.short())));
        self.nodes[at].state.decisions.push((trace, received.clone()));

        // children as of the decision; a candidate admitted below gets its result instead
        let children: Vec<_> = self.nodes[at].record.children.keys().cloned().collect();
        let mine: Vec<(Digest, Nonce)> = self.nodes[at]
            .state
            .pending_joins
            .iter()
            .filter(|((h, _), pj)| *h == received.h && pj.join.trace_id == trace)
            .map(|(k, _)| *k)
            .collect();
        for key in mine {
            let pj = self.nodes[at].state.pending_joins.remove(&key).unwrap();
            self.finalize(at, trace, &received, pj)?;
        }

        for child in children {
            if let Some(to) = self.addr_of(&child, at) {
                self.send(at, Out::control(to, &child, Body::JoinDecision(out.clone()), trace))?;
            }
        }
        Ok(())
    }

    fn finalize(&mut self, at: NodeAddr, trace: TraceId, rec: &DecisionRecord, pj: PendingJoinAt) -> Result<()> {
        let p = self.provider.clone();
        let full_path = self.tenant_of(at).is_some_and(|t| self.tenants[t].model == DelegationModel::FullPath);
        let (now, skew, lifetime) = (self.now, self.config.decision_skew, self.config.cert_lifetime);
        let req = pj.join.request.clone();
        match finalize_join(p.as_ref(), &mut self.nodes[at].record, rec, &pj.join, now, skew, lifetime, full_path) {
            Ok(result) => {
                if result.decision == Verdict::Approve {
                    self.nodes[at].state.ever_known.insert(req.candidate_pk.clone());
                }
                self.send(at, Out::control(pj.candidate, &req.candidate_pk, Body::JoinResult(result), trace).reply())
            }
            Err(Error::StaleDecision) => self.send_join_reject(at, pj.candidate, &req, trace, Reason::Expired),
            Err(e) => Err(e),
        }
    }

    pub(crate) fn on_join_expiry(&mut self, at: NodeAddr, h: Digest, nonce: Nonce) {
        let Some(pj) = self.nodes[at].state.pending_joins.remove(&(h, nonce)) else { return };
        let name = self.name(at).to_string();
        self.log(EventKind::Timeout, &name, "-", None, Some(pj.join.trace_id), Some("pending join expired".into()));
        let req = pj.join.request.clone();
        if let Err(e) = self.send_join_reject(at, pj.candidate, &req, pj.join.trace_id, Reason::AggregationTimeout) {
            self.log(EventKind::Fail, &name, "-", None, Some(pj.join.trace_id), Some(e.code().into()));
        }
    }

    pub(crate) fn on_join_result(&mut self, at: NodeAddr, msg: Incoming, res: JoinResult) -> Result<()> {
        let Some(manager) = self.nodes[at].state.join_attempts.get(&res.nonce).copied() else {
            return Err(Error::NotAuthorized);
        };
        let mpk = self.nodes[manager].record.public().clone();
        msg.signed_by(Some(&mpk))?;
        self.nodes[at].state.join_attempts.remove(&res.nonce);
        if res.decision == Verdict::Reject {
            let reason = res.reason.map(|r| r.as_str().to_string());
            self.outcome(OutcomeKind::Join, at, false, reason, Some(msg.trace));
            return Ok(());
        }
        let p = self.provider.clone();
        let cert = res.cert.ok_or(Error::DecisionMismatch)?;
        let me = self.nodes[at].record.public().clone();
        if cert.subject_pk != me || !cert.verify_signature(p.as_ref(), &mpk) || self.nodes[at].record.is_member() {
            return Err(Error::SignatureInvalid);
        }
        let salt = res.salt.ok_or(Error::DecisionMismatch)?;
        accept_membership(&mut self.nodes[at].record, &mpk, cert, res.tenant, res.depth, salt, res.chain);
        self.outcome(OutcomeKind::Join, at, true, None, Some(msg.trace));
        Ok(())
    }
}
