//! Gateway-mediated validation, storage access with the issuer's liveness
//! challenge, and cross-tenant bridges.

use rand::Rng;

use crate::codec::{Bytes, Canonical};
use crate::crypto::{Digest, Nonce, PublicKey};
use crate::error::{Error, Result};
use crate::gateway::{
    descend, extend_transcript, issuer_check, storage_check_proof, storage_grant, AccessCertificate, ChallengeDelivery,
    DescentStep, GatewayDenial, GatewayProof, Hop, CHALLENGE_LEN,
};
use crate::messages::{
    AccessResult, ActionInvoke, Body, ChallengeAnswer, ChallengeRequest, Reason, StorageRequest, ValidationQuery,
    ValidationVerdict,
};
use crate::messaging::TraceId;
use crate::overlay::NodeAddr;
use crate::tenancy::{check_bridge_access, create_bridge, BridgeAccess, BridgeResult, CrossTenantDelegation};
use crate::trace::EventKind;
use crate::tree::{ScopeLabel, Validity};

use super::{ClientSession, GatewayPending, Incoming, NodeKind, Out, OutcomeKind, ReplyTo, StorageSession, Timer, ValidatorPending, World};

impl World {
    fn held_cert(&self, node: NodeAddr, permission: &str) -> Result<(ScopeLabel, usize)> {
        let tenant = self.nodes[node].record.tenant.ok_or(Error::NotAuthorized)?;
        let action = ScopeLabel::new(&tenant, permission);
        let idx = self.nodes[node]
            .state
            .action_certs
            .iter()
            .rposition(|(c, _)| c.proposal.scope.contains(&action))
            .ok_or(Error::NotAuthorized)?;
        Ok((action, idx))
    }

    /// Makes sure `node` holds `service`'s public key, disclosing it out of
    /// band if needed.
    fn ensure_known(&mut self, service: NodeAddr, node: NodeAddr) {
        let pk = self.nodes[service].record.public().clone();
        if !self.nodes[node].record.known_keys.contains(&pk) {
            self.disclose(service, node, false);
        }
    }

    pub(crate) fn start_validation(&mut self, node: NodeAddr, validator: NodeAddr, permission: &str) -> Result<()> {
        let trace = TraceId::random(&mut self.rng);
        let (action, idx) = match self.held_cert(node, permission) {
            Ok(x) => x,
            Err(e) => {
                self.outcome(OutcomeKind::Validation, node, false, Some(e.code().into()), Some(trace));
                return Err(e);
            }
        };
        let cert = self.nodes[node].state.action_certs[idx].0.clone();
        self.ensure_known(validator, node);
        let xpk = self.nodes[validator].record.public().clone();
        let invoke = ActionInvoke { action, cert, request_id: Nonce::random(&mut self.rng) };
        self.send(node, Out::control(validator, &xpk, Body::ActionInvoke(invoke), trace).plain())
    }

    fn gateway_of(&self, node: NodeAddr) -> Result<(NodeAddr, PublicKey)> {
        let t = self.nodes[node].serves.ok_or(Error::NotAuthorized)?;
        let gw = self.tenants[t].gateway.ok_or(Error::NotAuthorized)?;
        Ok((gw, self.nodes[gw].record.public().clone()))
    }

    pub(crate) fn on_action_invoke(&mut self, at: NodeAddr, msg: Incoming, inv: ActionInvoke) -> Result<()> {
        if self.nodes[at].kind != NodeKind::Validator {
            return Err(Error::NotAuthorized);
        }
        let (gw, gpk) = self.gateway_of(at)?;
        let requester = self.name(msg.from).to_string();
        self.nodes[at]
            .state
            .validator_pending
            .insert(inv.request_id, ValidatorPending { cert_hash: inv.cert.digest(), requester });
        let q = ValidationQuery { cert: inv.cert, action: inv.action, storage_id: None, hop: Hop::Issuer, request_id: inv.request_id };
        self.send(at, Out::control(gw, &gpk, Body::ValidationQuery(q), msg.trace))
    }

    pub(crate) fn on_validation_query(&mut self, at: NodeAddr, msg: Incoming, mut q: ValidationQuery) -> Result<()> {
        let signer = msg.signed()?;
        let p = self.provider.clone();
        let cert_hash = q.cert.digest();
        if self.nodes[at].kind == NodeKind::Gateway {
            if !self.nodes[at].record.trusted.contains(&signer) {
                return Err(Error::NotAuthorized);
            }
            let t = self.nodes[at].serves.ok_or(Error::NotAuthorized)?;
            let root = self.tenants[t].root;
            let rpk = self.nodes[root].record.public().clone();
            let origin = ReplyTo { addr: msg.from, pk: signer, trace: msg.trace, cert_hash };
            let pending = GatewayPending { origin, cert_hash, storage_id: q.storage_id };
            self.nodes[at].state.gateway_pending.insert(q.request_id, pending);
            q.hop = Hop::at_root(&q.cert);
            return self.send(at, Out::control(root, &rpk, Body::ValidationQuery(q), msg.trace));
        }
        // a tree node: the query comes from the parent, or from the gateway at the root
        let rec = &self.nodes[at].record;
        let from_ok = rec.parent.as_ref() == Some(&signer) || (rec.parent.is_none() && rec.trusted.contains(&signer));
        if !from_ok {
            return Err(Error::NotAuthorized);
        }
        let back = ReplyTo { addr: msg.from, pk: signer.clone(), trace: msg.trace, cert_hash };
        let name = self.name(at).to_string();
        let step = match q.hop {
            Hop::Endorser(i) => descend(p.as_ref(), rec, &q.cert, i),
            Hop::Issuer => {
                return self.issuer_validate(at, back, q);
            }
        };
        match step {
            DescentStep::Deny(reason) => {
                self.log(EventKind::State, &name, "-", None, Some(msg.trace), Some(format!("validation deny {reason}")));
                self.send_verdict(at, &back, q.request_id, Err(reason), Digest::default(), None)
            }
            DescentStep::Forward { child, hop } => {
                self.nodes[at].state.validation_routes.insert(q.request_id, back);
                q.hop = hop;
                let to = self.addr_of(&child, at).ok_or(Error::DeliveryFailed("child".into()))?;
                self.send(at, Out::control(to, &child, Body::ValidationQuery(q), msg.trace))
            }
        }
    }

    fn issuer_validate(&mut self, at: NodeAddr, back: ReplyTo, q: ValidationQuery) -> Result<()> {
        let p = self.provider.clone();
        let lifetime = self.config.action_lifetime;
        let node = &self.nodes[at];
        let checked = issuer_check(p.as_ref(), &node.record, &q.cert, &node.state.issued_action_nonces, self.now, lifetime)
            .and_then(|n| if q.cert.proposal.scope.contains(&q.action) { Ok(n) } else { Err(Reason::ScopeExceeded) });
        let name = self.name(at).to_string();
        let n_pk = match checked {
            Ok(n) => n,
            Err(reason) => {
                self.log(EventKind::State, &name, "-", None, Some(back.trace), Some(format!("validation deny {reason}")));
                return self.send_verdict(at, &back, q.request_id, Err(reason), Digest::default(), None);
            }
        };
        self.log(EventKind::State, &name, "-", None, Some(back.trace), Some("validation issuer ok".into()));
        let mut challenge = None;
        if q.storage_id.is_some() {
            let value: [u8; CHALLENGE_LEN] = self.rng.gen();
            let delivery = ChallengeDelivery::create(p.as_ref(), &mut self.rng, &self.nodes[at].record, &n_pk, &value)?;
            let to = self.addr_of(&n_pk, at).ok_or(Error::DeliveryFailed("subject".into()))?;
            self.send(at, Out::control(to, &n_pk, Body::ChallengeDelivery(delivery), back.trace))?;
            challenge = Some(value);
        }
        self.send_verdict(at, &back, q.request_id, Ok(()), Digest::default(), challenge)
    }

    fn send_verdict(
        &mut self,
        at: NodeAddr,
        back: &ReplyTo,
        request_id: Nonce,
        result: std::result::Result<(), Reason>,
        prev: Digest,
        challenge: Option<[u8; CHALLENGE_LEN]>,
    ) -> Result<()> {
        let approved = result.is_ok();
        let v = ValidationVerdict {
            request_id,
            approved,
            reason: result.err(),
            transcript: extend_transcript(&prev, &back.cert_hash, approved),
            challenge,
        };
        self.send(at, Out::control(back.addr, &back.pk, Body::ValidationVerdict(v), back.trace))
    }

    pub(crate) fn on_validation_verdict(&mut self, at: NodeAddr, msg: Incoming, v: ValidationVerdict) -> Result<()> {
        let signer = msg.signed()?;
        let p = self.provider.clone();
        if self.nodes[at].kind == NodeKind::Gateway {
            let pending = self.nodes[at].state.gateway_pending.remove(&v.request_id).ok_or(Error::DecisionMismatch)?;
            let t = self.nodes[at].serves.ok_or(Error::NotAuthorized)?;
            if signer != *self.nodes[self.tenants[t].root].record.public() {
                return Err(Error::NotAuthorized);
            }
            let gw = &self.nodes[at].record;
            let origin = pending.origin;
            let name = self.name(at).to_string();
            if v.approved {
                let validity = Validity::starting(self.now, self.config.proof_validity);
                let proof = GatewayProof::sign(p.as_ref(), gw, pending.cert_hash, v.transcript, pending.storage_id, v.request_id, validity, v.challenge)?;
                self.log(EventKind::State, &name, "-", None, Some(msg.trace), Some("gateway proof".into()));
                return self.send(at, Out::control(origin.addr, &origin.pk, Body::GatewayProof(proof), origin.trace).plain());
            }
            let reason = v.reason.unwrap_or(Reason::NotAuthorized);
            let denial = GatewayDenial::sign(p.as_ref(), gw, pending.cert_hash, v.request_id, reason)?;
            self.log(EventKind::State, &name, "-", None, Some(msg.trace), Some(format!("gateway deny {reason}")));
            return self.send(at, Out::control(origin.addr, &origin.pk, Body::GatewayDenial(denial), origin.trace).plain());
        }
        let back = self.nodes[at].state.validation_routes.remove(&v.request_id).ok_or(Error::DecisionMismatch)?;
        if !self.nodes[at].record.children.contains_key(&signer) {
            return Err(Error::NotAuthorized);
        }
        let result = if v.approved { Ok(()) } else { Err(v.reason.unwrap_or(Reason::NotAuthorized)) };
        self.send_verdict(at, &back, v.request_id, result, v.transcript, v.challenge)
    }

    fn gateway_pk_for(&self, at: NodeAddr) -> Result<PublicKey> {
        Ok(self.gateway_of(at)?.1)
    }

    pub(crate) fn on_gateway_proof(&mut self, at: NodeAddr, msg: Incoming, proof: GatewayProof) -> Result<()> {
        let p = self.provider.clone();
        let gpk = self.gateway_pk_for(at)?;
        match self.nodes[at].kind {
            NodeKind::Validator => {
                let pending = self.nodes[at].state.validator_pending.remove(&proof.nonce).ok_or(Error::DecisionMismatch)?;
                self.nodes[at].state.gateway_verifications += 1;
                let ok = proof.verify(p.as_ref(), &gpk);
                let node = self.addr(&pending.requester).unwrap_or(at);
                let reason = if !ok {
                    Some(Reason::SignatureInvalid)
                } else if proof.cert_hash != pending.cert_hash {
                    Some(Reason::NotAuthorized)
                } else if !proof.validity.contains(self.now) {
                    Some(Reason::Expired)
                } else {
                    None
                };
                let name = self.name(at).to_string();
                let verdict = reason.map(|r| format!("deny {r}")).unwrap_or_else(|| "permit".into());
                self.log(EventKind::State, &name, "-", None, Some(msg.trace), Some(format!("validator {verdict}")));
                self.outcome(OutcomeKind::Validation, node, reason.is_none(), reason.map(|r| r.as_str().into()), Some(msg.trace));
                Ok(())
            }
            NodeKind::Storage => {
                if !proof.verify(p.as_ref(), &gpk) {
                    return Err(Error::SignatureInvalid);
                }
                let storage_id = self.nodes[at].record.node_id;
                let now = self.now;
                let session = self.nodes[at].state.storage_sessions.get_mut(&proof.nonce).ok_or(Error::DecisionMismatch)?;
                if let Err(reason) = storage_check_proof(&proof, &session.cert_hash, &storage_id, now) {
                    return self.storage_finish(at, proof.nonce, Err(reason));
                }
                session.proof = Some(proof.clone());
                let (spk, saddr, trace) = (session.session_pk.clone(), session.session_addr, session.trace);
                let body = Body::ChallengeRequest(ChallengeRequest { session_nonce: proof.nonce });
                self.send(at, Out::control(saddr, &spk, body, trace).reply())?;
                let timeout = self.config.challenge_timeout;
                self.set_timer(at, timeout, Timer::Challenge { session: proof.nonce });
                Ok(())
            }
            _ => Err(Error::NotAuthorized),
        }
    }

    pub(crate) fn on_gateway_denial(&mut self, at: NodeAddr, msg: Incoming, d: GatewayDenial) -> Result<()> {
        let p = self.provider.clone();
        let gpk = self.gateway_pk_for(at)?;
        match self.nodes[at].kind {
            NodeKind::Validator => {
                let pending = self.nodes[at].state.validator_pending.remove(&d.nonce).ok_or(Error::DecisionMismatch)?;
                self.nodes[at].state.gateway_verifications += 1;
                if !d.verify(p.as_ref(), &gpk) {
                    return Err(Error::SignatureInvalid);
                }
                let node = self.addr(&pending.requester).unwrap_or(at);
                let name = self.name(at).to_string();
                self.log(EventKind::State, &name, "-", None, Some(msg.trace), Some(format!("validator deny {}", d.reason)));
                self.outcome(OutcomeKind::Validation, node, false, Some(d.reason.as_str().into()), Some(msg.trace));
                Ok(())
            }
            NodeKind::Storage => {
                if !d.verify(p.as_ref(), &gpk) {
                    return Err(Error::SignatureInvalid);
                }
                self.storage_finish(at, d.nonce, Err(d.reason))
            }
            _ => Err(Error::NotAuthorized),
        }
    }

    // ---- storage ------------------------------------------------------

    pub(crate) fn start_storage(&mut self, node: NodeAddr, storage: NodeAddr, permission: &str) -> Result<()> {
        let trace = TraceId::random(&mut self.rng);
        let (_, idx) = match self.held_cert(node, permission) {
            Ok(x) => x,
            Err(e) => {
                self.outcome(OutcomeKind::Storage, node, false, Some(e.code().into()), Some(trace));
                return Err(e);
            }
        };
        let (cert, att) = self.nodes[node].state.action_certs[idx].clone();
        let access = AccessCertificate::from_action(&cert, self.config.action_lifetime, att);
        self.open_session(node, storage, Bytes(access.to_canonical()), trace, false)
    }

    /// Attacker presents a victim's certificate under its own session key.
    pub(crate) fn start_impersonation(&mut self, attacker: NodeAddr, victim: NodeAddr, storage: NodeAddr) -> Result<()> {
        let trace = TraceId::random(&mut self.rng);
        let (cert, att) = self.nodes[victim].state.action_certs.last().cloned().ok_or(Error::NotAuthorized)?;
        let access = AccessCertificate::from_action(&cert, self.config.action_lifetime, att);
        let name = self.name(attacker).to_string();
        self.log(EventKind::Adversary, &name, "-", None, Some(trace), Some("impersonation attempt".into()));
        self.open_session(attacker, storage, Bytes(access.to_canonical()), trace, true)
    }

    /// Sends raw access bytes to storage under a fresh session key.
    pub(crate) fn open_session(&mut self, node: NodeAddr, storage: NodeAddr, access: Bytes, trace: TraceId, guess: bool) -> Result<()> {
        self.ensure_known(storage, node);
        let keys = self.fresh_keys();
        let session_nonce = Nonce::random(&mut self.rng);
        let storage_pk = self.nodes[storage].record.public().clone();
        self.register_key(keys.public.digest(), node);
        let req = StorageRequest { access, session_pk: keys.public.clone(), session_nonce };
        self.nodes[node].state.client_sessions.insert(
            trace,
            ClientSession { keys: keys.clone(), session_nonce, storage, storage_pk: storage_pk.clone(), challenge: None, awaiting: true, guess },
        );
        self.send(node, Out::control(storage, &storage_pk, Body::StorageRequest(req), trace).plain().with_keys(keys))
    }

    pub(crate) fn on_storage_request(&mut self, at: NodeAddr, msg: Incoming, req: StorageRequest) -> Result<()> {
        if self.nodes[at].kind != NodeKind::Storage {
            return Err(Error::NotAuthorized);
        }
        let deny = |w: &mut World, reason: Reason| {
            let r = AccessResult { session_nonce: req.session_nonce, granted: false, reason: Some(reason) };
            let name = w.name(at).to_string();
            w.log(EventKind::State, &name, "-", None, Some(msg.trace), Some(format!("storage deny {reason}")));
            w.send(at, Out::control(msg.from, &req.session_pk, Body::AccessResult(r), msg.trace).reply())
        };
        let Ok(access) = AccessCertificate::from_canonical(&req.access.0) else {
            return deny(self, Reason::Malformed);
        };
        if self.nodes[at].state.storage_sessions.contains_key(&req.session_nonce) {
            return deny(self, Reason::Replay);
        }
        let cert = access.to_action();
        let cert_hash = cert.digest();
        self.nodes[at].state.storage_sessions.insert(
            req.session_nonce,
            StorageSession { session_pk: req.session_pk.clone(), session_addr: msg.from, cert_hash, proof: None, trace: msg.trace, done: false },
        );
        let (gw, gpk) = self.gateway_of(at)?;
        let q = ValidationQuery {
            cert,
            action: access.permissions,
            storage_id: Some(self.nodes[at].record.node_id),
            hop: Hop::Issuer,
            request_id: req.session_nonce,
        };
        self.send(at, Out::control(gw, &gpk, Body::ValidationQuery(q), msg.trace))
    }

    pub(crate) fn on_challenge_delivery(&mut self, at: NodeAddr, msg: Incoming, d: ChallengeDelivery) -> Result<()> {
        let parent = self.nodes[at].record.parent.clone();
        msg.signed_by(parent.as_ref())?;
        let p = self.provider.clone();
        let value = d.open(p.as_ref(), &self.nodes[at].record)?;
        match self.nodes[at].state.client_sessions.get_mut(&msg.trace) {
            Some(s) => {
                s.challenge = Some(value);
                Ok(())
            }
            None => {
                let name = self.name(at).to_string();
                self.log(EventKind::Drop, "-", &name, None, Some(msg.trace), Some("challenge for unknown session".into()));
                Ok(())
            }
        }
    }

    pub(crate) fn on_challenge_request(&mut self, at: NodeAddr, msg: Incoming, c: ChallengeRequest) -> Result<()> {
        let tid = msg.via_session.ok_or(Error::NotAuthorized)?;
        let s = self.nodes[at].state.client_sessions.get(&tid).cloned().ok_or(Error::NotAuthorized)?;
        if s.session_nonce != c.session_nonce || msg.signer.as_ref() != Some(&s.storage_pk) {
            return Err(Error::NotAuthorized);
        }
        let value = match (s.challenge, s.guess) {
            (Some(v), false) => v,
            (_, true) => self.rng.gen(),
            (None, false) => {
                let name = self.name(at).to_string();
                self.log(EventKind::Drop, "-", &name, None, Some(msg.trace), Some("no challenge value held".into()));
                return Ok(());
            }
        };
        let body = Body::ChallengeAnswer(ChallengeAnswer { session_nonce: c.session_nonce, value });
        self.send(at, Out::control(s.storage, &s.storage_pk, body, msg.trace).plain().with_keys(s.keys))
    }

    pub(crate) fn on_challenge_answer(&mut self, at: NodeAddr, _msg: Incoming, a: ChallengeAnswer) -> Result<()> {
        let now = self.now;
        let s = self.nodes[at].state.storage_sessions.get(&a.session_nonce).ok_or(Error::NotAuthorized)?;
        if s.done {
            return Err(Error::ReplayRejected);
        }
        let proof = s.proof.clone().ok_or(Error::NotAuthorized)?;
        let result = storage_grant(&proof, &a.value, now);
        self.storage_finish(at, a.session_nonce, result)
    }

    pub(crate) fn on_challenge_timeout(&mut self, at: NodeAddr, session: Nonce) {
        let done = self.nodes[at].state.storage_sessions.get(&session).is_none_or(|s| s.done);
        if !done {
            let name = self.name(at).to_string();
            self.log(EventKind::Timeout, &name, "-", None, None, Some("challenge".into()));
            if let Err(e) = self.storage_finish(at, session, Err(Reason::LivenessFailed)) {
                self.log(EventKind::Fail, &name, "-", None, None, Some(e.code().into()));
            }
        }
    }

    fn storage_finish(&mut self, at: NodeAddr, session: Nonce, result: std::result::Result<(), Reason>) -> Result<()> {
        let s = self.nodes[at].state.storage_sessions.get_mut(&session).ok_or(Error::NotAuthorized)?;
        s.done = true;
        let (spk, saddr, trace) = (s.session_pk.clone(), s.session_addr, s.trace);
        let name = self.name(at).to_string();
        let verdict = match result {
            Ok(()) => "grant".to_string(),
            Err(r) => format!("deny {r}"),
        };
        self.log(EventKind::State, &name, "-", None, Some(trace), Some(format!("storage {verdict}")));
        let r = AccessResult { session_nonce: session, granted: result.is_ok(), reason: result.err() };
        self.send(at, Out::control(saddr, &spk, Body::AccessResult(r), trace).reply())
    }

    pub(crate) fn on_access_result(&mut self, at: NodeAddr, msg: Incoming, r: AccessResult) -> Result<()> {
        let tid = msg.via_session.ok_or(Error::NotAuthorized)?;
        let s = self.nodes[at].state.client_sessions.get_mut(&tid).ok_or(Error::NotAuthorized)?;
        if s.session_nonce != r.session_nonce || !s.awaiting || msg.signer.as_ref() != Some(&s.storage_pk) {
            return Err(Error::NotAuthorized);
        }
        s.awaiting = false;
        self.outcome(OutcomeKind::Storage, at, r.granted, r.reason.map(|x| x.as_str().into()), Some(msg.trace));
        Ok(())
    }

    // ---- bridges ------------------------------------------------------

    pub(crate) fn start_bridge(&mut self, issuer: NodeAddr, foreign: NodeAddr, permission: &str, duration: u64) -> Result<()> {
        let trace = TraceId::random(&mut self.rng);
        let p = self.provider.clone();
        let tenant = self.nodes[issuer].record.tenant.ok_or(Error::NotAManager)?;
        let scope = ScopeLabel::new(&tenant, permission);
        let fpk = self.nodes[foreign].record.public().clone();
        let validity = Validity::starting(self.now, duration);
        let made = create_bridge(p.as_ref(), &self.nodes[issuer].record, &fpk, scope, validity, vec![permission.to_string()]);
        let bridge = match made {
            Ok(b) => b,
            Err(e) => {
                self.outcome(OutcomeKind::Bridge, issuer, false, Some(e.code().into()), Some(trace));
                return Err(e);
            }
        };
        self.registry.bridges.push(bridge.clone());
        self.outcome(OutcomeKind::Bridge, issuer, true, None, Some(trace));
        self.send(issuer, Out::control(foreign, &fpk, Body::BridgeGrant(bridge), trace))
    }

    pub(crate) fn on_bridge_grant(&mut self, at: NodeAddr, msg: Incoming, b: CrossTenantDelegation) -> Result<()> {
        let signer = msg.signed()?;
        let p = self.provider.clone();
        if !b.verify(p.as_ref(), &signer) || b.subject_pk != *self.nodes[at].record.public() {
            return Err(Error::SignatureInvalid);
        }
        self.nodes[at].state.bridges_held.push(b);
        Ok(())
    }

    pub(crate) fn start_bridge_access(&mut self, foreign: NodeAddr, issuer: NodeAddr, permission: &str) -> Result<()> {
        let trace = TraceId::random(&mut self.rng);
        let ipk = self.nodes[issuer].record.public().clone();
        let d = ipk.digest();
        let held = self.nodes[foreign].state.bridges_held.iter().rev().find(|b| b.issuer_digest == d).cloned();
        // a node without a bridge of its own may still present someone else's
        let bridge = match held.or_else(|| self.registry.bridges.iter().rev().find(|b| b.issuer_digest == d).cloned()) {
            Some(b) => b,
            None => {
                self.outcome(OutcomeKind::BridgeAccess, foreign, false, Some(Reason::NotAuthorized.as_str().into()), Some(trace));
                return Ok(());
            }
        };
        let requested = ScopeLabel::new(&bridge.issuer_tenant, permission);
        let sent = self.send(foreign, Out::control(issuer, &ipk, Body::BridgeAccess(BridgeAccess { bridge, requested }), trace));
        if let Err(e) = &sent {
            self.outcome(OutcomeKind::BridgeAccess, foreign, false, Some(e.code().into()), Some(trace));
        }
        sent
    }

    pub(crate) fn on_bridge_access(&mut self, at: NodeAddr, msg: Incoming, a: BridgeAccess) -> Result<()> {
        let presenter = msg.signed()?;
        let p = self.provider.clone();
        let result = check_bridge_access(p.as_ref(), &self.nodes[at].record, &presenter, &a, self.now);
        let name = self.name(at).to_string();
        let verdict = match result {
            Ok(()) => "grant".to_string(),
            Err(r) => format!("deny {r}"),
        };
        self.log(EventKind::State, &name, "-", None, Some(msg.trace), Some(format!("bridge {verdict}")));
        let r = BridgeResult { granted: result.is_ok(), reason: result.err() };
        self.send(at, Out::control(msg.from, &presenter, Body::BridgeResult(r), msg.trace).reply())
    }

    pub(crate) fn on_bridge_result(&mut self, at: NodeAddr, msg: Incoming, r: BridgeResult) -> Result<()> {
        msg.signed()?;
        self.outcome(OutcomeKind::BridgeAccess, at, r.granted, r.reason.map(|x| x.as_str().into()), Some(msg.trace));
        Ok(())
    }
}
