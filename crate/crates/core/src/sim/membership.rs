//! Revocation and key-rotation handlers.

use crate::crypto::PublicKey;
use crate::error::{Error, Result};
use crate::messages::{Body, RevocationMsg, RevocationScope, RotationAck, RotationAnnounce};
use crate::messaging::TraceId;
use crate::overlay::NodeAddr;
use crate::trace::EventKind;
use crate::tree::{
    accept_child_rotation, accept_parent_rotation, apply_revocation, revoke, rotate_keys, RevocationNotice, RevocationReason,
    Role,
};

use super::{Incoming, Out, OutcomeKind, World};

fn scope_tag(scope: RevocationScope, in_subtree: bool) -> u8 {
    (scope as u8) << 1 | in_subtree as u8
}

impl World {
    pub(crate) fn start_revocation(&mut self, manager: NodeAddr, subject: NodeAddr, reason: RevocationReason) -> Result<()> {
        let p = self.provider.clone();
        let trace = TraceId::random(&mut self.rng);
        let spk = self.nodes[subject].record.public().clone();
        let made = {
            let view = self.tree_view();
            revoke(p.as_ref(), &self.nodes[manager].record, &spk, reason, self.now, &view)
        };
        let rev = match made {
            Ok(r) => r,
            Err(e) => {
                self.outcome(OutcomeKind::Revocation, subject, false, Some(e.code().into()), Some(trace));
                return Err(e);
            }
        };
        let name = self.name(manager).to_string();
        self.log(EventKind::State, &name, "-", None, Some(trace), Some(format!("revoke {} affected={}", rev.notice.subject_pk_digest.short(), rev.affected.len())));
        self.outcome(OutcomeKind::Revocation, subject, true, None, Some(trace));
        let msg = RevocationMsg { notice: rev.notice.clone(), scope: RevocationScope::Subtree, in_subject_subtree: false };
        self.nodes[manager]
            .state
            .revocations_seen
            .insert((rev.notice.subject_pk_digest, rev.notice.issued_at, scope_tag(RevocationScope::Subtree, false)));
        self.spread_subtree(manager, msg, trace)?;
        if reason == RevocationReason::Compromise {
            if let Some(parent) = self.nodes[manager].record.parent.clone() {
                let up = RevocationMsg { notice: rev.notice, scope: RevocationScope::ToRoot, in_subject_subtree: false };
                let up = self.resign_notice(manager, up)?;
                let to = self.addr_of(&parent, manager).ok_or(Error::NoParent)?;
                self.send(manager, Out::control(to, &parent, Body::Revocation(up), trace))?;
            }
        }
        Ok(())
    }

    fn resign_notice(&self, at: NodeAddr, mut m: RevocationMsg) -> Result<RevocationMsg> {
        let n = &m.notice;
        let bytes = RevocationNotice::signed_bytes(&n.subject_pk_digest, n.issued_at, n.reason);
        m.notice.signature = self.provider.sign(&self.nodes[at].record.keys.private, &bytes)?;
        Ok(m)
    }

    /// Subtree dissemination from `at`: forwards, then applies locally.
    fn spread_subtree(&mut self, at: NodeAddr, m: RevocationMsg, trace: TraceId) -> Result<()> {
        let subject = m.notice.subject_pk_digest;
        let rec = &self.nodes[at].record;
        let targets: Vec<(PublicKey, bool)> = if m.in_subject_subtree {
            rec.children.keys().map(|k| (k.clone(), true)).collect()
        } else {
            rec.children
                .iter()
                .filter_map(|(k, r)| {
                    if k.digest() == subject {
                        Some((k.clone(), true))
                    } else if *r == Role::Manager {
                        Some((k.clone(), false))
                    } else {
                        None
                    }
                })
                .collect()
        };
        for (child, inside) in targets {
            let Some(to) = self.addr_of(&child, at) else { continue };
            let out = self.resign_notice(at, RevocationMsg { in_subject_subtree: inside, ..m.clone() })?;
            // the subject may already be gone from this node's view once applied
            self.send(at, Out::control(to, &child, Body::Revocation(out), trace).reply())?;
        }
        apply_revocation(&mut self.nodes[at].record, &m.notice, m.in_subject_subtree);
        self.nodes[at].state.recent_revocations.insert(subject, self.now);
        Ok(())
    }

    pub(crate) fn on_revocation(&mut self, at: NodeAddr, msg: Incoming, m: RevocationMsg) -> Result<()> {
        let signer = msg.signed()?;
        let p = self.provider.clone();
        let n = &m.notice;
        if !p.verify(&signer, &RevocationNotice::signed_bytes(&n.subject_pk_digest, n.issued_at, n.reason), &n.signature) {
            return Err(Error::SignatureInvalid);
        }
        let rec = &self.nodes[at].record;
        let from_ok = match m.scope {
            RevocationScope::Subtree | RevocationScope::TenantWide => rec.parent.as_ref() == Some(&signer),
            RevocationScope::ToRoot => rec.children.get(&signer) == Some(&Role::Manager),
        };
        if !from_ok {
            return Err(Error::NotAuthorized);
        }
        // a child can only report its own subtree: never this node, its
        // parent or a sibling of the sender
        if m.scope == RevocationScope::ToRoot {
            let d = &n.subject_pk_digest;
            let outside = *d == rec.node_id
                || rec.parent.as_ref().is_some_and(|p| p.digest() == *d)
                || rec.children.keys().any(|c| c.digest() == *d && *c != signer);
            if outside {
                return Err(Error::NotAuthorized);
            }
        }
        let key = (n.subject_pk_digest, n.issued_at, scope_tag(m.scope, m.in_subject_subtree));
        if !self.nodes[at].state.revocations_seen.insert(key) {
            return Ok(());
        }
        let name = self.name(at).to_string();
        let subject = n.subject_pk_digest;
        self.log(EventKind::State, &name, "-", None, Some(msg.trace), Some(format!("revocation {:?} {}", m.scope, subject.short())));
        match m.scope {
            RevocationScope::Subtree => self.spread_subtree(at, m, msg.trace),
            RevocationScope::ToRoot => {
                self.record_only(at, &m);
                let is_root = self.nodes[at].record.role == Role::Root;
                let next = if is_root { RevocationMsg { scope: RevocationScope::TenantWide, ..m } } else { m };
                let next = self.resign_notice(at, next)?;
                if is_root {
                    self.forward_tenant_wide(at, next, msg.trace)
                } else {
                    let parent = self.nodes[at].record.parent.clone().ok_or(Error::NoParent)?;
                    let to = self.addr_of(&parent, at).ok_or(Error::NoParent)?;
                    self.send(at, Out::control(to, &parent, Body::Revocation(next), msg.trace))
                }
            }
            RevocationScope::TenantWide => {
                self.record_only(at, &m);
                let next = self.resign_notice(at, m)?;
                self.forward_tenant_wide(at, next, msg.trace)
            }
        }
    }

    /// Records a revoked digest without touching membership, so a report
    /// from one subtree cannot cut nodes elsewhere.
    fn record_only(&mut self, at: NodeAddr, m: &RevocationMsg) {
        self.nodes[at].record.revocations.revoked.insert(m.notice.subject_pk_digest);
        self.nodes[at].state.recent_revocations.insert(m.notice.subject_pk_digest, self.now);
    }

    fn forward_tenant_wide(&mut self, at: NodeAddr, m: RevocationMsg, trace: TraceId) -> Result<()> {
        let managers: Vec<PublicKey> =
            self.nodes[at].record.children.iter().filter(|(_, r)| **r == Role::Manager).map(|(k, _)| k.clone()).collect();
        for child in managers {
            if let Some(to) = self.addr_of(&child, at) {
                self.send(at, Out::control(to, &child, Body::Revocation(m.clone()), trace))?;
            }
        }
        Ok(())
    }

    // ---- rotation -----------------------------------------------------

    pub(crate) fn start_rotation(&mut self, manager: NodeAddr) -> Result<()> {
        let p = self.provider.clone();
        let trace = TraceId::random(&mut self.rng);
        let old_keys = self.nodes[manager].record.keys.clone();
        let new_keys = self.fresh_keys();
        let (now, lifetime) = (self.now, self.config.cert_lifetime);
        let rot = rotate_keys(p.as_ref(), &mut self.nodes[manager].record, new_keys, now, lifetime, &mut self.rng)?;
        let new_pk = self.nodes[manager].record.public().clone();
        self.unregister_key(&rot.old_public.digest(), manager);
        self.register_key(new_pk.digest(), manager);
        self.key_owner.insert(new_pk.digest(), manager);
        self.nodes[manager].state.ever_known.insert(new_pk.clone());
        let name = self.name(manager).to_string();
        self.log(EventKind::State, &name, "-", None, Some(trace), Some(format!("rotate {} -> {}", rot.old_public.digest().short(), new_pk.digest().short())));
        for cert in rot.reissued {
            let child = cert.subject_pk.clone();
            let Some(to) = self.addr_of(&child, manager) else { continue };
            let a = RotationAnnounce { new_pk: new_pk.clone(), cert: Some(cert), retired_at: rot.retired_at };
            self.send(manager, Out::control(to, &child, Body::RotationAnnounce(a), trace).with_keys(old_keys.clone()))?;
        }
        if let Some(parent) = self.nodes[manager].record.parent.clone() {
            let to = self.addr_of(&parent, manager).ok_or(Error::NoParent)?;
            self.nodes[manager].state.rotation_pending = Some(new_pk.clone());
            let a = RotationAnnounce { new_pk, cert: None, retired_at: rot.retired_at };
            self.send(manager, Out::control(to, &parent, Body::RotationAnnounce(a), trace).with_keys(old_keys))?;
        } else {
            self.outcome(OutcomeKind::Rotation, manager, true, None, Some(trace));
        }
        Ok(())
    }

    pub(crate) fn on_rotation_announce(&mut self, at: NodeAddr, msg: Incoming, a: RotationAnnounce) -> Result<()> {
        let old = msg.signed()?;
        let p = self.provider.clone();
        match a.cert {
            Some(cert) => {
                if self.nodes[at].record.parent.as_ref() != Some(&old) {
                    return Err(Error::NotAuthorized);
                }
                if cert.subject_pk != *self.nodes[at].record.public() || !cert.verify_signature(p.as_ref(), &a.new_pk) {
                    return Err(Error::SignatureInvalid);
                }
                accept_parent_rotation(&mut self.nodes[at].record, &old, &a.new_pk, cert, a.retired_at);
                self.nodes[at].state.ever_known.insert(a.new_pk);
                self.outcome(OutcomeKind::Rotation, at, true, None, Some(msg.trace));
                Ok(())
            }
            None => {
                if self.nodes[at].record.children.get(&old) != Some(&Role::Manager) {
                    return Err(Error::NotAuthorized);
                }
                let (now, lifetime) = (self.now, self.config.cert_lifetime);
                let cert = accept_child_rotation(p.as_ref(), &mut self.nodes[at].record, &old, &a.new_pk, now, lifetime, &mut self.rng)?;
                self.nodes[at].state.ever_known.insert(a.new_pk.clone());
                self.send(at, Out::control(msg.from, &a.new_pk, Body::RotationAck(RotationAck { cert }), msg.trace))
            }
        }
    }

    pub(crate) fn on_rotation_ack(&mut self, at: NodeAddr, msg: Incoming, ack: RotationAck) -> Result<()> {
        let parent = self.nodes[at].record.parent.clone();
        let signer = msg.signed_by(parent.as_ref())?;
        let p = self.provider.clone();
        let me = self.nodes[at].record.public().clone();
        if self.nodes[at].state.rotation_pending.as_ref() != Some(&me)
            || ack.cert.subject_pk != me
            || !ack.cert.verify_signature(p.as_ref(), &signer)
        {
            return Err(Error::SignatureInvalid);
        }
        self.nodes[at].state.rotation_pending = None;
        let rec = &mut self.nodes[at].record;
        if let Some(chain) = rec.cert_chain.as_mut() {
            if let Some(last) = chain.last_mut() {
                *last = ack.cert.clone();
            }
        }
        rec.cert = Some(ack.cert);
        self.outcome(OutcomeKind::Rotation, at, true, None, Some(msg.trace));
        Ok(())
    }
}
