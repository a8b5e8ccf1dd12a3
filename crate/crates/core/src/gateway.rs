//! Gateway-mediated validation: descent along the endorsement path, the
//! issuer's liveness challenge, and the gateway-signed proof that a
//! validator or storage node checks under the gateway key alone.

use std::collections::BTreeSet;

use rand::RngCore;

use crate::canonical_struct;
use crate::codec::{Canonical, Encoder};
use crate::crypto::{Ciphertext, CryptoProvider, Digest, Nonce, PublicKey, Signature};
use crate::error::{Error, Result};
use crate::messages::Reason;
use crate::protocol::action::{ActionCertProposal, ActionCertificate, Endorsement};
use crate::protocol::upgrade::ManagerAttestation;
use crate::tree::{leaf_hash, NodeRecord, Role, ScopeLabel, Validity};

pub const CHALLENGE_LEN: usize = 16;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GatewayProof {
    pub cert_hash: Digest,
    /// Digest of the ordered approval transcript.
    pub delegation_proof: Digest,
    pub storage_id: Option<Digest>,
    pub nonce: Nonce,
    pub validity: Validity,
    pub p0_random: Option<[u8; CHALLENGE_LEN]>,
    pub signature: Signature,
}
canonical_struct!(GatewayProof { cert_hash, delegation_proof, storage_id, nonce, validity, p0_random, signature });

impl GatewayProof {
    fn bytes(&self) -> Vec<u8> {
        let mut e = Encoder::new();
        e.raw(b"gateway-proof");
        e.field(&self.cert_hash);
        e.field(&self.delegation_proof);
        e.field(&self.storage_id);
        e.field(&self.nonce);
        e.field(&self.validity);
        e.field(&self.p0_random);
        e.finish()
    }

    #[allow(clippy::too_many_arguments)]
    pub fn sign(
        provider: &dyn CryptoProvider,
        gateway: &NodeRecord,
        cert_hash: Digest,
        delegation_proof: Digest,
        storage_id: Option<Digest>,
        nonce: Nonce,
        validity: Validity,
        p0_random: Option<[u8; CHALLENGE_LEN]>,
    ) -> Result<Self> {
        let mut proof = GatewayProof {
            cert_hash,
            delegation_proof,
            storage_id,
            nonce,
            validity,
            p0_random,
            signature: Signature { signer_hint: gateway.node_id, bytes: vec![] },
        };
        proof.signature = provider.sign(&gateway.keys.private, &proof.bytes())?;
        Ok(proof)
    }

    pub fn verify(&self, provider: &dyn CryptoProvider, gateway_pk: &PublicKey) -> bool {
        provider.verify(gateway_pk, &self.bytes(), &self.signature)
    }
}

/// Signed by the gateway, like the proof, so a validator needs only the
/// gateway key to trust it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GatewayDenial {
    pub cert_hash: Digest,
    pub nonce: Nonce,
    pub reason: Reason,
    pub signature: Signature,
}
canonical_struct!(GatewayDenial { cert_hash, nonce, reason, signature });

impl GatewayDenial {
    fn bytes(cert_hash: &Digest, nonce: &Nonce, reason: Reason) -> Vec<u8> {
        let mut e = Encoder::new();
        e.raw(b"gateway-denial");
        e.field(cert_hash);
        e.field(nonce);
        e.field(&reason);
        e.finish()
    }

    pub fn sign(provider: &dyn CryptoProvider, gateway: &NodeRecord, cert_hash: Digest, nonce: Nonce, reason: Reason) -> Result<Self> {
        let signature = provider.sign(&gateway.keys.private, &Self::bytes(&cert_hash, &nonce, reason))?;
        Ok(GatewayDenial { cert_hash, nonce, reason, signature })
    }

    pub fn verify(&self, provider: &dyn CryptoProvider, gateway_pk: &PublicKey) -> bool {
        provider.verify(gateway_pk, &Self::bytes(&self.cert_hash, &self.nonce, self.reason), &self.signature)
    }
}

/// Storage-facing form of an action certificate: the subject is only a
/// salted commitment and every signer hint is blanked, so it names no
/// child or manager.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AccessCertificate {
    pub commitment: Digest,
    pub permissions: ScopeLabel,
    pub nonce: Nonce,
    pub validity: Validity,
    pub endorsements: Vec<Endorsement>,
    pub manager_attestation: ManagerAttestation,
    pub proposal_signature: Vec<u8>,
    pub issuer_signature: Vec<u8>,
}

impl Canonical for AccessCertificate {
    fn encode(&self, e: &mut Encoder) {
        e.field(&self.commitment);
        e.field(&self.permissions);
        e.field(&self.nonce);
        e.field(&self.validity);
        e.field(&self.endorsements);
        e.field(&self.manager_attestation);
        e.field(&crate::codec::Bytes(self.proposal_signature.clone()));
        e.field(&crate::codec::Bytes(self.issuer_signature.clone()));
    }
    fn decode(d: &mut crate::codec::Decoder<'_>) -> std::result::Result<Self, crate::codec::CodecError> {
        Ok(AccessCertificate {
            commitment: d.field()?,
            permissions: d.field()?,
            nonce: d.field()?,
            validity: d.field()?,
            endorsements: d.field()?,
            manager_attestation: d.field()?,
            proposal_signature: d.field::<crate::codec::Bytes>()?.0,
            issuer_signature: d.field::<crate::codec::Bytes>()?.0,
        })
    }
}

fn blank(sig: &Signature) -> Signature {
    Signature { signer_hint: Digest::default(), bytes: sig.bytes.clone() }
}

impl AccessCertificate {
    pub fn from_action(cert: &ActionCertificate, lifetime: u64, attestation: ManagerAttestation) -> Self {
        let mut att = attestation;
        att.signature = blank(&att.signature);
        AccessCertificate {
            commitment: cert.proposal.subject_hash,
            permissions: cert.proposal.scope.clone(),
            nonce: cert.proposal.nonce,
            validity: Validity::starting(cert.proposal.t, lifetime),
            endorsements: cert
                .endorsements
                .iter()
                .map(|e| Endorsement { signature: blank(&e.signature), ..e.clone() })
                .collect(),
            manager_attestation: att,
            proposal_signature: cert.proposal.signature.bytes.clone(),
            issuer_signature: cert.signature.bytes.clone(),
        }
    }

    /// Rebuilds the action certificate the validation flow operates on.
    pub fn to_action(&self) -> ActionCertificate {
        let sig = |b: &Vec<u8>| Signature { signer_hint: Digest::default(), bytes: b.clone() };
        ActionCertificate {
            proposal: ActionCertProposal {
                subject_hash: self.commitment,
                scope: self.permissions.clone(),
                t: self.validity.not_before,
                nonce: self.nonce,
                signature: sig(&self.proposal_signature),
            },
            endorsements: self.endorsements.clone(),
            signature: sig(&self.issuer_signature),
        }
    }
}

/// Challenge from P0 to N: encrypted under N's key, ciphertext signed by P0.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChallengeDelivery {
    pub ciphertext: Ciphertext,
    pub signature: Signature,
}
canonical_struct!(ChallengeDelivery { ciphertext, signature });

impl ChallengeDelivery {
    pub fn create(
        provider: &dyn CryptoProvider,
        rng: &mut dyn RngCore,
        p0: &NodeRecord,
        n_pk: &PublicKey,
        value: &[u8; CHALLENGE_LEN],
    ) -> Result<Self> {
        let ciphertext = provider.encrypt(n_pk, value, rng)?;
        let signature = provider.sign(&p0.keys.private, &ciphertext.0)?;
        Ok(ChallengeDelivery { ciphertext, signature })
    }

    /// N checks its parent's signature and decrypts.
    pub fn open(&self, provider: &dyn CryptoProvider, n: &NodeRecord) -> Result<[u8; CHALLENGE_LEN]> {
        let parent = n.parent.as_ref().ok_or(Error::NoParent)?;
        if !provider.verify(parent, &self.ciphertext.0, &self.signature) {
            return Err(Error::SignatureInvalid);
        }
        provider
            .decrypt(&n.keys.private, &self.ciphertext)?
            .try_into()
            .map_err(|_| Error::DecryptionFailure)
    }
}

/// Which part of the endorsement path a descent hop is at.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Hop {
    /// The receiver signed `endorsements[i]`.
    Endorser(u32),
    /// The receiver issued the certificate.
    Issuer,
}

impl Canonical for Hop {
    fn encode(&self, e: &mut Encoder) {
        match self {
            Hop::Endorser(i) => {
                e.raw(&[0]);
                e.raw(&i.to_be_bytes());
            }
            Hop::Issuer => e.raw(&[1]),
        }
    }
    fn decode(d: &mut crate::codec::Decoder<'_>) -> std::result::Result<Self, crate::codec::CodecError> {
        match d.take(1)?[0] {
            0 => Ok(Hop::Endorser(u32::decode(d)?)),
            1 => Ok(Hop::Issuer),
            _ => Err(crate::codec::CodecError::Invalid("hop")),
        }
    }
}

impl Hop {
    /// Hop at the root: the last endorser, or the issuer when the root
    /// issued directly.
    pub fn at_root(cert: &ActionCertificate) -> Hop {
        match cert.endorsements.len() {
            0 => Hop::Issuer,
            n => Hop::Endorser(n as u32 - 1),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DescentStep {
    Forward { child: PublicKey, hop: Hop },
    Deny(Reason),
}

/// One downward validation step at an endorsing layer. The layer checks its
/// own endorsement, then finds the child that signed the endorsement below
/// (or, at P1, the proposal) using only keys it legitimately holds.
pub fn descend(provider: &dyn CryptoProvider, node: &NodeRecord, cert: &ActionCertificate, index: u32) -> DescentStep {
    let Some(own) = cert.endorsements.get(index as usize) else {
        return DescentStep::Deny(Reason::Malformed);
    };
    if !own.verify(provider, node.public()) || own.nonce != cert.proposal.nonce {
        return DescentStep::Deny(Reason::SignatureInvalid);
    }
    let live_manager = |pk: &PublicKey| {
        node.children.get(pk) == Some(&Role::Manager) && !node.revocations.is_revoked(&pk.digest())
    };
    if index == 0 {
        // P1: the issuer must be a legitimate, active manager child that did
        // not issue to itself
        let Some(p0) = node
            .children
            .keys()
            .find(|pk| cert.proposal.verify(provider, pk) && cert.verify(provider, pk))
        else {
            return DescentStep::Deny(Reason::SignatureInvalid);
        };
        if !live_manager(p0) || own.endorsed_role != Role::Manager {
            return DescentStep::Deny(Reason::IssuerRevoked);
        }
        if let Some(salt) = node.salt {
            if leaf_hash(&salt, p0) == cert.proposal.subject_hash {
                return DescentStep::Deny(Reason::SelfIssued);
            }
        }
        return DescentStep::Forward { child: p0.clone(), hop: Hop::Issuer };
    }
    let below = &cert.endorsements[index as usize - 1];
    match node.children.keys().find(|pk| below.verify(provider, pk)) {
        Some(c) if live_manager(c) => DescentStep::Forward { child: c.clone(), hop: Hop::Endorser(index - 1) },
        Some(_) => DescentStep::Deny(Reason::IssuerRevoked),
        None => DescentStep::Deny(Reason::SignatureInvalid),
    }
}

/// Issuer-side checks: own signatures, the subject commitment names a live
/// child, the certificate is fresh, its scope is within the issuer's
/// authority and its nonce is one this issuer finalized.
pub fn issuer_check(
    provider: &dyn CryptoProvider,
    p0: &NodeRecord,
    cert: &ActionCertificate,
    issued_nonces: &BTreeSet<Nonce>,
    now: u64,
    lifetime: u64,
) -> std::result::Result<PublicKey, Reason> {
    if !cert.proposal.verify(provider, p0.public()) || !cert.verify(provider, p0.public()) {
        return Err(Reason::SignatureInvalid);
    }
    let salt = p0.salt.ok_or(Reason::NotAuthorized)?;
    let Some(n) = p0.children.keys().find(|pk| leaf_hash(&salt, pk) == cert.proposal.subject_hash) else {
        return Err(Reason::UnknownSubject);
    };
    if !issued_nonces.contains(&cert.proposal.nonce) {
        return Err(Reason::NotAuthorized);
    }
    if !Validity::starting(cert.proposal.t, lifetime).contains(now) {
        return Err(Reason::Expired);
    }
    let own_scope = match &p0.cert {
        Some(c) => c.scope.clone(),
        None => ScopeLabel::tenant_root(&p0.tenant.unwrap_or_default()),
    };
    if !own_scope.contains(&cert.proposal.scope) {
        return Err(Reason::ScopeExceeded);
    }
    Ok(n.clone())
}

/// Extends the approval transcript by one layer.
pub fn extend_transcript(prev: &Digest, cert_hash: &Digest, approve: bool) -> Digest {
    crate::crypto::hash_parts(&[b"approval", prev.as_bytes(), cert_hash.as_bytes(), &[approve as u8]])
}

/// Storage-side proof checks before the liveness challenge.
pub fn storage_check_proof(proof: &GatewayProof, cert_hash: &Digest, storage_id: &Digest, now: u64) -> std::result::Result<(), Reason> {
    if &proof.cert_hash != cert_hash || proof.storage_id.as_ref() != Some(storage_id) {
        return Err(Reason::NotAuthorized);
    }
    if !proof.validity.contains(now) {
        return Err(Reason::Expired);
    }
    if proof.p0_random.is_none() {
        return Err(Reason::LivenessFailed);
    }
    Ok(())
}

/// Final comparison of N's answer against the issuer's challenge.
pub fn storage_grant(proof: &GatewayProof, answer: &[u8; CHALLENGE_LEN], now: u64) -> std::result::Result<(), Reason> {
    if !proof.validity.contains(now) {
        return Err(Reason::Expired);
    }
    match proof.p0_random {
        Some(v) if &v == answer => Ok(()),
        _ => Err(Reason::LivenessFailed),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::MockProvider;
    use crate::protocol::action::{endorse, finalize_action_cert, parent_propose, ActionDecision, ActionRequest, PendingProposal};
    use crate::tree::{accept_membership, create_root, issue_delegation};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    struct World {
        p: MockProvider,
        rng: ChaCha20Rng,
        nodes: Vec<NodeRecord>, // root, p1, p0, n
        cert: ActionCertificate,
    }

    fn build() -> World {
        let p = MockProvider;
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let mut nodes = vec![create_root(&p, "root", rng.gen(), &mut rng)];
        let t = nodes[0].tenant.unwrap();
        let salt = nodes[0].salt.unwrap();
        for (i, role) in [(1, Role::Manager), (2, Role::Manager), (3, Role::Leaf)] {
            let mut child = NodeRecord::unaffiliated(&format!("n{i}"), p.generate(&mut rng));
            let pk = child.public().clone();
            let parent = &mut nodes[i - 1];
            let c = issue_delegation(&p, parent, &pk, role, ScopeLabel::tenant_root(&t), Validity::starting(0, 1000), Nonce::random(&mut rng)).unwrap();
            let ppk = parent.public().clone();
            accept_membership(&mut child, &ppk, c, t, i as u32, salt, None);
            nodes.push(child);
        }
        let req = ActionRequest { scope: ScopeLabel::new(&t, "storage:read"), nonce: Nonce::random(&mut rng) };
        let prop = parent_propose(&p, &nodes[2], nodes[3].public(), &req, 10).unwrap();
        let e1 = endorse(&p, &nodes[1], nodes[2].public(), &prop, 11).unwrap();
        let e2 = endorse(&p, &nodes[0], nodes[1].public(), &prop, 12).unwrap();
        let dec = ActionDecision::sign(&p, &nodes[0], prop.subject_hash, prop.nonce, true, None).unwrap();
        let pending = PendingProposal { requester: nodes[3].public().clone(), proposal: prop };
        let cert = finalize_action_cert(&p, &nodes[2], &dec, &pending, vec![e1, e2]).unwrap().unwrap();
        World { p, rng, nodes, cert }
    }

    #[test]
    fn descent_follows_the_endorsement_path() {
        let w = build();
        let hop = Hop::at_root(&w.cert);
        assert_eq!(hop, Hop::Endorser(1));
        let step = descend(&w.p, &w.nodes[0], &w.cert, 1);
        assert_eq!(step, DescentStep::Forward { child: w.nodes[1].public().clone(), hop: Hop::Endorser(0) });
        let step = descend(&w.p, &w.nodes[1], &w.cert, 0);
        assert_eq!(step, DescentStep::Forward { child: w.nodes[2].public().clone(), hop: Hop::Issuer });
        let issued = BTreeSet::from([w.cert.proposal.nonce]);
        assert_eq!(issuer_check(&w.p, &w.nodes[2], &w.cert, &issued, 20, 256), Ok(w.nodes[3].public().clone()));
        assert_eq!(issuer_check(&w.p, &w.nodes[2], &w.cert, &issued, 10 + 257, 256), Err(Reason::Expired));
        assert_eq!(issuer_check(&w.p, &w.nodes[2], &w.cert, &BTreeSet::new(), 20, 256), Err(Reason::NotAuthorized));
    }

    #[test]
    fn reordered_endorsements_are_rejected() {
        let w = build();
        let mut swapped = w.cert.clone();
        swapped.endorsements.swap(0, 1);
        assert_eq!(descend(&w.p, &w.nodes[0], &swapped, 1), DescentStep::Deny(Reason::SignatureInvalid));
    }

    #[test]
    fn self_issued_certificate_is_denied_at_grandparent() {
        let w = build();
        let mut forged = w.cert.clone();
        forged.proposal.subject_hash = w.nodes[2].leaf_hash().unwrap();
        forged.resign(&w.p, &w.nodes[2].keys).unwrap();
        assert_eq!(descend(&w.p, &w.nodes[1], &forged, 0), DescentStep::Deny(Reason::SelfIssued));
    }

    #[test]
    fn access_certificate_hides_identities_and_round_trips() {
        let w = build();
        let att = ManagerAttestation::create(&w.p, &w.nodes[2], w.cert.proposal.subject_hash, w.cert.proposal.nonce, 10).unwrap();
        let access = AccessCertificate::from_action(&w.cert, 256, att);
        let bytes = access.to_canonical();
        for n in &w.nodes {
            let hay = |needle: &[u8]| bytes.windows(needle.len()).any(|x| x == needle);
            assert!(!hay(n.public().as_bytes()), "raw key of {}", n.name);
            assert!(!hay(n.node_id.as_bytes()), "key digest of {}", n.name);
        }
        let back = AccessCertificate::from_canonical(&bytes).unwrap().to_action();
        assert!(back.verify(&w.p, w.nodes[2].public()));
        assert_eq!(descend(&w.p, &w.nodes[0], &back, 1), DescentStep::Forward { child: w.nodes[1].public().clone(), hop: Hop::Endorser(0) });
        assert!(AccessCertificate::from_canonical(b"garbage").is_err());
    }

    #[test]
    fn challenge_is_readable_only_by_n() {
        let mut w = build();
        let value: [u8; 16] = w.rng.gen();
        let del = ChallengeDelivery::create(&w.p, &mut w.rng, &w.nodes[2], &w.nodes[3].public().clone(), &value).unwrap();
        assert_eq!(del.open(&w.p, &w.nodes[3]).unwrap(), value);
        assert!(w.p.decrypt(&w.nodes[2].keys.private, &del.ciphertext).is_err());
        let mut forged = del.clone();
        forged.signature = w.p.sign(&w.nodes[1].keys.private, &del.ciphertext.0).unwrap();
        assert_eq!(forged.open(&w.p, &w.nodes[3]), Err(Error::SignatureInvalid));
    }

    #[test]
    fn proof_verifies_under_gateway_key_and_expires() {
        let mut w = build();
        let gw = NodeRecord::unaffiliated("gw", w.p.generate(&mut w.rng));
        let sid = crate::crypto::hash(b"storage");
        let value = [7u8; 16];
        let proof = GatewayProof::sign(&w.p, &gw, w.cert.digest(), Digest::default(), Some(sid), Nonce::random(&mut w.rng), Validity::starting(5, 32), Some(value)).unwrap();
        assert!(proof.verify(&w.p, gw.public()));
        assert!(!proof.verify(&w.p, w.nodes[0].public()));
        assert_eq!(storage_check_proof(&proof, &w.cert.digest(), &sid, 10), Ok(()));
        assert_eq!(storage_check_proof(&proof, &w.cert.digest(), &sid, 38), Err(Reason::Expired));
        assert_eq!(storage_grant(&proof, &value, 10), Ok(()));
        assert_eq!(storage_grant(&proof, &[0; 16], 10), Err(Reason::LivenessFailed));
        assert_eq!(storage_grant(&proof, &value, 40), Err(Reason::Expired));
    }
}
