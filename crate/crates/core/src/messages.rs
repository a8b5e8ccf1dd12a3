//! Message bodies carried inside control payloads, and reject reasons.

use std::fmt;

use crate::canonical_struct;
use crate::codec::{Bytes, Canonical, CodecError, Decoder, Encoder};
use crate::crypto::{Digest, Nonce, PublicKey};
use crate::gateway::{ChallengeDelivery, GatewayDenial, GatewayProof, Hop, CHALLENGE_LEN};
use crate::messaging::MsgType;
use crate::protocol::action::{ActionCertProposal, ActionCertificate, ActionDecision, ActionRequest, Endorsement};
use crate::protocol::upgrade::{ManagerAttestation, PolicyFlag, UpgradeCertificate, UpgradeDecision, UpgradeHint, UpgradeRequest};
use crate::tenancy::{BridgeAccess, BridgeResult, CrossTenantDelegation};
use crate::tree::{DelegationCertificate, RevocationNotice, ScopeLabel};

pub use crate::protocol::join::{ConflictResponse, DecisionRecord, HashProbe, JoinRequest, JoinResult, ProbeDirection, Verdict};

macro_rules! reasons {
    ($($v:ident = $tag:literal => $s:literal),* $(,)?) => {
        /// Reason attached to a rejection or denial.
        #[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub enum Reason { $($v),* }

        impl Reason {
            pub const ALL: &'static [Reason] = &[$(Reason::$v),*];

            pub fn as_str(self) -> &'static str {
                match self { $(Reason::$v => $s),* }
            }

            pub fn parse(s: &str) -> Option<Reason> {
                match s { $($s => Some(Reason::$v),)* _ => None }
            }
        }

        impl Canonical for Reason {
            fn encode(&self, e: &mut Encoder) {
                e.raw(&[match self { $(Reason::$v => $tag),* }]);
            }
            fn decode(d: &mut Decoder<'_>) -> Result<Self, CodecError> {
                match d.take(1)?[0] {
                    $($tag => Ok(Reason::$v),)*
                    _ => Err(CodecError::Invalid("reason")),
                }
            }
        }
    };
}

reasons! {
    Conflict = 0 => "Conflict",
    InFlight = 1 => "InFlight",
    AggregationTimeout = 2 => "AggregationTimeout",
    DepthLimit = 3 => "DepthLimit",
    SizeQuota = 4 => "SizeQuota",
    RoleViolation = 5 => "RoleViolation",
    Custom = 6 => "Custom",
    IssuerRevoked = 7 => "IssuerRevoked",
    ScopeExceeded = 8 => "ScopeExceeded",
    SignatureInvalid = 9 => "SignatureInvalid",
    NotAuthorized = 10 => "NotAuthorized",
    SelfIssued = 11 => "SelfIssued",
    Expired = 12 => "Expired",
    StaleNonce = 13 => "StaleNonce",
    LivenessFailed = 14 => "LivenessFailed",
    Replay = 15 => "Replay",
    Malformed = 16 => "Malformed",
    UnknownSubject = 17 => "UnknownSubject",
    NoRoute = 18 => "NoRoute",
    Revoked = 19 => "Revoked",
}

impl fmt::Display for Reason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Upgrade request travelling from P1 towards the root.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UpgradeForward {
    pub request: UpgradeRequest,
    pub attestation: ManagerAttestation,
    pub flags: Vec<PolicyFlag>,
}
canonical_struct!(UpgradeForward { request, attestation, flags });

/// P0 to the leaf: the upgrade certificate and the new manager delegation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UpgradeGrant {
    pub cert: UpgradeCertificate,
    pub delegation: DelegationCertificate,
}
canonical_struct!(UpgradeGrant { cert, delegation });

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ActionForward {
    pub proposal: ActionCertProposal,
    pub endorsements: Vec<Endorsement>,
}
canonical_struct!(ActionForward { proposal, endorsements });

/// Downward action decision, carrying the endorsements collected on the
/// way up so P0 can assemble the certificate.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ActionOutcome {
    pub decision: ActionDecision,
    pub endorsements: Vec<Endorsement>,
}
canonical_struct!(ActionOutcome { decision, endorsements });

/// P0 to N: the certificate plus P0's attestation for storage use.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ActionGrant {
    pub cert: ActionCertificate,
    pub attestation: ManagerAttestation,
}
canonical_struct!(ActionGrant { cert, attestation });

/// N presents an action certificate to a validator.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ActionInvoke {
    pub action: ScopeLabel,
    pub cert: ActionCertificate,
    pub request_id: Nonce,
}
canonical_struct!(ActionInvoke { action, cert, request_id });

/// Validation request on its way to the gateway and then down the tree.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ValidationQuery {
    pub cert: ActionCertificate,
    pub action: ScopeLabel,
    pub storage_id: Option<Digest>,
    pub hop: Hop,
    pub request_id: Nonce,
}
canonical_struct!(ValidationQuery { cert, action, storage_id, hop, request_id });

/// Per-layer answer travelling back up to the gateway.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ValidationVerdict {
    pub request_id: Nonce,
    pub approved: bool,
    pub reason: Option<Reason>,
    pub transcript: Digest,
    pub challenge: Option<[u8; CHALLENGE_LEN]>,
}
canonical_struct!(ValidationVerdict { request_id, approved, reason, transcript, challenge });

/// N to storage. The access certificate is carried as raw bytes so that a
/// malformed one is rejected by the storage node rather than the transport.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StorageRequest {
    pub access: Bytes,
    pub session_pk: PublicKey,
    pub session_nonce: Nonce,
}
canonical_struct!(StorageRequest { access, session_pk, session_nonce });

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChallengeRequest {
    pub session_nonce: Nonce,
}
canonical_struct!(ChallengeRequest { session_nonce });

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChallengeAnswer {
    pub session_nonce: Nonce,
    pub value: [u8; CHALLENGE_LEN],
}
canonical_struct!(ChallengeAnswer { session_nonce, value });

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AccessResult {
    pub session_nonce: Nonce,
    pub granted: bool,
    pub reason: Option<Reason>,
}
canonical_struct!(AccessResult { session_nonce, granted, reason });

/// How far a revocation notice travels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RevocationScope {
    /// Down the revoking manager's subtree.
    Subtree,
    /// Up the path to the root, for compromise reports.
    ToRoot,
    /// From the root to every manager, recording only.
    TenantWide,
}

impl Canonical for RevocationScope {
    fn encode(&self, e: &mut Encoder) {
        e.raw(&[*self as u8]);
    }
    fn decode(d: &mut Decoder<'_>) -> Result<Self, CodecError> {
        match d.take(1)?[0] {
            0 => Ok(RevocationScope::Subtree),
            1 => Ok(RevocationScope::ToRoot),
            2 => Ok(RevocationScope::TenantWide),
            _ => Err(CodecError::Invalid("revocation scope")),
        }
    }
}

/// A notice re-signed by each forwarding hop.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RevocationMsg {
    pub notice: RevocationNotice,
    pub scope: RevocationScope,
    pub in_subject_subtree: bool,
}
canonical_struct!(RevocationMsg { notice, scope, in_subject_subtree });

/// Sent under the old key. Children get their reissued certificate; the
/// parent gets `cert: None` and answers with a [`RotationAck`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RotationAnnounce {
    pub new_pk: PublicKey,
    pub cert: Option<DelegationCertificate>,
    pub retired_at: u64,
}
canonical_struct!(RotationAnnounce { new_pk, cert, retired_at });

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RotationAck {
    pub cert: DelegationCertificate,
}
canonical_struct!(RotationAck { cert });

macro_rules! bodies {
    ($($v:ident($t:ty) = $tag:literal => $mt:ident),* $(,)?) => {
        /// Every message body, tagged by variant.
        #[derive(Clone, Debug, PartialEq, Eq)]
        pub enum Body { $($v($t)),* }

        impl Body {
            pub fn msg_type(&self) -> MsgType {
                match self { $(Body::$v(_) => MsgType::$mt),* }
            }

            /// Variant name, used for trace details and diagnostics.
            pub fn name(&self) -> &'static str {
                match self { $(Body::$v(_) => stringify!($v)),* }
            }
        }

        impl Canonical for Body {
            fn encode(&self, e: &mut Encoder) {
                match self {
                    $(Body::$v(x) => {
                        e.raw(&[$tag]);
                        e.field(x);
                    })*
                }
            }
            fn decode(d: &mut Decoder<'_>) -> Result<Self, CodecError> {
                match d.take(1)?[0] {
                    $($tag => Ok(Body::$v(d.field()?)),)*
                    _ => Err(CodecError::Invalid("body tag")),
                }
            }
        }
    };
}

bodies! {
    JoinRequest(JoinRequest) = 0 => JoinReq,
    HashProbe(HashProbe) = 1 => HashProbe,
    ConflictResponse(ConflictResponse) = 2 => ConflictResp,
    JoinDecision(DecisionRecord) = 3 => Decision,
    JoinResult(JoinResult) = 4 => Approval,
    UpgradeHint(UpgradeHint) = 5 => UpgradeReq,
    UpgradeForward(UpgradeForward) = 6 => UpgradeReq,
    UpgradeDecision(UpgradeDecision) = 7 => Decision,
    UpgradeGrant(UpgradeGrant) = 8 => Approval,
    ActionRequest(ActionRequest) = 9 => ActionCertReq,
    ActionForward(ActionForward) = 10 => Endorsement,
    ActionOutcome(ActionOutcome) = 11 => Decision,
    ActionGrant(ActionGrant) = 12 => Approval,
    ActionInvoke(ActionInvoke) = 13 => ValidationReq,
    ValidationQuery(ValidationQuery) = 14 => ValidationReq,
    ValidationVerdict(ValidationVerdict) = 15 => Approval,
    ChallengeDelivery(ChallengeDelivery) = 16 => StorageChallenge,
    GatewayProof(GatewayProof) = 17 => GatewayProof,
    GatewayDenial(GatewayDenial) = 18 => GatewayProof,
    StorageRequest(StorageRequest) = 19 => ValidationReq,
    ChallengeRequest(ChallengeRequest) = 20 => StorageChallenge,
    ChallengeAnswer(ChallengeAnswer) = 21 => StorageChallenge,
    AccessResult(AccessResult) = 22 => Approval,
    Revocation(RevocationMsg) = 23 => RevocationNotice,
    RotationAnnounce(RotationAnnounce) = 24 => KeyRotation,
    RotationAck(RotationAck) = 25 => KeyRotation,
    BridgeGrant(CrossTenantDelegation) = 26 => Approval,
    BridgeAccess(BridgeAccess) = 27 => ValidationReq,
    BridgeResult(BridgeResult) = 28 => Approval,
}
