use thiserror::Error;

use crate::codec::CodecError;

/// Every failure surfaced by the protocol library.
///
/// Variant names double as the reason codes written into traces, so they are
/// kept stable.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Error {
    #[error("provider error: {0}")]
    ProviderError(String),
    #[error("decryption failed")]
    DecryptionFailure,
    #[error("signature invalid")]
    SignatureInvalid,
    #[error("recipient key not visible to sender")]
    KeyNotVisible,
    #[error("node has no parent")]
    NoParent,
    #[error("node is not a manager")]
    NotAManager,
    #[error("issuer has been revoked")]
    IssuerRevoked,
    #[error("not authorized")]
    NotAuthorized,
    #[error("no approved upgrade for this child")]
    UpgradeNotApproved,
    #[error("replayed message rejected")]
    ReplayRejected,
    #[error("decision timestamp is stale")]
    StaleDecision,
    #[error("decision does not match the pending request")]
    DecisionMismatch,
    #[error("requested scope exceeds delegated authority")]
    ScopeExceeded,
    #[error("invalid role for this operation")]
    InvalidRole,
    #[error("delivery failed: {0}")]
    DeliveryFailed(String),
    #[error("simulation did not reach quiescence within {0} ticks")]
    NonTermination(u64),
    #[error("adversary model violation: {0}")]
    ModelViolation(String),
    #[error("malformed encoding: {0}")]
    Malformed(#[from] CodecError),
    #[error("scenario error: {0}")]
    Scenario(String),
}

impl Error {
    /// Short stable code used in trace lines and reports.
    pub fn code(&self) -> &'static str {
        match self {
            Error::ProviderError(_) => "ProviderError",
            Error::DecryptionFailure => "DecryptionFailure",
            Error::SignatureInvalid => "SignatureInvalid",
            Error::KeyNotVisible => "KeyNotVisible",
            Error::NoParent => "NoParent",
            Error::NotAManager => "NotAManager",
            Error::IssuerRevoked => "IssuerRevoked",
            Error::NotAuthorized => "NotAuthorized",
            Error::UpgradeNotApproved => "UpgradeNotApproved",
            Error::ReplayRejected => "ReplayRejected",
            Error::StaleDecision => "StaleDecision",
            Error::DecisionMismatch => "DecisionMismatch",
            Error::ScopeExceeded => "ScopeExceeded",
            Error::InvalidRole => "InvalidRole",
            Error::DeliveryFailed(_) => "DeliveryFailed",
            Error::NonTermination(_) => "NonTermination",
            Error::ModelViolation(_) => "ModelViolation",
            Error::Malformed(_) => "Malformed",
            Error::Scenario(_) => "Scenario",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
