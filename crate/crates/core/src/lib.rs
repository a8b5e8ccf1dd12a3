pub mod adversary;
pub mod checks;
pub mod codec;
pub mod crypto;
pub mod error;
pub mod gateway;
pub mod messages;
pub mod messaging;
pub mod overlay;
pub mod protocol;
pub mod scenario;
pub mod sim;
pub mod snapshot;
pub mod tenancy;
pub mod topology;
pub mod trace;
pub mod tree;

pub use error::{Error, Result};
