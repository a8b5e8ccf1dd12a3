//! Tree operations that need agreement beyond a single node.

pub mod action;
pub mod join;
pub mod upgrade;
