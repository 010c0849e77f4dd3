//! Leaderless multi-party payment channels.
//!
//! A hyperedge is a channel shared by `n >= 3` participants. Payments are
//! leaves in a DAG of per-sender revocation chains; members periodically agree
//! on a threshold-signed root that commits the resulting balances.

pub mod chain;
pub mod codec;
pub mod consensus;
pub mod crypto;
pub mod dag;
pub mod group;
pub mod payments;
pub mod sim;
pub mod state;
pub mod types;

pub use types::{Amount, HyperedgeId, ParticipantId, Tick};
