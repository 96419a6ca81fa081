//! Simulator for federated learning whose model updates are signed with a pluggable
//! signature scheme and verified by a gas-metered in-memory ledger.

pub mod bench;
pub mod fedcore;
pub mod ledger;
pub mod protocol;
pub mod sigsuite;
