//! Replicated controller data-store lab: strong, eventual and adaptive
//! consistency over a deterministic discrete-event simulator.

pub mod adaptation;
pub mod cluster;
pub mod compare;
pub mod config;
pub mod crdt;
pub mod inspection;
pub mod lb;
pub mod metrics;
pub mod presets;
pub mod raft;
pub mod sim;
pub mod staleness;
pub mod wire;
pub mod workload;
