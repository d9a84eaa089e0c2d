//! Deterministic discrete-event simulation: virtual clock, event queue,
//! topology-derived delays and a fail/recover transport.

mod engine;
mod network;
mod time;
pub mod topology;

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use engine::{Engine, Event, Target, TraceBytes};
pub use network::{Delivery, Network};
pub use time::VirtualTime;
pub use topology::{build_delay_matrix, DelayMatrix, DelayParams, Topology};

/// Independent random stream derived from the run seed.
pub fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stream ids used by the simulation; replica `i` uses `REPLICA_BASE + i`.
pub mod streams {
    pub const TOPOLOGY: u64 = 1;
    pub const WORKLOAD: u64 = 2;
    pub const REPLICA_BASE: u64 = 100;
}

/// Index of a controller replica in the placement list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ReplicaId(pub u16);

impl ReplicaId {
    pub fn from_index(i: usize) -> Self {
        ReplicaId(u16::try_from(i).expect("replica index fits in u16"))
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for ReplicaId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("event scheduled at {at} but the clock is already at {now}")]
    ScheduleInPast { at: VirtualTime, now: VirtualTime },
    #[error("unknown replica {0}")]
    UnknownReplica(ReplicaId),
    #[error("topology line {line}: {msg}")]
    TopologyParse { line: usize, msg: String },
    #[error("topology: {0}")]
    Topology(String),
    #[error("placement nodes {a} and {b} are disconnected")]
    Disconnected { a: String, b: String },
}
