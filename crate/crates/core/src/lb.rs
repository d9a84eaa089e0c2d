//! Online load balancer: place each service request on the server that keeps
//! utilizations most balanced, one PN-Counter per server.

use serde::{Deserialize, Serialize};

use crate::crdt::{RequestId, StateId};
use crate::sim::{ReplicaId, VirtualTime};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LbConfig {
    pub servers: usize,
    pub capacity: u64,
}

impl Default for LbConfig {
    fn default() -> Self {
        Self {
            servers: 2,
            capacity: 1_000_000_000,
        }
    }
}

impl LbConfig {
    pub fn states(&self) -> Vec<StateId> {
        (0..self.servers).map(server_state).collect()
    }
}

pub fn server_state(i: usize) -> StateId {
    StateId::new(format!("server-{i}")).expect("non-empty name")
}

/// Index of a server state created by [`server_state`].
pub fn server_index(state: &StateId) -> Option<usize> {
    state.as_str().strip_prefix("server-")?.parse().ok()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RequestKind {
    /// Reserve `cost` units on some server.
    Embed,
    /// Tear down an earlier embedding of `target` made by the same origin.
    Release { target: RequestId },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceRequest {
    pub request_id: RequestId,
    pub service_type: u8,
    pub cost: u64,
    pub origin: ReplicaId,
    pub arrival: VirtualTime,
    pub kind: RequestKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum EmbeddingDecision {
    Placed {
        server: usize,
        utilization: Vec<i64>,
    },
    Rejected,
}

/// `N·Σx² − (Σx)²`, i.e. N² times the population variance, computed exactly.
fn scaled_variance(v: &[i64]) -> i128 {
    let n = v.len() as i128;
    let sum: i128 = v.iter().map(|&x| x as i128).sum();
    let sq: i128 = v.iter().map(|&x| (x as i128) * (x as i128)).sum();
    n * sq - sum * sum
}

/// Choose the feasible server minimizing the spread of the resulting
/// utilization vector; ties go to the lowest index.
pub fn app_logic(cost: u64, view: &[i64], capacity: u64) -> Option<usize> {
    let mut scratch = view.to_vec();
    let mut best: Option<(i128, usize)> = None;
    for i in 0..view.len() {
        let after = view[i] as i128 + cost as i128;
        if after > capacity as i128 {
            continue;
        }
        scratch[i] = view[i] + cost as i64;
        let score = scaled_variance(&scratch);
        scratch[i] = view[i];
        if best.is_none_or(|(b, _)| score < b) {
            best = Some((score, i));
        }
    }
    best.map(|(_, i)| i)
}

pub fn decide(cost: u64, view: &[i64], capacity: u64) -> EmbeddingDecision {
    match app_logic(cost, view, capacity) {
        Some(server) => {
            let mut utilization = view.to_vec();
            utilization[server] += cost as i64;
            EmbeddingDecision::Placed {
                server,
                utilization,
            }
        }
        None => EmbeddingDecision::Rejected,
    }
}
