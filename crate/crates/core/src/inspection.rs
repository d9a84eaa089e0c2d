//! Performance inspection: measure how much a late-delivered remote update
//! hurt the local replica's decisions.
//!
//! On delivery of remote update `U`, the merged log (all server states) is
//! split at `U.timestamp`. Entries strictly earlier form the consistent
//! prefix. Every later entry is an affected decision: its request is replayed
//! through [`app_logic`] against the prefix with `U` already applied, giving
//! the optimal history. The actual history applies the recorded placements
//! instead, also on top of `prefix + U`, so both histories cover the same
//! requests and totals. One utilization vector per affected request is
//! compared by population standard deviation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crdt::{Op, StateId, UpdateId, UpdateRecord};
use crate::lb::{app_logic, server_index};
use crate::sim::{ReplicaId, VirtualTime};

#[derive(Debug, Error, PartialEq)]
pub enum InspectionError {
    #[error("histories differ in length ({actual} vs {optimal})")]
    LengthMismatch { actual: usize, optimal: usize },
    #[error("utilization vectors at offset {0} differ in width or are empty")]
    Width(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InspectionConfig {
    /// Most affected decisions replayed per report.
    pub window: usize,
    /// Reported when the optimal history is perfectly balanced but the actual one is not.
    pub phi_cap: f64,
}

impl Default for InspectionConfig {
    fn default() -> Self {
        Self {
            window: 256,
            phi_cap: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InefficiencyReport {
    pub reporter: ReplicaId,
    pub state: StateId,
    pub update: UpdateId,
    pub phi: f64,
    pub computed_at: VirtualTime,
    pub window_span: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Inefficiency {
    pub phi: f64,
    pub sigma_u: Vec<f64>,
    pub sigma_o: Vec<f64>,
    /// Per offset: the actual decision was worse than the optimal one.
    pub subopt: Vec<bool>,
}

/// Population standard deviation of an integer vector.
pub fn population_std(v: &[i64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let n = v.len() as i128;
    let sum: i128 = v.iter().map(|&x| x as i128).sum();
    let sq: i128 = v.iter().map(|&x| (x as i128) * (x as i128)).sum();
    let scaled = (n * sq - sum * sum).max(0) as f64;
    scaled.sqrt() / n as f64
}

pub fn comp_inefficiency(
    actual: &[Vec<i64>],
    optimal: &[Vec<i64>],
    phi_cap: f64,
) -> Result<Inefficiency, InspectionError> {
    if actual.len() != optimal.len() {
        return Err(InspectionError::LengthMismatch {
            actual: actual.len(),
            optimal: optimal.len(),
        });
    }
    let mut sigma_u = Vec::with_capacity(actual.len());
    let mut sigma_o = Vec::with_capacity(actual.len());
    for (i, (a, o)) in actual.iter().zip(optimal).enumerate() {
        if a.is_empty() || a.len() != o.len() {
            return Err(InspectionError::Width(i));
        }
        sigma_u.push(population_std(a));
        sigma_o.push(population_std(o));
    }
    let subopt = sigma_u.iter().zip(&sigma_o).map(|(u, o)| u > o).collect();
    let (mut su, mut so) = (0.0, 0.0);
    for (u, o) in sigma_u.iter().zip(&sigma_o) {
        if *u == 0.0 && *o == 0.0 {
            continue;
        }
        su += u;
        so += o;
    }
    let phi = if so > 0.0 {
        su / so
    } else if su > 0.0 {
        phi_cap
    } else {
        1.0
    };
    Ok(Inefficiency {
        phi,
        sigma_u,
        sigma_o,
        subopt,
    })
}

/// The two histories reconstructed for one remote update.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct HistoryPair {
    pub actual: Vec<Vec<i64>>,
    pub optimal: Vec<Vec<i64>>,
}

#[derive(Debug, Clone)]
pub struct Inspector {
    servers: usize,
    capacity: u64,
    config: InspectionConfig,
}

impl Inspector {
    pub fn new(servers: usize, capacity: u64, config: InspectionConfig) -> Self {
        Self {
            servers,
            capacity,
            config,
        }
    }

    pub fn config(&self) -> &InspectionConfig {
        &self.config
    }

    /// `log` is the merged log of every server state in log order; `remote`
    /// is skipped if already present.
    pub fn histories(&self, log: &[&UpdateRecord], remote: &UpdateRecord) -> HistoryPair {
        let server_of = |u: &UpdateRecord| server_index(&u.state).filter(|i| *i < self.servers);
        let mut base = vec![0i64; self.servers];
        let mut affected = Vec::new();
        for u in log.iter().copied().filter(|u| u.id != remote.id) {
            let Some(s) = server_of(u) else { continue };
            if u.timestamp < remote.timestamp {
                base[s] += u.signed_amount();
            } else if affected.len() < self.config.window {
                affected.push((s, u));
            }
        }
        if let Some(s) = server_of(remote) {
            base[s] += remote.signed_amount();
        }

        let mut actual = base.clone();
        let mut optimal = base;
        let mut pair = HistoryPair::default();
        for (s, u) in affected {
            actual[s] += u.signed_amount();
            let placed = match u.op {
                Op::Increment => app_logic(u.amount, &optimal, self.capacity).unwrap_or(s),
                Op::Decrement => s,
            };
            optimal[placed] += u.signed_amount();
            pair.actual.push(actual.clone());
            pair.optimal.push(optimal.clone());
        }
        pair
    }

    pub fn on_remote_update(
        &self,
        reporter: ReplicaId,
        log: &[&UpdateRecord],
        remote: &UpdateRecord,
        now: VirtualTime,
    ) -> InefficiencyReport {
        let pair = self.histories(log, remote);
        let phi = comp_inefficiency(&pair.actual, &pair.optimal, self.config.phi_cap)
            .expect("histories are built with equal shapes")
            .phi;
        InefficiencyReport {
            reporter,
            state: remote.state.clone(),
            update: remote.id,
            phi,
            computed_at: now,
            window_span: pair.actual.len(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crdt::{ClientId, RequestId};
    use crate::lb::server_state;

    fn rec(origin: u16, seq: u64, server: usize, amount: u64, t: u64) -> UpdateRecord {
        UpdateRecord {
            id: UpdateId {
                origin: ReplicaId(origin),
                seq,
            },
            state: server_state(server),
            op: Op::Increment,
            amount,
            client: ClientId(0),
            timestamp: VirtualTime(t),
            request_id: RequestId(origin as u64 * 1000 + seq),
        }
    }

    #[test]
    fn worked_example_gives_three() {
        let optimal = vec![vec![300, 500], vec![550, 500]];
        let actual = vec![vec![300, 500], vec![800, 250]];
        let r = comp_inefficiency(&actual, &optimal, 10.0).unwrap();
        assert_eq!(r.sigma_o, vec![100.0, 25.0]);
        assert_eq!(r.sigma_u, vec![100.0, 275.0]);
        assert_eq!(r.phi, 3.0);
        assert_eq!(r.subopt, vec![false, true]);
    }

    #[test]
    fn identical_histories_give_one() {
        let h = vec![vec![1, 5], vec![7, 2]];
        assert_eq!(comp_inefficiency(&h, &h, 10.0).unwrap().phi, 1.0);
    }

    #[test]
    fn balanced_optimal_uses_cap() {
        let optimal = vec![vec![500, 500], vec![500, 500]];
        let actual = vec![vec![1000, 0], vec![500, 500]];
        assert_eq!(
            comp_inefficiency(&actual, &optimal, 10.0).unwrap().phi,
            10.0
        );
        assert_eq!(
            comp_inefficiency(&optimal, &optimal, 10.0).unwrap().phi,
            1.0
        );
    }

    #[test]
    fn shape_errors() {
        assert!(matches!(
            comp_inefficiency(&[vec![1]], &[], 10.0),
            Err(InspectionError::LengthMismatch { .. })
        ));
        assert_eq!(
            comp_inefficiency(&[vec![1]], &[vec![1, 2]], 10.0),
            Err(InspectionError::Width(0))
        );
    }

    #[test]
    fn early_remote_update_gives_one() {
        let insp = Inspector::new(2, u64::MAX, InspectionConfig::default());
        let local = rec(0, 1, 0, 500, 100);
        let remote = rec(1, 1, 1, 500, 200);
        let r = insp.on_remote_update(ReplicaId(0), &[&local], &remote, VirtualTime(300));
        assert_eq!(r.phi, 1.0);
        assert_eq!(r.window_span, 0);
    }

    #[test]
    fn late_update_penalizes_stale_placement() {
        // remote 500 on server-0 at t=10; local replica, unaware, put 500 on server-0 too
        let insp = Inspector::new(2, u64::MAX, InspectionConfig::default());
        let remote = rec(1, 1, 0, 500, 10);
        let local = rec(0, 1, 0, 500, 20);
        let pair = insp.histories(&[&local], &remote);
        assert_eq!(pair.actual, vec![vec![1000, 0]]);
        assert_eq!(pair.optimal, vec![vec![500, 500]]);
        let r = insp.on_remote_update(ReplicaId(0), &[&local], &remote, VirtualTime(50));
        assert_eq!(r.phi, 10.0);
    }

    #[test]
    fn window_bounds_replay() {
        let insp = Inspector::new(
            2,
            u64::MAX,
            InspectionConfig {
                window: 3,
                phi_cap: 10.0,
            },
        );
        let remote = rec(1, 1, 0, 500, 0);
        let locals: Vec<_> = (0..10)
            .map(|i| rec(0, i, (i % 2) as usize, 500, 10 + i))
            .collect();
        let refs: Vec<_> = locals.iter().collect();
        assert_eq!(insp.histories(&refs, &remote).actual.len(), 3);
    }

    #[test]
    fn std_is_population() {
        assert_eq!(population_std(&[2, 4, 4, 4, 5, 5, 7, 9]), 2.0);
        assert_eq!(population_std(&[]), 0.0);
    }
}
