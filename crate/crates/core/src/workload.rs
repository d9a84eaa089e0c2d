//! Seeded request traces: exponential inter-arrival gaps, weighted origin
//! replicas, uniform integer costs. Traces round-trip through CSV so the same
//! trace can drive every backend.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::Exp;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::crdt::RequestId;
use crate::lb::{RequestKind, ServiceRequest};
use crate::sim::{rng_stream, streams, ReplicaId, VirtualTime};

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("mean inter-arrival time must be positive")]
    BadRate,
    #[error("weights must be non-empty and all at least 1")]
    BadWeights,
    #[error("cost range {0}..={1} is empty")]
    BadCost(u64, u64),
    #[error("churn probability must be in [0, 1)")]
    BadChurn,
    #[error("trace csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("trace row {row}: {msg}")]
    Row { row: usize, msg: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadConfig {
    pub mean_interarrival_us: f64,
    pub total_requests: usize,
    pub weights: Vec<u32>,
    pub cost_min: u64,
    pub cost_max: u64,
    pub service_types: u8,
    /// Probability that a request tears down an earlier embedding instead.
    pub churn: f64,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        Self {
            mean_interarrival_us: 2000.0,
            total_requests: 1000,
            weights: vec![1, 1, 2, 1, 5],
            cost_min: 500,
            cost_max: 600,
            service_types: 2,
            churn: 0.0,
        }
    }
}

impl WorkloadConfig {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        if !(self.mean_interarrival_us > 0.0 && self.mean_interarrival_us.is_finite()) {
            return Err(WorkloadError::BadRate);
        }
        if self.weights.is_empty() || self.weights.contains(&0) {
            return Err(WorkloadError::BadWeights);
        }
        if self.cost_min > self.cost_max {
            return Err(WorkloadError::BadCost(self.cost_min, self.cost_max));
        }
        if !(0.0..1.0).contains(&self.churn) {
            return Err(WorkloadError::BadChurn);
        }
        Ok(())
    }
}

pub fn generate(cfg: &WorkloadConfig, seed: u64) -> Result<Vec<ServiceRequest>, WorkloadError> {
    cfg.validate()?;
    let mut rng = rng_stream(seed, streams::WORKLOAD);
    let gaps = Exp::new(1.0 / cfg.mean_interarrival_us).map_err(|_| WorkloadError::BadRate)?;
    let origins = WeightedIndex::new(&cfg.weights).map_err(|_| WorkloadError::BadWeights)?;
    let mut live: BTreeMap<usize, Vec<(RequestId, u64)>> = BTreeMap::new();
    let mut clock = 0.0f64;
    let mut out = Vec::with_capacity(cfg.total_requests);
    for i in 0..cfg.total_requests {
        clock += gaps.sample(&mut rng);
        let origin = origins.sample(&mut rng);
        let service_type = rng.random_range(0..cfg.service_types.max(1));
        let mut cost = rng.random_range(cfg.cost_min..=cfg.cost_max);
        let mut kind = RequestKind::Embed;
        if cfg.churn > 0.0 && rng.random_bool(cfg.churn) {
            let pool = live.entry(origin).or_default();
            if let Some(&(target, c)) = pool.choose(&mut rng) {
                pool.retain(|(r, _)| *r != target);
                kind = RequestKind::Release { target };
                cost = c;
            }
        }
        let request_id = RequestId(i as u64);
        if kind == RequestKind::Embed {
            live.entry(origin).or_default().push((request_id, cost));
        }
        out.push(ServiceRequest {
            request_id,
            service_type,
            cost,
            origin: ReplicaId::from_index(origin),
            arrival: VirtualTime(clock.round() as u64),
            kind,
        });
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
struct TraceRow {
    request_id: u64,
    arrival_us: u64,
    origin: u16,
    service_type: u8,
    cost: u64,
    release_of: Option<u64>,
}

pub fn write_trace<W: Write>(requests: &[ServiceRequest], w: W) -> Result<(), WorkloadError> {
    let mut wr = csv::Writer::from_writer(w);
    for r in requests {
        wr.serialize(TraceRow {
            request_id: r.request_id.0,
            arrival_us: r.arrival.as_micros(),
            origin: r.origin.0,
            service_type: r.service_type,
            cost: r.cost,
            release_of: match r.kind {
                RequestKind::Embed => None,
                RequestKind::Release { target } => Some(target.0),
            },
        })?;
    }
    wr.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// SHA-256 of the trace in its CSV form; equal digests mean identical workloads.
pub fn trace_digest(requests: &[ServiceRequest]) -> String {
    let mut buf = Vec::new();
    write_trace(requests, &mut buf).expect("writing to memory");
    hex::encode(Sha256::digest(&buf))
}

pub fn read_trace<R: Read>(r: R) -> Result<Vec<ServiceRequest>, WorkloadError> {
    let mut rd = csv::Reader::from_reader(r);
    let mut out: Vec<ServiceRequest> = Vec::new();
    for (i, row) in rd.deserialize::<TraceRow>().enumerate() {
        let row = row?;
        let line = i + 2;
        if let Some(prev) = out.last() {
            if row.arrival_us < prev.arrival.as_micros() {
                return Err(WorkloadError::Row {
                    row: line,
                    msg: "arrivals must be non-decreasing".into(),
                });
            }
        }
        out.push(ServiceRequest {
            request_id: RequestId(row.request_id),
            service_type: row.service_type,
            cost: row.cost,
            origin: ReplicaId(row.origin),
            arrival: VirtualTime(row.arrival_us),
            kind: match row.release_of {
                None => RequestKind::Embed,
                Some(t) => RequestKind::Release {
                    target: RequestId(t),
                },
            },
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_trace() {
        let cfg = WorkloadConfig::default();
        assert_eq!(generate(&cfg, 3).unwrap(), generate(&cfg, 3).unwrap());
        assert_ne!(generate(&cfg, 3).unwrap(), generate(&cfg, 4).unwrap());
    }

    #[test]
    fn costs_and_arrivals_in_range() {
        let t = generate(&WorkloadConfig::default(), 1).unwrap();
        assert_eq!(t.len(), 1000);
        assert!(t
            .iter()
            .all(|r| (500..=600).contains(&r.cost) && r.service_type < 2));
        assert!(t.windows(2).all(|w| w[0].arrival <= w[1].arrival));
    }

    #[test]
    fn csv_round_trip() {
        let cfg = WorkloadConfig {
            churn: 0.3,
            ..Default::default()
        };
        let t = generate(&cfg, 9).unwrap();
        assert!(t
            .iter()
            .any(|r| matches!(r.kind, RequestKind::Release { .. })));
        let mut buf = Vec::new();
        write_trace(&t, &mut buf).unwrap();
        assert_eq!(read_trace(buf.as_slice()).unwrap(), t);
    }

    #[test]
    fn releases_refer_to_earlier_same_origin_embeds() {
        let cfg = WorkloadConfig {
            churn: 0.4,
            ..Default::default()
        };
        let t = generate(&cfg, 5).unwrap();
        for r in &t {
            if let RequestKind::Release { target } = r.kind {
                let e = &t[target.0 as usize];
                assert!(e.request_id < r.request_id && e.origin == r.origin && e.cost == r.cost);
                assert_eq!(e.kind, RequestKind::Embed);
            }
        }
    }

    #[test]
    fn invalid_configs() {
        let bad = |f: fn(&mut WorkloadConfig)| {
            let mut c = WorkloadConfig::default();
            f(&mut c);
            generate(&c, 0).is_err()
        };
        assert!(bad(|c| c.mean_interarrival_us = 0.0));
        assert!(bad(|c| c.weights = vec![1, 0]));
        assert!(bad(|c| c.weights.clear()));
        assert!(bad(|c| c.cost_min = 700));
        assert!(bad(|c| c.churn = 1.0));
    }

    #[test]
    fn unsorted_trace_rejected() {
        let text = "request_id,arrival_us,origin,service_type,cost,release_of\n0,10,0,0,500,\n1,5,0,0,500,\n";
        assert!(matches!(
            read_trace(text.as_bytes()),
            Err(WorkloadError::Row { row: 3, .. })
        ));
    }
}
