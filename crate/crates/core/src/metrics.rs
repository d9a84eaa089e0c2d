//! Append-only run metrics with CSV and JSON export.
//!
//! Collectors never feed back into the protocols; a disabled collector
//! records nothing and the event trace is unchanged.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crdt::{RequestId, StateId, UpdateId};
use crate::sim::{ReplicaId, VirtualTime};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum CommitLabel {
    #[serde(rename = "AC-local")]
    AcLocal,
    #[serde(rename = "AC-W3")]
    AcW3,
    #[serde(rename = "AC-W5")]
    AcW5,
    #[serde(rename = "SC-leader")]
    ScLeader,
    #[serde(rename = "SC-follower")]
    ScFollower,
    #[serde(rename = "EC")]
    Ec,
}

impl CommitLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            CommitLabel::AcLocal => "AC-local",
            CommitLabel::AcW3 => "AC-W3",
            CommitLabel::AcW5 => "AC-W5",
            CommitLabel::ScLeader => "SC-leader",
            CommitLabel::ScFollower => "SC-follower",
            CommitLabel::Ec => "EC",
        }
    }
}

impl fmt::Display for CommitLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommitSample {
    pub label: CommitLabel,
    pub update: UpdateId,
    pub latency_us: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IneffTracePoint {
    pub time: VirtualTime,
    pub replica: ReplicaId,
    pub state: StateId,
    pub phi: f64,
    /// Level applied at the reporting replica when the report was computed.
    pub level: u8,
    pub window_span: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClChangeEvent {
    pub time: VirtualTime,
    pub replica: ReplicaId,
    pub state: StateId,
    pub level: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OccupancyRecord {
    pub time: VirtualTime,
    pub replica: ReplicaId,
    pub state: StateId,
    pub admitted: bool,
    pub occupancy: usize,
    pub qs: Option<usize>,
    pub level: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    Placed {
        server: usize,
    },
    Released {
        server: usize,
    },
    RejectedCapacity,
    RejectedAdmission,
    /// A release whose target was never placed.
    NoTarget,
    Unavailable,
}

impl Outcome {
    fn label(&self) -> String {
        match self {
            Outcome::Placed { server } => format!("server-{server}"),
            Outcome::Released { server } => format!("release:server-{server}"),
            Outcome::RejectedCapacity => "rejected-capacity".into(),
            Outcome::RejectedAdmission => "rejected-admission".into(),
            Outcome::NoTarget => "no-target".into(),
            Outcome::Unavailable => "unavailable".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionRow {
    pub request_id: RequestId,
    pub arrival: VirtualTime,
    pub decided: VirtualTime,
    pub origin: ReplicaId,
    pub outcome: Outcome,
    pub utilization: Vec<i64>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplicaTraffic {
    pub messages: u64,
    pub bytes: u64,
}

#[derive(Debug, Clone, Default)]
pub struct Metrics {
    enabled: bool,
    backend: String,
    pub commits: Vec<CommitSample>,
    pub ineff: Vec<IneffTracePoint>,
    pub cl_changes: Vec<ClChangeEvent>,
    pub occupancy: Vec<OccupancyRecord>,
    pub decisions: Vec<DecisionRow>,
    pub traffic: BTreeMap<ReplicaId, ReplicaTraffic>,
    pub by_kind: BTreeMap<String, ReplicaTraffic>,
    pub first_arrival: Option<VirtualTime>,
    pub last_settled: Option<VirtualTime>,
    /// Admission refusals; a refused request may be retried and refused again.
    pub admission_rejections: u64,
}

impl Metrics {
    pub fn new(enabled: bool) -> Self {
        Self {
            enabled,
            ..Default::default()
        }
    }

    /// Backend name written into the decision log.
    pub fn with_backend(mut self, backend: &str) -> Self {
        self.backend = backend.to_string();
        self
    }

    pub fn enabled(&self) -> bool {
        self.enabled
    }

    pub fn record_commit(&mut self, label: CommitLabel, update: UpdateId, latency_us: u64) {
        if self.enabled {
            self.commits.push(CommitSample {
                label,
                update,
                latency_us,
            });
        }
    }

    pub fn record_ineff(&mut self, point: IneffTracePoint) {
        if self.enabled {
            self.ineff.push(point);
        }
    }

    pub fn record_cl_change(&mut self, event: ClChangeEvent) {
        if self.enabled {
            self.cl_changes.push(event);
        }
    }

    pub fn record_occupancy(&mut self, rec: OccupancyRecord) {
        if self.enabled {
            self.occupancy.push(rec);
        }
    }

    pub fn record_decision(&mut self, row: DecisionRow) {
        if self.enabled {
            self.decisions.push(row);
        }
    }

    pub fn record_send(&mut self, from: ReplicaId, kind: &str, bytes: usize) {
        if self.enabled {
            let t = self.traffic.entry(from).or_default();
            t.messages += 1;
            t.bytes += bytes as u64;
            let k = self.by_kind.entry(kind.to_string()).or_default();
            k.messages += 1;
            k.bytes += bytes as u64;
        }
    }

    pub fn record_rejection(&mut self) {
        if self.enabled {
            self.admission_rejections += 1;
        }
    }

    pub fn record_arrival(&mut self, at: VirtualTime) {
        if self.enabled && self.first_arrival.is_none_or(|t| at < t) {
            self.first_arrival = Some(at);
        }
    }

    /// An update reached every replica it has to reach.
    pub fn record_settled(&mut self, at: VirtualTime) {
        if self.enabled && self.last_settled.is_none_or(|t| at > t) {
            self.last_settled = Some(at);
        }
    }

    pub fn latencies(&self, label: CommitLabel) -> Vec<u64> {
        self.commits
            .iter()
            .filter(|c| c.label == label)
            .map(|c| c.latency_us)
            .collect()
    }

    pub fn distribution_time_s(&self) -> f64 {
        match (self.first_arrival, self.last_settled) {
            (Some(a), Some(b)) if b >= a => (b - a) as f64 / 1e6,
            _ => 0.0,
        }
    }

    pub fn total_traffic(&self) -> ReplicaTraffic {
        self.traffic
            .values()
            .fold(ReplicaTraffic::default(), |mut acc, t| {
                acc.messages += t.messages;
                acc.bytes += t.bytes;
                acc
            })
    }

    pub fn max_occupancy(&self) -> usize {
        self.occupancy
            .iter()
            .map(|o| o.occupancy)
            .max()
            .unwrap_or(0)
    }
}

/// Nearest-rank percentile; `None` for an empty sample.
pub fn percentile(values: &[u64], p: f64) -> Option<u64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_unstable();
    let rank = ((p / 100.0) * v.len() as f64).ceil() as usize;
    Some(v[rank.clamp(1, v.len()) - 1])
}

/// Empirical CDF as (value, cumulative fraction) steps.
pub fn cdf(values: &[f64]) -> Vec<(f64, f64)> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mut out: Vec<(f64, f64)> = Vec::new();
    for (i, x) in v.iter().enumerate() {
        let frac = (i + 1) as f64 / n;
        match out.last_mut() {
            Some(last) if last.0 == *x => last.1 = frac,
            _ => out.push((*x, frac)),
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencySummary {
    pub count: usize,
    pub min_us: u64,
    pub p50_us: u64,
    pub p95_us: u64,
    pub max_us: u64,
    pub mean_us: f64,
}

impl LatencySummary {
    pub fn of(values: &[u64]) -> Option<Self> {
        Some(Self {
            count: values.len(),
            min_us: *values.iter().min()?,
            p50_us: percentile(values, 50.0)?,
            p95_us: percentile(values, 95.0)?,
            max_us: *values.iter().max()?,
            mean_us: values.iter().sum::<u64>() as f64 / values.len() as f64,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhiSummary {
    pub count: usize,
    pub mean: f64,
    pub worst: f64,
    pub p50: f64,
    pub p95: f64,
}

impl PhiSummary {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self {
                count: 0,
                mean: 1.0,
                worst: 1.0,
                p50: 1.0,
                p95: 1.0,
            };
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let at = |p: f64| v[((p * v.len() as f64).ceil() as usize).clamp(1, v.len()) - 1];
        Self {
            count: v.len(),
            mean: v.iter().sum::<f64>() / v.len() as f64,
            worst: v[v.len() - 1],
            p50: at(0.5),
            p95: at(0.95),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicaOverhead {
    pub replica: ReplicaId,
    pub messages: u64,
    pub bytes: u64,
    pub mean_message_bytes: f64,
    pub load_bytes_per_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MessageSummary {
    pub messages: u64,
    pub bytes: u64,
    pub mean_message_bytes: f64,
    pub by_kind: BTreeMap<String, ReplicaTraffic>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestSummary {
    pub total: usize,
    pub placed: usize,
    pub released: usize,
    pub rejected_capacity: usize,
    /// Requests that never got past admission.
    pub rejected_admission: usize,
    /// Every admission refusal, retries included.
    pub admission_rejections: u64,
    pub no_target: usize,
    pub unavailable: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub backend: String,
    pub seed: u64,
    pub topology: String,
    pub trace_hash: String,
    pub events: u64,
    pub end_time_us: u64,
    pub requests: RequestSummary,
    pub commit: BTreeMap<CommitLabel, LatencySummary>,
    pub phi: PhiSummary,
    pub messages: MessageSummary,
    pub overhead: Vec<ReplicaOverhead>,
    pub distribution_time_s: f64,
    pub max_occupancy: usize,
    pub cl_changes: usize,
    pub final_values: Vec<Vec<i64>>,
    pub converged: bool,
    pub extra: BTreeMap<String, serde_json::Value>,
}

pub struct SummaryInput<'a> {
    pub backend: &'a str,
    pub seed: u64,
    pub topology: &'a str,
    pub trace_hash: String,
    pub events: u64,
    pub end_time: VirtualTime,
    pub replicas: usize,
    pub final_values: Vec<Vec<i64>>,
}

impl Metrics {
    pub fn summarize(&self, input: SummaryInput<'_>) -> Summary {
        let mut commit = BTreeMap::new();
        for label in [
            CommitLabel::AcLocal,
            CommitLabel::AcW3,
            CommitLabel::AcW5,
            CommitLabel::ScLeader,
            CommitLabel::ScFollower,
            CommitLabel::Ec,
        ] {
            if let Some(s) = LatencySummary::of(&self.latencies(label)) {
                commit.insert(label, s);
            }
        }
        let phis: Vec<f64> = self.ineff.iter().map(|p| p.phi).collect();
        let total = self.total_traffic();
        let span = self.distribution_time_s();
        let overhead = (0..input.replicas)
            .map(ReplicaId::from_index)
            .map(|r| {
                let t = self.traffic.get(&r).cloned().unwrap_or_default();
                ReplicaOverhead {
                    replica: r,
                    messages: t.messages,
                    bytes: t.bytes,
                    mean_message_bytes: if t.messages == 0 {
                        0.0
                    } else {
                        t.bytes as f64 / t.messages as f64
                    },
                    load_bytes_per_s: if span > 0.0 {
                        t.bytes as f64 / span
                    } else {
                        0.0
                    },
                }
            })
            .collect();
        let count =
            |f: fn(&Outcome) -> bool| self.decisions.iter().filter(|d| f(&d.outcome)).count();
        let converged = input.final_values.windows(2).all(|w| w[0] == w[1]);
        Summary {
            backend: input.backend.to_string(),
            seed: input.seed,
            topology: input.topology.to_string(),
            trace_hash: input.trace_hash,
            events: input.events,
            end_time_us: input.end_time.as_micros(),
            requests: RequestSummary {
                total: self.decisions.len(),
                placed: count(|o| matches!(o, Outcome::Placed { .. })),
                released: count(|o| matches!(o, Outcome::Released { .. })),
                rejected_capacity: count(|o| matches!(o, Outcome::RejectedCapacity)),
                rejected_admission: count(|o| matches!(o, Outcome::RejectedAdmission)),
                admission_rejections: self.admission_rejections,
                no_target: count(|o| matches!(o, Outcome::NoTarget)),
                unavailable: count(|o| matches!(o, Outcome::Unavailable)),
            },
            commit,
            phi: PhiSummary::of(&phis),
            messages: MessageSummary {
                messages: total.messages,
                bytes: total.bytes,
                mean_message_bytes: if total.messages == 0 {
                    0.0
                } else {
                    total.bytes as f64 / total.messages as f64
                },
                by_kind: self.by_kind.clone(),
            },
            overhead,
            distribution_time_s: span,
            max_occupancy: self.max_occupancy(),
            cl_changes: self.cl_changes.len(),
            final_values: input.final_values,
            converged,
            extra: BTreeMap::new(),
        }
    }

    /// Write every CSV into `dir` (created if missing).
    pub fn write_csvs(&self, dir: &Path) -> Result<(), MetricsError> {
        std::fs::create_dir_all(dir)?;

        let mut w = csv::Writer::from_path(dir.join("commit_times.csv"))?;
        w.write_record(["label", "update", "latency_us"])?;
        for c in &self.commits {
            w.write_record([
                c.label.as_str(),
                &c.update.to_string(),
                &c.latency_us.to_string(),
            ])?;
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join("commit_cdf.csv"))?;
        w.write_record(["label", "latency_us", "fraction"])?;
        let mut labels: Vec<CommitLabel> = self.commits.iter().map(|c| c.label).collect();
        labels.sort();
        labels.dedup();
        for label in labels {
            let v: Vec<f64> = self.latencies(label).iter().map(|&x| x as f64).collect();
            for (x, f) in cdf(&v) {
                w.write_record([label.as_str().to_string(), format!("{x}"), format!("{f}")])?;
            }
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join("inefficiency.csv"))?;
        w.write_record(["time_us", "replica", "state", "phi", "level", "window_span"])?;
        for p in &self.ineff {
            w.write_record([
                p.time.as_micros().to_string(),
                p.replica.0.to_string(),
                p.state.to_string(),
                format!("{}", p.phi),
                p.level.to_string(),
                p.window_span.to_string(),
            ])?;
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join("inefficiency_cdf.csv"))?;
        w.write_record(["phi", "fraction"])?;
        let phis: Vec<f64> = self.ineff.iter().map(|p| p.phi).collect();
        for (x, f) in cdf(&phis) {
            w.write_record([format!("{x}"), format!("{f}")])?;
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join("cl_changes.csv"))?;
        w.write_record(["time_us", "replica", "state", "level"])?;
        for c in &self.cl_changes {
            w.write_record([
                c.time.as_micros().to_string(),
                c.replica.0.to_string(),
                c.state.to_string(),
                c.level.to_string(),
            ])?;
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join("occupancy.csv"))?;
        w.write_record([
            "time_us",
            "replica",
            "state",
            "admitted",
            "occupancy",
            "qs",
            "level",
        ])?;
        for o in &self.occupancy {
            w.write_record([
                o.time.as_micros().to_string(),
                o.replica.0.to_string(),
                o.state.to_string(),
                o.admitted.to_string(),
                o.occupancy.to_string(),
                o.qs.map_or(String::new(), |q| q.to_string()),
                o.level.to_string(),
            ])?;
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join("decisions.csv"))?;
        w.write_record([
            "request_id",
            "arrival_us",
            "decided_us",
            "origin",
            "backend",
            "outcome",
            "utilization",
        ])?;
        for d in &self.decisions {
            let util: Vec<String> = d.utilization.iter().map(i64::to_string).collect();
            w.write_record([
                d.request_id.0.to_string(),
                d.arrival.as_micros().to_string(),
                d.decided.as_micros().to_string(),
                d.origin.0.to_string(),
                self.backend.clone(),
                d.outcome.label(),
                util.join(";"),
            ])?;
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join("messages.csv"))?;
        w.write_record(["replica", "messages", "bytes"])?;
        for (r, t) in &self.traffic {
            w.write_record([r.0.to_string(), t.messages.to_string(), t.bytes.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn write_summary(summary: &Summary, path: &Path) -> Result<(), MetricsError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut f = std::fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut f, summary)?;
    f.write_all(b"\n")?;
    Ok(())
}

pub fn read_summary(path: &Path) -> Result<Summary, MetricsError> {
    let f = std::fs::File::open(path)?;
    Ok(serde_json::from_reader(f)?)
}
