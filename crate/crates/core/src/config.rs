//! Run configuration: a TOML file plus programmatic overrides.
//!
//! Every field has a default, so an empty file is a valid AC run on the
//! bundled Internet2 topology. Unknown keys are rejected. Semantic errors are
//! reported with the line of the offending key when the source text is known.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adaptation::{PidConfig, Policy, ThresholdConfig};
use crate::inspection::InspectionConfig;
use crate::lb::LbConfig;
use crate::raft::RaftConfig;
use crate::staleness::{ClParams, ClTable, ClTableError, DistributionMode};
use crate::workload::WorkloadConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{0}")]
    Parse(String),
    #[error("line {line}: {msg}")]
    Invalid { line: usize, msg: String },
    #[error("{0}")]
    Semantic(String),
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Sc,
    Ec,
    Ac,
}

impl Backend {
    pub fn as_str(self) -> &'static str {
        match self {
            Backend::Sc => "sc",
            Backend::Ec => "ec",
            Backend::Ac => "ac",
        }
    }
}

impl std::str::FromStr for Backend {
    type Err = ConfigError;
    fn from_str(s: &str) -> Result<Self, ConfigError> {
        match s {
            "sc" => Ok(Backend::Sc),
            "ec" => Ok(Backend::Ec),
            "ac" => Ok(Backend::Ac),
            other => Err(ConfigError::Semantic(format!(
                "unknown backend '{other}' (expected sc, ec or ac)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdaptationKind {
    Threshold,
    Pid,
    /// Keep the initial level for the whole run.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AcConfig {
    pub adaptation: AdaptationKind,
    pub mode: DistributionMode,
    pub initial_cl: u8,
    pub min_level: u8,
    pub max_level: u8,
    pub qs_min: usize,
    pub qs_max: usize,
    pub to_min_ms: u64,
    pub to_max_ms: u64,
    /// Explicit `[qs, timeout_ms]` rows from `min_level` upwards; overrides the linear ranges.
    pub cl_table: Option<Vec<[u64; 2]>>,
    pub oca_owner: u16,
    pub commit_w: Vec<usize>,
    pub cl_retransmit_ms: u64,
    pub threshold: ThresholdConfig,
    pub pid: PidConfig,
}

impl Default for AcConfig {
    fn default() -> Self {
        Self {
            adaptation: AdaptationKind::Threshold,
            mode: DistributionMode::Fast,
            initial_cl: 3,
            min_level: 0,
            max_level: 10,
            qs_min: 3,
            qs_max: 15,
            to_min_ms: 100,
            to_max_ms: 1000,
            cl_table: None,
            oca_owner: 0,
            commit_w: vec![3, 5],
            cl_retransmit_ms: 100,
            threshold: ThresholdConfig::default(),
            pid: PidConfig::default(),
        }
    }
}

impl AcConfig {
    pub fn table(&self) -> Result<ClTable, ClTableError> {
        match &self.cl_table {
            Some(rows) => ClTable::from_rows(
                self.min_level,
                rows.iter()
                    .map(|[qs, to]| ClParams {
                        qs: *qs as usize,
                        timeout_ms: *to,
                    })
                    .collect(),
            ),
            None => ClTable::linear(
                self.min_level,
                self.max_level,
                (self.qs_min, self.qs_max),
                (self.to_min_ms, self.to_max_ms),
            ),
        }
    }

    pub fn policy(&self) -> Option<Policy> {
        match self.adaptation {
            AdaptationKind::Threshold => Some(Policy::Threshold(self.threshold)),
            AdaptationKind::Pid => Some(Policy::Pid(self.pid)),
            AdaptationKind::None => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadSection {
    pub mean_interarrival_us: f64,
    pub total_requests: usize,
    /// Defaults to the topology's weights.
    pub weights: Option<Vec<u32>>,
    pub uniform: bool,
    pub cost_min: u64,
    pub cost_max: u64,
    pub service_types: u8,
    pub churn: f64,
    /// Replay this CSV trace instead of generating one.
    pub trace: Option<PathBuf>,
    /// Offset added to every arrival, leaving time for a first leader election.
    pub start_ms: u64,
}

impl Default for WorkloadSection {
    fn default() -> Self {
        let w = WorkloadConfig::default();
        Self {
            mean_interarrival_us: w.mean_interarrival_us,
            total_requests: w.total_requests,
            weights: None,
            uniform: false,
            cost_min: w.cost_min,
            cost_max: w.cost_max,
            service_types: w.service_types,
            churn: w.churn,
            trace: None,
            start_ms: 1000,
        }
    }
}

impl WorkloadSection {
    pub fn resolve(&self, topology_weights: &[u32], replicas: usize) -> WorkloadConfig {
        let weights = if self.uniform {
            vec![1; replicas]
        } else {
            self.weights.clone().unwrap_or_else(|| {
                if topology_weights.len() == replicas {
                    topology_weights.to_vec()
                } else {
                    vec![1; replicas]
                }
            })
        };
        WorkloadConfig {
            mean_interarrival_us: self.mean_interarrival_us,
            total_requests: self.total_requests,
            weights,
            cost_min: self.cost_min,
            cost_max: self.cost_max,
            service_types: self.service_types,
            churn: self.churn,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScSection {
    pub election_min_ms: u64,
    pub election_max_ms: u64,
    pub heartbeat_ms: u64,
    /// Client-side retry interval for unanswered transaction steps.
    pub retry_ms: u64,
    /// This replica starts an election at time zero instead of waiting for its timer.
    pub preferred_leader: Option<u16>,
}

impl Default for ScSection {
    fn default() -> Self {
        let r = RaftConfig::default();
        Self {
            election_min_ms: r.election_min_ms,
            election_max_ms: r.election_max_ms,
            heartbeat_ms: r.heartbeat_ms,
            retry_ms: 500,
            preferred_leader: None,
        }
    }
}

impl ScSection {
    pub fn raft(&self) -> RaftConfig {
        RaftConfig {
            election_min_ms: self.election_min_ms,
            election_max_ms: self.election_max_ms,
            heartbeat_ms: self.heartbeat_ms,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EcSection {
    pub retransmit_ms: u64,
}

impl Default for EcSection {
    fn default() -> Self {
        Self {
            retransmit_ms: 1000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FaultAction {
    Fail,
    Recover,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Fault {
    pub at_ms: u64,
    pub replica: u16,
    pub action: FaultAction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub backend: Backend,
    /// `internet2`, `fattree`, or a path to a topology file.
    pub topology: String,
    /// Replaces the topology's placement list.
    pub placement: Option<Vec<String>>,
    pub output_dir: PathBuf,
    pub metrics: bool,
    /// Defaults to the topology file's speed, else 2e5 km/s.
    pub speed_km_s: Option<f64>,
    pub delay_scale: f64,
    pub local_loop_us: u64,
    /// Hard stop in virtual time.
    pub max_time_ms: u64,
    pub ac: AcConfig,
    pub workload: WorkloadSection,
    pub sc: ScSection,
    pub ec: EcSection,
    pub lb: LbConfig,
    pub inspection: InspectionConfig,
    pub faults: Vec<Fault>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            backend: Backend::Ac,
            topology: "internet2".into(),
            placement: None,
            output_dir: PathBuf::from("out"),
            metrics: true,
            speed_km_s: None,
            delay_scale: 1.0,
            local_loop_us: 10,
            max_time_ms: 3_600_000,
            ac: AcConfig::default(),
            workload: WorkloadSection::default(),
            sc: ScSection::default(),
            ec: EcSection::default(),
            lb: LbConfig::default(),
            inspection: InspectionConfig::default(),
            faults: Vec::new(),
        }
    }
}

/// 1-based line of the first `key =` assignment in `text`, if any.
fn line_of(text: &str, key: &str) -> Option<usize> {
    text.lines()
        .position(|l| {
            let l = l.trim_start();
            l.strip_prefix(key)
                .is_some_and(|rest| rest.trim_start().starts_with('='))
        })
        .map(|i| i + 1)
}

fn unknown_field(msg: &str) -> Option<&str> {
    msg.strip_prefix("unknown field `")?.split('`').next()
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let mut line = e
                .span()
                .map(|s| text[..s.start.min(text.len())].lines().count().max(1));
            // unknown-field errors point at the enclosing table; find the key itself
            if let (Some(from), Some(key)) = (line, unknown_field(e.message())) {
                if let Some(l) = line_of(
                    &text.lines().skip(from - 1).collect::<Vec<_>>().join("\n"),
                    key,
                ) {
                    line = Some(from - 1 + l);
                }
            }
            match line {
                Some(line) => ConfigError::Invalid {
                    line,
                    msg: e.message().to_string(),
                },
                None => ConfigError::Parse(e.to_string()),
            }
        })?;
        cfg.validate()
            .map_err(|(key, msg)| match line_of(text, key) {
                Some(line) => ConfigError::Invalid { line, msg },
                None => ConfigError::Semantic(msg),
            })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn check(&self) -> Result<(), ConfigError> {
        self.validate()
            .map_err(|(_, msg)| ConfigError::Semantic(msg))
    }

    /// Returns the offending key and a message.
    fn validate(&self) -> Result<(), (&'static str, String)> {
        if self.ac.cl_table.is_none() {
            if self.ac.qs_min == 0 {
                return Err(("qs_min", "qs_min must be at least 1".into()));
            }
            if self.ac.qs_max < self.ac.qs_min {
                return Err(("qs_max", "qs_max must be at least qs_min".into()));
            }
        }
        let table = self.ac.table().map_err(|e| ("cl_table", e.to_string()))?;
        if self.ac.initial_cl < table.min_level() || self.ac.initial_cl > table.max_level() {
            return Err((
                "initial_cl",
                format!(
                    "initial_cl {} outside level range {}..={}",
                    self.ac.initial_cl,
                    table.min_level(),
                    table.max_level()
                ),
            ));
        }
        if self.ac.commit_w.iter().any(|w| *w != 3 && *w != 5) {
            return Err(("commit_w", "commit_w entries must be 3 or 5".into()));
        }
        if self.backend == Backend::Ac && self.ac.mode == DistributionMode::Eventual {
            return Err(("mode", "the ac backend needs mode fast or batched".into()));
        }
        if !(self.delay_scale > 0.0 && self.delay_scale.is_finite()) {
            return Err(("delay_scale", "delay_scale must be positive".into()));
        }
        if let Some(s) = self.speed_km_s {
            if !(s > 0.0 && s.is_finite()) {
                return Err(("speed_km_s", "speed_km_s must be positive".into()));
            }
        }
        if self.local_loop_us == 0 {
            return Err(("local_loop_us", "local_loop_us must be at least 1".into()));
        }
        if self.lb.servers == 0 {
            return Err(("servers", "at least one server is required".into()));
        }
        let t = &self.ac.threshold;
        if t.lower >= t.upper || t.window == 0 {
            return Err((
                "threshold",
                "threshold needs lower < upper and window >= 1".into(),
            ));
        }
        if self.ac.pid.window < 2 {
            return Err(("pid", "pid window must be at least 2".into()));
        }
        if self.sc.election_min_ms == 0 || self.sc.election_max_ms < self.sc.election_min_ms {
            return Err(("election_min_ms", "election timeout range is empty".into()));
        }
        if self.sc.retry_ms == 0 {
            return Err(("retry_ms", "retry_ms must be at least 1".into()));
        }
        if self.sc.heartbeat_ms == 0 || self.sc.heartbeat_ms >= self.sc.election_min_ms {
            return Err((
                "heartbeat_ms",
                "heartbeat must be positive and below the election timeout".into(),
            ));
        }
        if self.inspection.window == 0 {
            return Err(("window", "inspection window must be at least 1".into()));
        }
        let w = &self.workload;
        if w.mean_interarrival_us.is_nan() || w.mean_interarrival_us <= 0.0 {
            return Err((
                "mean_interarrival_us",
                "mean_interarrival_us must be positive".into(),
            ));
        }
        if w.cost_min > w.cost_max {
            return Err(("cost_min", "cost_min exceeds cost_max".into()));
        }
        if let Some(ws) = &w.weights {
            if ws.is_empty() || ws.contains(&0) {
                return Err(("weights", "weights must be non-empty and at least 1".into()));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_default() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn round_trip() {
        let mut cfg = RunConfig {
            backend: Backend::Sc,
            ..RunConfig::default()
        };
        cfg.ac.cl_table = Some(vec![[3, 100], [5, 200]]);
        cfg.ac.initial_cl = 1;
        cfg.ac.adaptation = AdaptationKind::Pid;
        cfg.speed_km_s = Some(2e6);
        cfg.faults.push(Fault {
            at_ms: 10,
            replica: 2,
            action: FaultAction::Fail,
        });
        cfg.workload.weights = Some(vec![1, 2, 3]);
        let text = cfg.to_toml();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn parses_sections() {
        let text = "seed = 9\nbackend = \"ec\"\n[ac]\nmode = \"batched\"\ninitial_cl = 5\n[ac.threshold]\nupper = 4.0\nlower = 1.0\nwindow = 3\n[workload]\nmean_interarrival_us = 5000.0\n";
        let cfg = RunConfig::from_toml(text).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.backend, Backend::Ec);
        assert_eq!(cfg.ac.mode, DistributionMode::Batched);
        assert_eq!(cfg.ac.threshold.window, 3);
        assert_eq!(cfg.workload.mean_interarrival_us, 5000.0);
    }

    #[test]
    fn syntax_error_has_line() {
        let err = RunConfig::from_toml("seed = 1\nbackend = \n").unwrap_err();
        assert!(matches!(err, ConfigError::Invalid { line: 2, .. }), "{err}");
    }

    #[test]
    fn unknown_key_has_line() {
        let err = RunConfig::from_toml("seed = 1\n\n[ac]\nbogus = 3\n").unwrap_err();
        assert!(matches!(err, ConfigError::Invalid { line: 4, .. }), "{err}");
    }

    #[test]
    fn semantic_error_has_line() {
        let err = RunConfig::from_toml("seed = 1\n[ac]\ninitial_cl = 42\n").unwrap_err();
        match err {
            ConfigError::Invalid { line, msg } => {
                assert_eq!(line, 3);
                assert!(msg.contains("initial_cl"));
            }
            other => panic!("{other}"),
        }
    }

    #[test]
    fn uniform_and_topology_weights() {
        let w = WorkloadSection::default();
        assert_eq!(w.resolve(&[1, 1, 2, 1, 5], 5).weights, vec![1, 1, 2, 1, 5]);
        assert_eq!(
            WorkloadSection {
                uniform: true,
                ..w.clone()
            }
            .resolve(&[1, 1, 2, 1, 5], 5)
            .weights,
            vec![1; 5]
        );
        assert_eq!(w.resolve(&[], 4).weights, vec![1; 4]);
    }
}
