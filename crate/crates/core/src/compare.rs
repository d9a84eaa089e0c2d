//! Ordering assertions between two run summaries that replayed the same trace.
//!
//! An assertion reads `METRIC OP [METRIC_B]`: the first metric is taken from
//! run A, the second (default: the same name) from run B. `OP` is `<`, `>` or
//! `~TOL`, the last meaning `|a − b| ≤ TOL·|b|`.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::metrics::{CommitLabel, Summary};

#[derive(Debug, Error, PartialEq)]
pub enum CompareError {
    #[error("runs replayed different workloads ({0} vs {1})")]
    MismatchedTraces(String, String),
    #[error("summary has no workload hash")]
    NoTraceHash,
    #[error("run {run} has no metric `{metric}`")]
    MissingMetric { run: char, metric: String },
    #[error("bad assertion `{0}`: expected METRIC OP [METRIC], OP one of <, >, ~TOL")]
    BadAssertion(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Relation {
    Less,
    Greater,
    Within(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assertion {
    pub metric_a: String,
    pub relation: Relation,
    pub metric_b: String,
}

impl Assertion {
    pub fn new(metric_a: &str, relation: Relation, metric_b: &str) -> Self {
        Self {
            metric_a: metric_a.into(),
            relation,
            metric_b: metric_b.into(),
        }
    }

    pub fn holds(&self, a: f64, b: f64) -> bool {
        match self.relation {
            Relation::Less => a < b,
            Relation::Greater => a > b,
            Relation::Within(tol) => (a - b).abs() <= tol * b.abs(),
        }
    }
}

impl fmt::Display for Assertion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let op = match self.relation {
            Relation::Less => "<".to_string(),
            Relation::Greater => ">".to_string(),
            Relation::Within(t) => format!("~{t}"),
        };
        if self.metric_a == self.metric_b {
            write!(f, "{} {op}", self.metric_a)
        } else {
            write!(f, "{} {op} {}", self.metric_a, self.metric_b)
        }
    }
}

impl FromStr for Assertion {
    type Err = CompareError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || CompareError::BadAssertion(s.to_string());
        let tokens: Vec<&str> = s.split_whitespace().collect();
        let (metric_a, op, metric_b) = match tokens.as_slice() {
            [m, op] => (*m, *op, *m),
            [m, op, n] => (*m, *op, *n),
            _ => return Err(bad()),
        };
        let relation = match op {
            "<" => Relation::Less,
            ">" => Relation::Greater,
            t => {
                let tol: f64 = t
                    .strip_prefix('~')
                    .ok_or_else(bad)?
                    .parse()
                    .map_err(|_| bad())?;
                if !(tol.is_finite() && tol >= 0.0) {
                    return Err(bad());
                }
                Relation::Within(tol)
            }
        };
        Ok(Self::new(metric_a, relation, metric_b))
    }
}

/// Named scalar of a summary: `distribution_time_s`, `messages`, `bytes`,
/// `mean_message_bytes`, `phi_mean`, `phi_worst`, `phi_p95`, `max_occupancy`,
/// `cl_changes`, `admission_rejections`, or `commit.LABEL.STAT` with STAT one
/// of `min`, `p50`, `p95`, `max`, `mean`.
pub fn metric(s: &Summary, name: &str) -> Option<f64> {
    Some(match name {
        "distribution_time_s" => s.distribution_time_s,
        "messages" => s.messages.messages as f64,
        "bytes" => s.messages.bytes as f64,
        "mean_message_bytes" => s.messages.mean_message_bytes,
        "phi_mean" => s.phi.mean,
        "phi_worst" => s.phi.worst,
        "phi_p95" => s.phi.p95,
        "max_occupancy" => s.max_occupancy as f64,
        "cl_changes" => s.cl_changes as f64,
        "admission_rejections" => s.requests.admission_rejections as f64,
        _ => {
            let rest = name.strip_prefix("commit.")?;
            let (label, stat) = rest.rsplit_once('.')?;
            let (_, c) = s
                .commit
                .iter()
                .find(|(l, _)| CommitLabel::as_str(**l) == label)?;
            match stat {
                "min" => c.min_us as f64,
                "p50" => c.p50_us as f64,
                "p95" => c.p95_us as f64,
                "max" => c.max_us as f64,
                "mean" => c.mean_us,
                _ => return None,
            }
        }
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub assertion: Assertion,
    pub a: f64,
    pub b: f64,
    pub pass: bool,
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.pass { "PASS" } else { "FAIL" };
        write!(
            f,
            "{verdict} {} (a = {}, b = {})",
            self.assertion, self.a, self.b
        )
    }
}

fn workload_hash(s: &Summary) -> Option<&str> {
    s.extra.get("workload_hash")?.as_str()
}

/// Evaluate every assertion; refuses runs that replayed different traces.
pub fn compare(
    a: &Summary,
    b: &Summary,
    assertions: &[Assertion],
) -> Result<Vec<CheckResult>, CompareError> {
    let (ha, hb) = (
        workload_hash(a).ok_or(CompareError::NoTraceHash)?,
        workload_hash(b).ok_or(CompareError::NoTraceHash)?,
    );
    if ha != hb {
        return Err(CompareError::MismatchedTraces(
            ha.to_string(),
            hb.to_string(),
        ));
    }
    assertions
        .iter()
        .map(|asr| {
            let va = metric(a, &asr.metric_a).ok_or_else(|| CompareError::MissingMetric {
                run: 'a',
                metric: asr.metric_a.clone(),
            })?;
            let vb = metric(b, &asr.metric_b).ok_or_else(|| CompareError::MissingMetric {
                run: 'b',
                metric: asr.metric_b.clone(),
            })?;
            Ok(CheckResult {
                assertion: asr.clone(),
                a: va,
                b: vb,
                pass: asr.holds(va, vb),
            })
        })
        .collect()
}
