//! Online consistency adaptation: turn a stream of inefficiency reports into
//! consistency-level changes, per state.
//!
//! Level 0 is the strictest. [`ClAction::Tighten`] lowers the level index,
//! [`ClAction::Relax`] raises it; both clamp to the table range.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::crdt::StateId;
use crate::staleness::ClTable;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClAction {
    Tighten,
    Relax,
    Hold,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ThresholdConfig {
    pub upper: f64,
    pub lower: f64,
    pub window: usize,
}

impl Default for ThresholdConfig {
    fn default() -> Self {
        Self {
            upper: 3.5,
            lower: 1.5,
            window: 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PidConfig {
    pub p_gain: f64,
    pub i_gain: f64,
    pub d_gain: f64,
    pub target: f64,
    pub window: usize,
}

impl Default for PidConfig {
    fn default() -> Self {
        Self {
            p_gain: 0.2,
            i_gain: 0.2,
            d_gain: 0.1,
            target: 2.0,
            window: 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Policy {
    Threshold(ThresholdConfig),
    Pid(PidConfig),
}

fn tail(history: &[f64], window: usize) -> &[f64] {
    &history[history.len().saturating_sub(window.max(1))..]
}

/// Mean of the last `window` reports against the two triggers.
pub fn threshold_decide(history: &[f64], cfg: &ThresholdConfig) -> ClAction {
    let recent = tail(history, cfg.window);
    if recent.is_empty() {
        return ClAction::Hold;
    }
    let mean = recent.iter().sum::<f64>() / recent.len() as f64;
    if mean >= cfg.upper {
        ClAction::Tighten
    } else if mean <= cfg.lower {
        ClAction::Relax
    } else {
        ClAction::Hold
    }
}

/// Controller output `P + I + D`, or `None` with fewer than two reports.
pub fn pid_output(history: &[f64], cfg: &PidConfig) -> Option<f64> {
    let n = history.len();
    if n < 2 {
        return None;
    }
    let latest = history[n - 1];
    let previous = history[n - 2];
    let p = cfg.p_gain * (cfg.target - latest);
    let i = cfg.i_gain
        * tail(history, cfg.window)
            .iter()
            .map(|s| s - cfg.target)
            .sum::<f64>();
    let d = cfg.d_gain * ((latest - cfg.target) - (previous - cfg.target));
    Some(p + i + d)
}

/// The output is compared against the target itself, not against zero.
pub fn pid_decide(history: &[f64], cfg: &PidConfig) -> ClAction {
    match pid_output(history, cfg) {
        Some(t) if t > cfg.target => ClAction::Tighten,
        Some(t) if t < cfg.target => ClAction::Relax,
        _ => ClAction::Hold,
    }
}

pub fn next_level(level: u8, action: ClAction, table: &ClTable) -> u8 {
    match action {
        ClAction::Tighten => table.clamp(level as i32 - 1),
        ClAction::Relax => table.clamp(level as i32 + 1),
        ClAction::Hold => level,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub action: ClAction,
    pub level: u8,
    pub changed: bool,
}

/// Adaptation state kept by the owning replica.
#[derive(Debug, Clone)]
pub struct Oca {
    policy: Policy,
    table: ClTable,
    levels: BTreeMap<StateId, u8>,
    history: BTreeMap<StateId, Vec<f64>>,
    changes: u64,
}

impl Oca {
    pub fn new(policy: Policy, table: ClTable, initial_level: u8, states: &[StateId]) -> Self {
        let initial = table.clamp(initial_level as i32);
        Self {
            policy,
            table,
            levels: states.iter().map(|s| (s.clone(), initial)).collect(),
            history: BTreeMap::new(),
            changes: 0,
        }
    }

    pub fn level(&self, state: &StateId) -> Option<u8> {
        self.levels.get(state).copied()
    }

    pub fn history(&self, state: &StateId) -> &[f64] {
        self.history.get(state).map_or(&[], Vec::as_slice)
    }

    pub fn changes(&self) -> u64 {
        self.changes
    }

    pub fn report(&mut self, state: &StateId, phi: f64) -> Decision {
        let history = self.history.entry(state.clone()).or_default();
        history.push(phi);
        let action = match &self.policy {
            Policy::Threshold(cfg) => threshold_decide(history, cfg),
            Policy::Pid(cfg) => pid_decide(history, cfg),
        };
        let current = *self
            .levels
            .entry(state.clone())
            .or_insert(self.table.max_level());
        let level = next_level(current, action, &self.table);
        let changed = level != current;
        if changed {
            self.levels.insert(state.clone(), level);
            self.changes += 1;
        }
        Decision {
            action,
            level,
            changed,
        }
    }
}
