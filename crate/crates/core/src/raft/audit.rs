//! Offline checker for the four RAFT safety properties over a recorded run.

use std::collections::BTreeMap;
use std::fmt;

use super::{LogEntry, LogIndex, Term};
use crate::sim::ReplicaId;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    /// Two leaders elected in one term.
    ElectionSafety {
        term: Term,
        first: ReplicaId,
        second: ReplicaId,
    },
    /// Two logs agree on (index, term) but differ at or before it.
    LogMatching {
        a: ReplicaId,
        b: ReplicaId,
        index: LogIndex,
    },
    /// A leader's log at election lacked an entry committed in an earlier term.
    LeaderCompleteness {
        leader: ReplicaId,
        term: Term,
        index: LogIndex,
    },
    /// Two replicas applied different entries at one index.
    StateMachineSafety {
        index: LogIndex,
        a: ReplicaId,
        b: ReplicaId,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::ElectionSafety {
                term,
                first,
                second,
            } => {
                write!(
                    f,
                    "election safety: {first} and {second} both led term {term}"
                )
            }
            Violation::LogMatching { a, b, index } => {
                write!(f, "log matching: {a} and {b} diverge at {index}")
            }
            Violation::LeaderCompleteness {
                leader,
                term,
                index,
            } => {
                write!(
                    f,
                    "leader completeness: {leader} (term {term}) lacks committed index {index}"
                )
            }
            Violation::StateMachineSafety { index, a, b } => {
                write!(
                    f,
                    "state machine safety: {a} and {b} applied different entries at {index}"
                )
            }
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct RaftAuditor {
    leaders: BTreeMap<Term, ReplicaId>,
    leader_logs: Vec<(ReplicaId, Term, Vec<LogEntry>)>,
    /// Entry plus the newest elected term when it was first applied.
    committed: BTreeMap<LogIndex, (LogEntry, Term)>,
    newest_term: Term,
    applied: BTreeMap<LogIndex, (ReplicaId, LogEntry)>,
    violations: Vec<Violation>,
    elections: usize,
    applies: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuditReport {
    pub elections: usize,
    pub committed: usize,
    pub applies: usize,
    pub violations: Vec<Violation>,
}

impl AuditReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

impl RaftAuditor {
    /// `log` is the new leader's log at the moment it won the election.
    pub fn on_became_leader(&mut self, node: ReplicaId, term: Term, log: &[LogEntry]) {
        self.elections += 1;
        self.newest_term = self.newest_term.max(term);
        match self.leaders.get(&term) {
            Some(&first) if first != node => {
                self.violations.push(Violation::ElectionSafety {
                    term,
                    first,
                    second: node,
                });
            }
            _ => {
                self.leaders.insert(term, node);
            }
        }
        self.leader_logs.push((node, term, log.to_vec()));
    }

    /// An entry applied by `node`; applied entries are committed entries.
    pub fn on_apply(&mut self, node: ReplicaId, entry: &LogEntry) {
        self.applies += 1;
        match self.applied.get(&entry.index) {
            Some((other, e)) if e != entry => {
                self.violations.push(Violation::StateMachineSafety {
                    index: entry.index,
                    a: *other,
                    b: node,
                });
            }
            Some(_) => {}
            None => {
                self.applied.insert(entry.index, (node, entry.clone()));
                self.committed
                    .insert(entry.index, (entry.clone(), self.newest_term));
            }
        }
    }

    pub fn finish(mut self, final_logs: &[(ReplicaId, &[LogEntry])]) -> AuditReport {
        for (leader, term, log) in &self.leader_logs {
            for (index, (e, committed_by)) in &self.committed {
                if committed_by < term && log.get(*index as usize - 1) != Some(e) {
                    self.violations.push(Violation::LeaderCompleteness {
                        leader: *leader,
                        term: *term,
                        index: *index,
                    });
                }
            }
        }
        for (i, (a, la)) in final_logs.iter().enumerate() {
            for (b, lb) in &final_logs[i + 1..] {
                if let Some(index) = log_matching_violation(la, lb) {
                    self.violations.push(Violation::LogMatching {
                        a: *a,
                        b: *b,
                        index,
                    });
                }
            }
        }
        AuditReport {
            elections: self.elections,
            committed: self.committed.len(),
            applies: self.applies,
            violations: self.violations,
        }
    }
}

/// The highest index at which both logs hold the same term, checked for an identical prefix.
fn log_matching_violation(a: &[LogEntry], b: &[LogEntry]) -> Option<LogIndex> {
    let n = a.len().min(b.len());
    let k = (0..n).rev().find(|&i| a[i].term == b[i].term)?;
    (0..=k).find(|&i| a[i] != b[i]).map(|i| i as LogIndex + 1)
}
