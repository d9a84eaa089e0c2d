//! Minimal RAFT: leader election, log replication, majority commit.
//!
//! [`RaftNode`] is a pure state machine. Every input returns nothing; the
//! effects (messages, timers, entries ready to apply) accumulate in an outbox
//! drained with [`RaftNode::take_actions`]. Term, vote and log survive a
//! failure; the caller simply stops feeding events while the replica is down
//! and calls [`RaftNode::recover`] afterwards.

pub mod audit;

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::crdt::{RequestId, UpdateRecord};
use crate::sim::ReplicaId;

pub type Term = u64;
pub type LogIndex = u64;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Command {
    Noop,
    Update(UpdateRecord),
    /// Linearizable read point for a request originating at `origin`.
    ReadMarker {
        request_id: RequestId,
        origin: ReplicaId,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogEntry {
    pub term: Term,
    pub index: LogIndex,
    pub command: Command,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RaftMessage {
    RequestVote {
        term: Term,
        candidate: ReplicaId,
        last_log_index: LogIndex,
        last_log_term: Term,
    },
    Vote {
        term: Term,
        granted: bool,
    },
    AppendEntries {
        term: Term,
        leader: ReplicaId,
        prev_index: LogIndex,
        prev_term: Term,
        entries: Vec<LogEntry>,
        leader_commit: LogIndex,
    },
    /// `match_index` is the last replicated index on success, or a resend hint on failure.
    AppendResult {
        term: Term,
        success: bool,
        match_index: LogIndex,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Follower,
    Candidate,
    Leader,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RaftAction {
    Send {
        to: ReplicaId,
        msg: RaftMessage,
    },
    ArmElection {
        token: u64,
        after_us: u64,
    },
    ArmHeartbeat {
        token: u64,
        after_us: u64,
    },
    /// Newly committed entry, in index order, exactly once per node.
    Apply(LogEntry),
    BecameLeader {
        term: Term,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RaftConfig {
    pub election_min_ms: u64,
    pub election_max_ms: u64,
    pub heartbeat_ms: u64,
}

impl Default for RaftConfig {
    fn default() -> Self {
        Self {
            election_min_ms: 150,
            election_max_ms: 300,
            heartbeat_ms: 50,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NotLeader {
    pub hint: Option<ReplicaId>,
}

#[derive(Debug, Clone)]
pub struct RaftNode {
    id: ReplicaId,
    peers: Vec<ReplicaId>,
    cfg: RaftConfig,
    rng: ChaCha8Rng,

    term: Term,
    voted_for: Option<ReplicaId>,
    log: Vec<LogEntry>,
    commit_index: LogIndex,
    last_applied: LogIndex,

    role: Role,
    leader_hint: Option<ReplicaId>,
    votes: BTreeSet<ReplicaId>,
    next_index: BTreeMap<ReplicaId, LogIndex>,
    match_index: BTreeMap<ReplicaId, LogIndex>,
    /// Highest index already sent to each peer, for pipelined appends.
    sent_index: BTreeMap<ReplicaId, LogIndex>,

    next_token: u64,
    election_token: u64,
    heartbeat_token: u64,
    actions: Vec<RaftAction>,
}

impl RaftNode {
    pub fn new(id: ReplicaId, cluster: &[ReplicaId], cfg: RaftConfig, rng: ChaCha8Rng) -> Self {
        Self {
            id,
            peers: cluster.iter().copied().filter(|r| *r != id).collect(),
            cfg,
            rng,
            term: 0,
            voted_for: None,
            log: Vec::new(),
            commit_index: 0,
            last_applied: 0,
            role: Role::Follower,
            leader_hint: None,
            votes: BTreeSet::new(),
            next_index: BTreeMap::new(),
            match_index: BTreeMap::new(),
            sent_index: BTreeMap::new(),
            next_token: 0,
            election_token: u64::MAX,
            heartbeat_token: u64::MAX,
            actions: Vec::new(),
        }
    }

    pub fn id(&self) -> ReplicaId {
        self.id
    }
    pub fn term(&self) -> Term {
        self.term
    }
    pub fn role(&self) -> Role {
        self.role
    }
    pub fn is_leader(&self) -> bool {
        self.role == Role::Leader
    }
    pub fn leader_hint(&self) -> Option<ReplicaId> {
        if self.is_leader() {
            Some(self.id)
        } else {
            self.leader_hint
        }
    }
    pub fn log(&self) -> &[LogEntry] {
        &self.log
    }
    pub fn commit_index(&self) -> LogIndex {
        self.commit_index
    }
    pub fn last_index(&self) -> LogIndex {
        self.log.len() as LogIndex
    }
    pub fn entry(&self, index: LogIndex) -> Option<&LogEntry> {
        index.checked_sub(1).and_then(|i| self.log.get(i as usize))
    }
    pub fn term_at(&self, index: LogIndex) -> Term {
        self.entry(index).map_or(0, |e| e.term)
    }
    fn majority(&self) -> usize {
        self.peers.len().div_ceil(2) + 1
    }

    pub fn take_actions(&mut self) -> Vec<RaftAction> {
        std::mem::take(&mut self.actions)
    }

    pub fn start(&mut self) {
        self.arm_election();
    }

    /// Back from a failure: volatile leadership state is gone.
    pub fn recover(&mut self) {
        self.role = Role::Follower;
        self.leader_hint = None;
        self.votes.clear();
        self.election_token = u64::MAX;
        self.heartbeat_token = u64::MAX;
        self.arm_election();
    }

    fn token(&mut self) -> u64 {
        self.next_token += 1;
        self.next_token
    }

    fn arm_election(&mut self) {
        let token = self.token();
        self.election_token = token;
        let ms = self.rng.random_range(
            self.cfg.election_min_ms..=self.cfg.election_max_ms.max(self.cfg.election_min_ms),
        );
        let jitter_us = self.rng.random_range(0..1000);
        self.actions.push(RaftAction::ArmElection {
            token,
            after_us: ms * 1000 + jitter_us,
        });
    }

    fn arm_heartbeat(&mut self) {
        let token = self.token();
        self.heartbeat_token = token;
        self.actions.push(RaftAction::ArmHeartbeat {
            token,
            after_us: self.cfg.heartbeat_ms * 1000,
        });
    }

    fn send(&mut self, to: ReplicaId, msg: RaftMessage) {
        self.actions.push(RaftAction::Send { to, msg });
    }

    fn step_down(&mut self, term: Term) {
        if term > self.term {
            self.term = term;
            self.voted_for = None;
        }
        if self.role != Role::Follower {
            self.role = Role::Follower;
            self.heartbeat_token = u64::MAX;
            self.arm_election();
        }
    }

    /// Start an election now, as if the election timer had fired.
    pub fn campaign(&mut self) {
        if self.role != Role::Leader {
            self.on_election_timeout(self.election_token);
        }
    }

    pub fn on_election_timeout(&mut self, token: u64) {
        if token != self.election_token || self.role == Role::Leader {
            return;
        }
        self.term += 1;
        self.role = Role::Candidate;
        self.voted_for = Some(self.id);
        self.leader_hint = None;
        self.votes = BTreeSet::from([self.id]);
        self.arm_election();
        if self.votes.len() >= self.majority() {
            self.become_leader();
            return;
        }
        let msg = RaftMessage::RequestVote {
            term: self.term,
            candidate: self.id,
            last_log_index: self.last_index(),
            last_log_term: self.term_at(self.last_index()),
        };
        for p in self.peers.clone() {
            self.send(p, msg.clone());
        }
    }

    pub fn on_heartbeat(&mut self, token: u64) {
        if token != self.heartbeat_token || self.role != Role::Leader {
            return;
        }
        for p in self.peers.clone() {
            let from = self.next_index[&p];
            self.send_append(p, from);
        }
        self.arm_heartbeat();
    }

    fn become_leader(&mut self) {
        self.role = Role::Leader;
        self.leader_hint = Some(self.id);
        self.election_token = u64::MAX;
        let next = self.last_index() + 1;
        for p in &self.peers {
            self.next_index.insert(*p, next);
            self.match_index.insert(*p, 0);
            self.sent_index.insert(*p, next - 1);
        }
        self.actions
            .push(RaftAction::BecameLeader { term: self.term });
        self.arm_heartbeat();
        self.append_local(Command::Noop);
        for p in self.peers.clone() {
            let from = self.next_index[&p];
            self.send_append(p, from);
        }
        self.advance_commit();
    }

    fn append_local(&mut self, command: Command) -> LogIndex {
        let index = self.last_index() + 1;
        self.log.push(LogEntry {
            term: self.term,
            index,
            command,
        });
        index
    }

    /// Send every entry from `from` to the end of the log.
    fn send_append(&mut self, to: ReplicaId, from: LogIndex) {
        let from = from.max(1);
        let prev_index = from - 1;
        let entries = self.log[prev_index as usize..].to_vec();
        self.sent_index.insert(to, self.last_index());
        let msg = RaftMessage::AppendEntries {
            term: self.term,
            leader: self.id,
            prev_index,
            prev_term: self.term_at(prev_index),
            entries,
            leader_commit: self.commit_index,
        };
        self.send(to, msg);
    }

    pub fn propose(&mut self, command: Command) -> Result<LogIndex, NotLeader> {
        if self.role != Role::Leader {
            return Err(NotLeader {
                hint: self.leader_hint,
            });
        }
        let index = self.append_local(command);
        for p in self.peers.clone() {
            let from = self.sent_index[&p] + 1;
            self.send_append(p, from);
        }
        self.advance_commit();
        Ok(index)
    }

    pub fn on_message(&mut self, from: ReplicaId, msg: RaftMessage) {
        match msg {
            RaftMessage::RequestVote {
                term,
                candidate,
                last_log_index,
                last_log_term,
            } => {
                if term > self.term {
                    self.step_down(term);
                }
                let my_last_term = self.term_at(self.last_index());
                let up_to_date =
                    (last_log_term, last_log_index) >= (my_last_term, self.last_index());
                let granted = term == self.term
                    && up_to_date
                    && self.voted_for.is_none_or(|v| v == candidate)
                    && self.role == Role::Follower;
                if granted {
                    self.voted_for = Some(candidate);
                    self.arm_election();
                }
                self.send(
                    from,
                    RaftMessage::Vote {
                        term: self.term,
                        granted,
                    },
                );
            }
            RaftMessage::Vote { term, granted } => {
                if term > self.term {
                    self.step_down(term);
                    return;
                }
                if self.role == Role::Candidate && term == self.term && granted {
                    self.votes.insert(from);
                    if self.votes.len() >= self.majority() {
                        self.become_leader();
                    }
                }
            }
            RaftMessage::AppendEntries {
                term,
                leader,
                prev_index,
                prev_term,
                entries,
                leader_commit,
            } => {
                if term < self.term {
                    self.send(
                        from,
                        RaftMessage::AppendResult {
                            term: self.term,
                            success: false,
                            match_index: 0,
                        },
                    );
                    return;
                }
                if term > self.term || self.role != Role::Follower {
                    self.step_down(term);
                }
                self.leader_hint = Some(leader);
                self.arm_election();
                if prev_index > self.last_index() || self.term_at(prev_index) != prev_term {
                    let hint = self.last_index().min(prev_index.saturating_sub(1));
                    self.send(
                        from,
                        RaftMessage::AppendResult {
                            term: self.term,
                            success: false,
                            match_index: hint,
                        },
                    );
                    return;
                }
                let last_new = prev_index + entries.len() as LogIndex;
                for e in entries {
                    match self.entry(e.index) {
                        Some(existing) if existing.term == e.term => {}
                        Some(_) => {
                            debug_assert!(
                                e.index > self.commit_index,
                                "committed entry overwritten"
                            );
                            self.log.truncate(e.index as usize - 1);
                            self.log.push(e);
                        }
                        None => self.log.push(e),
                    }
                }
                if leader_commit > self.commit_index {
                    self.commit_index = leader_commit.min(last_new);
                    self.apply_committed();
                }
                self.send(
                    from,
                    RaftMessage::AppendResult {
                        term: self.term,
                        success: true,
                        match_index: last_new,
                    },
                );
            }
            RaftMessage::AppendResult {
                term,
                success,
                match_index,
            } => {
                if term > self.term {
                    self.step_down(term);
                    return;
                }
                if self.role != Role::Leader || term != self.term {
                    return;
                }
                if success {
                    let m = self.match_index.entry(from).or_insert(0);
                    if match_index > *m {
                        *m = match_index;
                    }
                    let m = *m;
                    self.next_index.insert(from, m + 1);
                    if self.sent_index[&from] < m {
                        self.sent_index.insert(from, m);
                    }
                    self.advance_commit();
                } else {
                    let next = self.next_index[&from]
                        .saturating_sub(1)
                        .min(match_index + 1)
                        .max(1);
                    self.next_index.insert(from, next);
                    self.send_append(from, next);
                }
            }
        }
    }

    fn advance_commit(&mut self) {
        let mut n = self.last_index();
        while n > self.commit_index {
            if self.term_at(n) == self.term {
                let replicas = 1 + self.match_index.values().filter(|m| **m >= n).count();
                if replicas >= self.majority() {
                    self.commit_index = n;
                    self.apply_committed();
                    // commit change is sent with the next append or heartbeat
                    return;
                }
            }
            n -= 1;
        }
    }

    fn apply_committed(&mut self) {
        while self.last_applied < self.commit_index {
            self.last_applied += 1;
            let e = self
                .entry(self.last_applied)
                .expect("committed entry exists")
                .clone();
            self.actions.push(RaftAction::Apply(e));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::rng_stream;

    fn cluster(n: u16) -> Vec<RaftNode> {
        let ids: Vec<ReplicaId> = (0..n).map(ReplicaId).collect();
        ids.iter()
            .map(|&i| RaftNode::new(i, &ids, RaftConfig::default(), rng_stream(1, i.0 as u64)))
            .collect()
    }

    /// Deliver every outstanding message instantly until quiet; returns applied entries per node.
    fn pump(nodes: &mut [RaftNode], down: &[u16]) -> Vec<Vec<LogEntry>> {
        let mut applied = vec![Vec::new(); nodes.len()];
        loop {
            let mut msgs = Vec::new();
            for n in nodes.iter_mut() {
                for a in n.take_actions() {
                    match a {
                        RaftAction::Send { to, msg } => msgs.push((n.id(), to, msg)),
                        RaftAction::Apply(e) => applied[n.id().index()].push(e),
                        _ => {}
                    }
                }
            }
            if msgs.is_empty() {
                return applied;
            }
            for (from, to, msg) in msgs {
                if !down.contains(&to.0) && !down.contains(&from.0) {
                    nodes[to.index()].on_message(from, msg);
                }
            }
        }
    }

    fn elect(nodes: &mut [RaftNode], who: usize) {
        let tok = nodes[who].election_token;
        nodes[who].on_election_timeout(tok);
    }

    #[test]
    fn elects_and_commits() {
        let mut nodes = cluster(5);
        elect(&mut nodes, 2);
        pump(&mut nodes, &[]);
        assert!(nodes[2].is_leader());
        assert_eq!(nodes[2].term(), 1);
        let idx = nodes[2].propose(Command::Noop).unwrap();
        pump(&mut nodes, &[]);
        assert_eq!(nodes[2].commit_index(), idx);
        assert_eq!(
            nodes[0].propose(Command::Noop),
            Err(NotLeader {
                hint: Some(ReplicaId(2))
            })
        );
    }

    #[test]
    fn no_commit_without_majority() {
        let mut nodes = cluster(5);
        elect(&mut nodes, 0);
        pump(&mut nodes, &[]);
        let before = nodes[0].commit_index();
        nodes[0].propose(Command::Noop).unwrap();
        pump(&mut nodes, &[2, 3, 4]);
        assert_eq!(nodes[0].commit_index(), before);
        pump(&mut nodes, &[]);
        let hb = nodes[0].heartbeat_token;
        nodes[0].on_heartbeat(hb);
        pump(&mut nodes, &[]);
        assert_eq!(nodes[0].commit_index(), before + 1);
    }

    #[test]
    fn vote_requires_up_to_date_log() {
        let mut nodes = cluster(3);
        elect(&mut nodes, 0);
        pump(&mut nodes, &[]);
        nodes[0].propose(Command::Noop).unwrap();
        pump(&mut nodes, &[2]);
        // node 2 missed the entries, so it cannot win against nodes 0/1
        elect(&mut nodes, 2);
        let acts = nodes[2].take_actions();
        for a in acts {
            if let RaftAction::Send { to, msg } = a {
                if to.0 == 1 {
                    nodes[1].on_message(ReplicaId(2), msg);
                }
            }
        }
        let granted = nodes[1].take_actions().into_iter().any(|a| {
            matches!(
                a,
                RaftAction::Send {
                    msg: RaftMessage::Vote { granted: true, .. },
                    ..
                }
            )
        });
        assert!(!granted);
    }

    #[test]
    fn conflicting_suffix_is_overwritten() {
        let mut nodes = cluster(3);
        elect(&mut nodes, 0);
        pump(&mut nodes, &[]);
        // leader 0 appends entries nobody else sees
        nodes[0].propose(Command::Noop).unwrap();
        nodes[0].propose(Command::Noop).unwrap();
        nodes[0].take_actions();
        elect(&mut nodes, 1);
        pump(&mut nodes, &[0]);
        assert!(nodes[1].is_leader());
        nodes[1].propose(Command::Noop).unwrap();
        pump(&mut nodes, &[0]);
        let hb = nodes[1].heartbeat_token;
        nodes[1].on_heartbeat(hb);
        pump(&mut nodes, &[]);
        assert!(!nodes[0].is_leader());
        assert_eq!(nodes[0].log(), nodes[1].log());
    }

    #[test]
    fn applies_in_order_once() {
        let mut nodes = cluster(3);
        elect(&mut nodes, 1);
        let mut applied = pump(&mut nodes, &[]);
        for _ in 0..5 {
            nodes[1].propose(Command::Noop).unwrap();
            let a = pump(&mut nodes, &[]);
            for (i, v) in a.into_iter().enumerate() {
                applied[i].extend(v);
            }
        }
        let hb = nodes[1].heartbeat_token;
        nodes[1].on_heartbeat(hb);
        for (i, v) in pump(&mut nodes, &[]).into_iter().enumerate() {
            applied[i].extend(v);
        }
        for v in &applied {
            let idx: Vec<_> = v.iter().map(|e| e.index).collect();
            assert_eq!(idx, (1..=6).collect::<Vec<_>>());
        }
    }

    #[test]
    fn stale_term_append_rejected() {
        let mut nodes = cluster(3);
        elect(&mut nodes, 0);
        pump(&mut nodes, &[]);
        elect(&mut nodes, 1);
        pump(&mut nodes, &[0]);
        nodes[1].take_actions();
        let msg = RaftMessage::AppendEntries {
            term: 1,
            leader: ReplicaId(0),
            prev_index: 0,
            prev_term: 0,
            entries: vec![],
            leader_commit: 0,
        };
        nodes[1].on_message(ReplicaId(0), msg);
        let acts = nodes[1].take_actions();
        assert!(acts.iter().any(|a| matches!(
            a,
            RaftAction::Send {
                msg: RaftMessage::AppendResult {
                    success: false,
                    term: 2,
                    ..
                },
                ..
            }
        )));
    }
}
