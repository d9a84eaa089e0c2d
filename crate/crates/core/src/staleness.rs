//! Consistency-level governed admission and distribution of local updates.
//!
//! Each state owns a FIFO distribution queue of locally admitted updates that
//! are not yet acknowledged by every active peer. The applied consistency
//! level bounds the queue size (`qs`) and the distribution timeout (`to`).
//!
//! * fast mode distributes the whole outstanding queue on every admission;
//! * batched mode waits until the queue is full or the timer fires;
//! * eventual mode never refuses and distributes immediately.
//!
//! Every distribution carries all still-unacknowledged entries, and a timer is
//! kept armed while the queue is non-empty, so a peer that missed a message
//! (failure, recovery) receives the entries again on the next round.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crdt::{AdmissionControl, StateId, UpdateId, UpdateRecord};
use crate::sim::{ReplicaId, VirtualTime};

#[derive(Debug, Error, PartialEq)]
pub enum ClTableError {
    #[error("consistency level table is empty")]
    Empty,
    #[error("queue size and timeout must be non-decreasing with the level (level {0})")]
    NotMonotone(u8),
    #[error("queue size must be at least 1")]
    ZeroQueue,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClParams {
    pub qs: usize,
    pub timeout_ms: u64,
}

/// A level together with the queue bound and timeout it maps to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsistencyLevel {
    pub level: u8,
    pub qs: usize,
    pub timeout_ms: u64,
}

impl ConsistencyLevel {
    pub fn timeout_us(&self) -> u64 {
        self.timeout_ms * 1_000
    }
}

/// Level → (qs, to) mapping shared by every replica. Lower level is stricter.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClTable {
    min_level: u8,
    rows: Vec<ClParams>,
}

impl ClTable {
    pub fn from_rows(min_level: u8, rows: Vec<ClParams>) -> Result<Self, ClTableError> {
        if rows.is_empty() {
            return Err(ClTableError::Empty);
        }
        if rows.iter().any(|r| r.qs == 0) {
            return Err(ClTableError::ZeroQueue);
        }
        for (i, w) in rows.windows(2).enumerate() {
            if w[1].qs < w[0].qs || w[1].timeout_ms < w[0].timeout_ms {
                return Err(ClTableError::NotMonotone(min_level + i as u8 + 1));
            }
        }
        Ok(Self { min_level, rows })
    }

    /// Linear interpolation between the strictest and most relaxed rows, rounded.
    pub fn linear(
        min_level: u8,
        max_level: u8,
        qs: (usize, usize),
        timeout_ms: (u64, u64),
    ) -> Result<Self, ClTableError> {
        if max_level < min_level {
            return Err(ClTableError::Empty);
        }
        let span = (max_level - min_level) as f64;
        let rows = (min_level..=max_level)
            .map(|l| {
                let f = if span == 0.0 {
                    0.0
                } else {
                    (l - min_level) as f64 / span
                };
                ClParams {
                    qs: (qs.0 as f64 + f * (qs.1 as f64 - qs.0 as f64)).round() as usize,
                    timeout_ms: (timeout_ms.0 as f64
                        + f * (timeout_ms.1 as f64 - timeout_ms.0 as f64))
                        .round() as u64,
                }
            })
            .collect();
        Self::from_rows(min_level, rows)
    }

    pub fn min_level(&self) -> u8 {
        self.min_level
    }

    pub fn max_level(&self) -> u8 {
        self.min_level + (self.rows.len() - 1) as u8
    }

    pub fn clamp(&self, level: i32) -> u8 {
        level.clamp(self.min_level as i32, self.max_level() as i32) as u8
    }

    pub fn get(&self, level: u8) -> Option<ConsistencyLevel> {
        let idx = level.checked_sub(self.min_level)? as usize;
        self.rows.get(idx).map(|p| ConsistencyLevel {
            level,
            qs: p.qs,
            timeout_ms: p.timeout_ms,
        })
    }

    pub fn rows(&self) -> &[ClParams] {
        &self.rows
    }
}

impl Default for ClTable {
    fn default() -> Self {
        Self::linear(0, 10, (3, 15), (100, 1000)).expect("default table is valid")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistributionMode {
    Fast,
    Batched,
    Eventual,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ControlAction {
    /// Send these updates, in order, to every peer.
    Distribute {
        state: StateId,
        updates: Vec<UpdateRecord>,
    },
    /// Fire `on_timer(state, token)` after the given delay.
    ArmTimer {
        state: StateId,
        token: u64,
        after_us: u64,
    },
}

/// One admission decision, kept for staleness audits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdmissionRecord {
    pub state: StateId,
    pub admitted: bool,
    /// Occupancy after the admission (unchanged on refusal).
    pub occupancy: usize,
    /// Queue bound of the level applied at admission; `None` when unbounded.
    pub qs: Option<usize>,
    pub level: u8,
}

#[derive(Debug, Clone)]
struct StateQueue {
    entries: VecDeque<UpdateRecord>,
    acks: BTreeMap<UpdateId, BTreeSet<ReplicaId>>,
    timer: Option<u64>,
    applied: ConsistencyLevel,
}

#[derive(Debug, Clone)]
pub struct StalenessControl {
    mode: DistributionMode,
    me: ReplicaId,
    peers: Vec<ReplicaId>,
    table: ClTable,
    eventual_retransmit_us: u64,
    queues: BTreeMap<StateId, StateQueue>,
    next_token: u64,
    outbox: Vec<ControlAction>,
    audit: Vec<AdmissionRecord>,
}

impl StalenessControl {
    pub fn new(
        mode: DistributionMode,
        me: ReplicaId,
        cluster: &[ReplicaId],
        table: ClTable,
        initial_level: u8,
        states: &[StateId],
    ) -> Self {
        let applied = table
            .get(initial_level)
            .unwrap_or_else(|| table.get(table.min_level()).expect("non-empty"));
        let queues = states
            .iter()
            .map(|s| {
                (
                    s.clone(),
                    StateQueue {
                        entries: VecDeque::new(),
                        acks: BTreeMap::new(),
                        timer: None,
                        applied,
                    },
                )
            })
            .collect();
        Self {
            mode,
            me,
            peers: cluster.iter().copied().filter(|r| *r != me).collect(),
            table,
            eventual_retransmit_us: 1_000_000,
            queues,
            next_token: 0,
            outbox: Vec::new(),
            audit: Vec::new(),
        }
    }

    pub fn with_eventual_retransmit_us(mut self, us: u64) -> Self {
        self.eventual_retransmit_us = us.max(1);
        self
    }

    pub fn mode(&self) -> DistributionMode {
        self.mode
    }

    pub fn table(&self) -> &ClTable {
        &self.table
    }

    pub fn peers(&self) -> &[ReplicaId] {
        &self.peers
    }

    pub fn applied(&self, state: &StateId) -> Option<ConsistencyLevel> {
        self.queues.get(state).map(|q| q.applied)
    }

    pub fn occupancy(&self, state: &StateId) -> usize {
        self.queues.get(state).map_or(0, |q| q.entries.len())
    }

    pub fn queue(&self, state: &StateId) -> Vec<UpdateRecord> {
        self.queues
            .get(state)
            .map(|q| q.entries.iter().cloned().collect())
            .unwrap_or_default()
    }

    pub fn total_occupancy(&self) -> usize {
        self.queues.values().map(|q| q.entries.len()).sum()
    }

    /// Whether an admission for `state` would currently succeed.
    pub fn has_room(&self, state: &StateId) -> bool {
        match (self.mode, self.queues.get(state)) {
            (_, None) => false,
            (DistributionMode::Eventual, Some(_)) => true,
            (_, Some(q)) => q.entries.len() < q.applied.qs,
        }
    }

    pub fn take_actions(&mut self) -> Vec<ControlAction> {
        std::mem::take(&mut self.outbox)
    }

    pub fn take_audit(&mut self) -> Vec<AdmissionRecord> {
        std::mem::take(&mut self.audit)
    }

    fn arm(&mut self, state: &StateId) {
        let token = self.next_token;
        self.next_token += 1;
        let q = self.queues.get_mut(state).expect("registered state");
        q.timer = Some(token);
        let after_us = match self.mode {
            DistributionMode::Eventual => self.eventual_retransmit_us,
            _ => q.applied.timeout_us(),
        };
        self.outbox.push(ControlAction::ArmTimer {
            state: state.clone(),
            token,
            after_us,
        });
    }

    fn distribute(&mut self, state: &StateId) {
        let q = &self.queues[state];
        if q.entries.is_empty() {
            return;
        }
        let updates = q.entries.iter().cloned().collect();
        self.outbox.push(ControlAction::Distribute {
            state: state.clone(),
            updates,
        });
    }

    fn admit(&mut self, update: &UpdateRecord) -> bool {
        let Some(q) = self.queues.get_mut(&update.state) else {
            return false;
        };
        let level = q.applied.level;
        let bound = match self.mode {
            DistributionMode::Eventual => None,
            _ => Some(q.applied.qs),
        };
        if let Some(qs) = bound {
            if q.entries.len() >= qs {
                let occupancy = q.entries.len();
                self.audit.push(AdmissionRecord {
                    state: update.state.clone(),
                    admitted: false,
                    occupancy,
                    qs: bound,
                    level,
                });
                return false;
            }
        }
        q.entries.push_back(update.clone());
        q.acks.insert(update.id, BTreeSet::new());
        let occupancy = q.entries.len();
        self.audit.push(AdmissionRecord {
            state: update.state.clone(),
            admitted: true,
            occupancy,
            qs: bound,
            level,
        });

        let state = &update.state;
        match self.mode {
            DistributionMode::Fast | DistributionMode::Eventual => {
                self.distribute(state);
                if self.queues[state].timer.is_none() {
                    self.arm(state);
                }
            }
            DistributionMode::Batched => {
                if Some(occupancy) == bound {
                    self.queues.get_mut(state).expect("registered").timer = None;
                    self.distribute(state);
                }
                if self.queues[state].timer.is_none() {
                    self.arm(state);
                }
            }
        }
        true
    }

    /// Timer expiry: distribute whatever is still outstanding and re-arm.
    pub fn on_timer(&mut self, state: &StateId, token: u64) {
        let Some(q) = self.queues.get_mut(state) else {
            return;
        };
        if q.timer != Some(token) {
            return;
        }
        q.timer = None;
        if !q.entries.is_empty() {
            self.distribute(state);
            self.arm(state);
        }
    }

    /// Record acknowledgments from `from`; returns the updates that became fully acknowledged.
    pub fn on_ack(
        &mut self,
        from: ReplicaId,
        state: &StateId,
        ids: &[UpdateId],
        active: &[ReplicaId],
    ) -> Vec<UpdateRecord> {
        let Some(q) = self.queues.get_mut(state) else {
            return Vec::new();
        };
        for id in ids {
            if let Some(set) = q.acks.get_mut(id) {
                set.insert(from);
            }
        }
        self.sweep(state, active)
    }

    /// Re-check every queue against a changed set of active peers.
    pub fn reevaluate(&mut self, active: &[ReplicaId]) -> Vec<UpdateRecord> {
        let states: Vec<StateId> = self.queues.keys().cloned().collect();
        states.iter().flat_map(|s| self.sweep(s, active)).collect()
    }

    fn sweep(&mut self, state: &StateId, active: &[ReplicaId]) -> Vec<UpdateRecord> {
        let me = self.me;
        let required: Vec<ReplicaId> = self
            .peers
            .iter()
            .copied()
            .filter(|p| *p != me && active.contains(p))
            .collect();
        let q = self.queues.get_mut(state).expect("registered");
        let mut removed = Vec::new();
        q.entries.retain(|u| {
            let done = q
                .acks
                .get(&u.id)
                .is_some_and(|set| required.iter().all(|p| set.contains(p)));
            if done {
                removed.push(u.clone());
            }
            !done
        });
        for u in &removed {
            q.acks.remove(&u.id);
        }
        removed
    }

    /// Switch `state` to a new level. Queued entries are kept. Returns false if unchanged.
    pub fn apply_cl(&mut self, state: &StateId, level: u8) -> bool {
        let Some(cl) = self.table.get(level) else {
            return false;
        };
        match self.queues.get_mut(state) {
            Some(q) if q.applied != cl => {
                q.applied = cl;
                true
            }
            _ => false,
        }
    }

    /// Timers do not survive a failure; redistribute and re-arm non-empty queues.
    pub fn resume(&mut self) {
        let states: Vec<StateId> = self.queues.keys().cloned().collect();
        for s in &states {
            self.queues.get_mut(s).expect("registered").timer = None;
            if !self.queues[s].entries.is_empty() {
                self.distribute(s);
                self.arm(s);
            }
        }
    }

    #[cfg(test)]
    fn timer(&self, state: &StateId) -> Option<u64> {
        self.queues[state].timer
    }
}

impl AdmissionControl for StalenessControl {
    fn eval_add_to_distribution_queue(&mut self, update: &UpdateRecord) -> bool {
        self.admit(update)
    }
}

#[derive(Debug, Clone, Default)]
struct CommitProgress {
    submitted: VirtualTime,
    local: VirtualTime,
    peers: BTreeSet<ReplicaId>,
    /// First acknowledgment time of each distinct peer, in arrival order.
    ack_times: Vec<VirtualTime>,
}

/// When each local update reached the local store and each peer.
#[derive(Debug, Clone, Default)]
pub struct CommitTracker {
    progress: BTreeMap<UpdateId, CommitProgress>,
}

impl CommitTracker {
    pub fn submit(&mut self, id: UpdateId, submitted: VirtualTime, local_applied: VirtualTime) {
        self.progress.insert(
            id,
            CommitProgress {
                submitted,
                local: local_applied,
                ..Default::default()
            },
        );
    }

    pub fn record_ack(&mut self, id: UpdateId, peer: ReplicaId, at: VirtualTime) {
        if let Some(p) = self.progress.get_mut(&id) {
            if p.peers.insert(peer) {
                p.ack_times.push(at);
            }
        }
    }

    pub fn submitted(&self, id: &UpdateId) -> Option<VirtualTime> {
        self.progress.get(id).map(|p| p.submitted)
    }

    /// Time at which `w` replicas, the origin included, hold the update.
    pub fn commit_wait(&self, id: &UpdateId, w: usize) -> Option<VirtualTime> {
        let p = self.progress.get(id)?;
        match w {
            0 => None,
            1 => Some(p.local),
            _ => p.ack_times.get(w - 2).map(|t| (*t).max(p.local)),
        }
    }

    pub fn ids(&self) -> impl Iterator<Item = &UpdateId> {
        self.progress.keys()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crdt::{ClientId, Op, RequestId};

    fn sid() -> StateId {
        StateId::new("server-0").unwrap()
    }

    fn upd(seq: u64) -> UpdateRecord {
        UpdateRecord {
            id: UpdateId {
                origin: ReplicaId(0),
                seq,
            },
            state: sid(),
            op: Op::Increment,
            amount: 500,
            client: ClientId(0),
            timestamp: VirtualTime(seq),
            request_id: RequestId(seq),
        }
    }

    fn cluster(n: u16) -> Vec<ReplicaId> {
        (0..n).map(ReplicaId).collect()
    }

    fn control(mode: DistributionMode, qs: usize) -> StalenessControl {
        let table = ClTable::from_rows(
            0,
            vec![ClParams {
                qs,
                timeout_ms: 100,
            }],
        )
        .unwrap();
        StalenessControl::new(mode, ReplicaId(0), &cluster(5), table, 0, &[sid()])
    }

    fn distributions(actions: &[ControlAction]) -> Vec<usize> {
        actions
            .iter()
            .filter_map(|a| match a {
                ControlAction::Distribute { updates, .. } => Some(updates.len()),
                _ => None,
            })
            .collect()
    }

    #[test]
    fn default_table_endpoints() {
        let t = ClTable::default();
        assert_eq!(
            t.get(0),
            Some(ConsistencyLevel {
                level: 0,
                qs: 3,
                timeout_ms: 100
            })
        );
        assert_eq!(
            t.get(10),
            Some(ConsistencyLevel {
                level: 10,
                qs: 15,
                timeout_ms: 1000
            })
        );
        assert_eq!(t.get(3).unwrap().qs, 7);
        assert_eq!(t.get(3).unwrap().timeout_ms, 370);
        assert!(t.get(11).is_none());
        for w in t.rows().windows(2) {
            assert!(w[0].qs <= w[1].qs && w[0].timeout_ms <= w[1].timeout_ms);
        }
    }

    #[test]
    fn non_monotone_table_rejected() {
        let rows = vec![
            ClParams {
                qs: 5,
                timeout_ms: 100,
            },
            ClParams {
                qs: 4,
                timeout_ms: 200,
            },
        ];
        assert_eq!(
            ClTable::from_rows(0, rows),
            Err(ClTableError::NotMonotone(1))
        );
    }

    #[test]
    fn fast_mode_sends_whole_queue() {
        let mut c = control(DistributionMode::Fast, 3);
        assert!(c.eval_add_to_distribution_queue(&upd(1)));
        assert!(c.eval_add_to_distribution_queue(&upd(2)));
        c.take_actions();
        assert!(c.eval_add_to_distribution_queue(&upd(3)));
        assert_eq!(distributions(&c.take_actions()), vec![3]);
        assert!(!c.eval_add_to_distribution_queue(&upd(4)));
        assert_eq!(c.occupancy(&sid()), 3);
        assert!(c.take_actions().is_empty());
    }

    #[test]
    fn batched_mode_flushes_on_full_queue() {
        let mut c = control(DistributionMode::Batched, 3);
        c.eval_add_to_distribution_queue(&upd(1));
        c.eval_add_to_distribution_queue(&upd(2));
        let acts = c.take_actions();
        assert!(distributions(&acts).is_empty());
        let first_timer = c.timer(&sid()).unwrap();
        c.eval_add_to_distribution_queue(&upd(3));
        let acts = c.take_actions();
        assert_eq!(distributions(&acts), vec![3]);
        // old timer was cleared, a fresh one armed
        assert_ne!(c.timer(&sid()), Some(first_timer));
        c.on_timer(&sid(), first_timer);
        assert!(c.take_actions().is_empty());
    }

    #[test]
    fn batched_mode_timer_sends_partial_batch() {
        let mut c = control(DistributionMode::Batched, 3);
        c.eval_add_to_distribution_queue(&upd(1));
        let acts = c.take_actions();
        let token = match &acts[..] {
            [ControlAction::ArmTimer {
                token, after_us, ..
            }] => {
                assert_eq!(*after_us, 100_000);
                *token
            }
            other => panic!("{other:?}"),
        };
        c.on_timer(&sid(), token);
        assert_eq!(distributions(&c.take_actions()), vec![1]);
    }

    #[test]
    fn empty_queue_on_expiry_sends_nothing() {
        let mut c = control(DistributionMode::Batched, 3);
        c.eval_add_to_distribution_queue(&upd(1));
        let token = c.timer(&sid()).unwrap();
        c.take_actions();
        let all = cluster(5);
        for p in 1..5 {
            c.on_ack(ReplicaId(p), &sid(), &[upd(1).id], &all);
        }
        assert_eq!(c.occupancy(&sid()), 0);
        c.on_timer(&sid(), token);
        assert!(c.take_actions().is_empty());
    }

    #[test]
    fn removal_requires_all_active_peers() {
        let mut c = control(DistributionMode::Fast, 3);
        c.eval_add_to_distribution_queue(&upd(1));
        let all = cluster(5);
        for p in 1..4 {
            assert!(c
                .on_ack(ReplicaId(p), &sid(), &[upd(1).id], &all)
                .is_empty());
        }
        assert_eq!(c.occupancy(&sid()), 1);
        // duplicate ack changes nothing
        assert!(c
            .on_ack(ReplicaId(3), &sid(), &[upd(1).id], &all)
            .is_empty());
        let removed = c.on_ack(ReplicaId(4), &sid(), &[upd(1).id], &all);
        assert_eq!(removed.len(), 1);
        assert!(c
            .on_ack(ReplicaId(4), &sid(), &[upd(1).id], &all)
            .is_empty());
    }

    #[test]
    fn failed_peer_is_not_waited_for() {
        let mut c = control(DistributionMode::Fast, 3);
        c.eval_add_to_distribution_queue(&upd(1));
        let all = cluster(5);
        for p in 1..4 {
            c.on_ack(ReplicaId(p), &sid(), &[upd(1).id], &all);
        }
        let without_4: Vec<_> = all.iter().copied().filter(|r| r.0 != 4).collect();
        assert_eq!(c.reevaluate(&without_4).len(), 1);
    }

    #[test]
    fn eventual_mode_is_unbounded() {
        let mut c = control(DistributionMode::Eventual, 3);
        for i in 0..40 {
            assert!(c.eval_add_to_distribution_queue(&upd(i)));
        }
        assert_eq!(c.occupancy(&sid()), 40);
        let audit = c.take_audit();
        assert!(audit.iter().all(|a| a.qs.is_none()));
    }

    #[test]
    fn stricter_level_keeps_entries_and_blocks() {
        let table = ClTable::default();
        let mut c = StalenessControl::new(
            DistributionMode::Fast,
            ReplicaId(0),
            &cluster(5),
            table,
            10,
            &[sid()],
        );
        for i in 0..10 {
            assert!(c.eval_add_to_distribution_queue(&upd(i)));
        }
        assert!(c.apply_cl(&sid(), 0));
        assert!(!c.apply_cl(&sid(), 0));
        assert_eq!(c.occupancy(&sid()), 10);
        assert!(!c.eval_add_to_distribution_queue(&upd(99)));
        let all = cluster(5);
        let ids: Vec<_> = (0..8).map(|i| upd(i).id).collect();
        for p in 1..5 {
            c.on_ack(ReplicaId(p), &sid(), &ids, &all);
        }
        assert_eq!(c.occupancy(&sid()), 2);
        assert!(c.eval_add_to_distribution_queue(&upd(100)));
    }

    #[test]
    fn relaxing_grows_queue_bound() {
        let mut c = StalenessControl::new(
            DistributionMode::Fast,
            ReplicaId(0),
            &cluster(5),
            ClTable::default(),
            3,
            &[sid()],
        );
        assert_eq!(c.applied(&sid()).unwrap().qs, 7);
        c.apply_cl(&sid(), 10);
        assert_eq!(c.applied(&sid()).unwrap().qs, 15);
    }

    #[test]
    fn commit_wait_counts_origin() {
        let mut t = CommitTracker::default();
        let id = upd(1).id;
        t.submit(id, VirtualTime(0), VirtualTime(10));
        assert_eq!(t.commit_wait(&id, 1), Some(VirtualTime(10)));
        assert_eq!(t.commit_wait(&id, 3), None);
        t.record_ack(id, ReplicaId(2), VirtualTime(400));
        t.record_ack(id, ReplicaId(2), VirtualTime(450));
        t.record_ack(id, ReplicaId(1), VirtualTime(900));
        assert_eq!(t.commit_wait(&id, 2), Some(VirtualTime(400)));
        assert_eq!(t.commit_wait(&id, 3), Some(VirtualTime(900)));
        assert_eq!(t.commit_wait(&id, 4), None);
    }
}
