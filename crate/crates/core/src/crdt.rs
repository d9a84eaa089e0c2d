//! PN-Counter store with timestamped update logs.
//!
//! Every replica keeps one [`PnCounter`] per [`StateId`] plus an
//! [`UpdateLog`] of every record it has merged, local or remote, ordered by
//! `(timestamp, origin, seq)`. Counters are keyed by [`UpdateId`] so that a
//! retransmitted record merges at most once.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::{ReplicaId, VirtualTime};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct StateId(String);

impl StateId {
    pub fn new(name: impl Into<String>) -> Result<Self, StoreError> {
        let name = name.into();
        if name.is_empty() {
            return Err(StoreError::EmptyStateId);
        }
        Ok(StateId(name))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for StateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Globally unique: origin replica plus that replica's own sequence number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct UpdateId {
    pub origin: ReplicaId,
    pub seq: u64,
}

impl fmt::Display for UpdateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.origin, self.seq)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RequestId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ClientId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Op {
    Increment,
    Decrement,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct UpdateRecord {
    pub id: UpdateId,
    pub state: StateId,
    pub op: Op,
    pub amount: u64,
    pub client: ClientId,
    pub timestamp: VirtualTime,
    pub request_id: RequestId,
}

impl UpdateRecord {
    pub fn origin(&self) -> ReplicaId {
        self.id.origin
    }

    /// Total order used by the update log.
    pub fn log_key(&self) -> (VirtualTime, ReplicaId, u64) {
        (self.timestamp, self.id.origin, self.id.seq)
    }

    pub fn signed_amount(&self) -> i64 {
        match self.op {
            Op::Increment => self.amount as i64,
            Op::Decrement => -(self.amount as i64),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum StoreError {
    #[error("state id must be non-empty")]
    EmptyStateId,
    #[error("unknown state {0}")]
    UnknownState(StateId),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PnCounter {
    incr: BTreeMap<UpdateId, u64>,
    decr: BTreeMap<UpdateId, u64>,
}

impl PnCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn contains(&self, id: &UpdateId) -> bool {
        self.incr.contains_key(id) || self.decr.contains_key(id)
    }

    /// Returns false when the record was already merged.
    pub fn merge(&mut self, update: &UpdateRecord) -> bool {
        if self.contains(&update.id) {
            return false;
        }
        match update.op {
            Op::Increment => self.incr.insert(update.id, update.amount),
            Op::Decrement => self.decr.insert(update.id, update.amount),
        };
        true
    }

    pub fn query(&self) -> i64 {
        let up: u64 = self.incr.values().sum();
        let down: u64 = self.decr.values().sum();
        up as i64 - down as i64
    }

    pub fn len(&self) -> usize {
        self.incr.len() + self.decr.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Append-only, sorted by [`UpdateRecord::log_key`].
#[derive(Debug, Clone, Default)]
pub struct UpdateLog {
    records: Vec<UpdateRecord>,
}

impl UpdateLog {
    pub fn insert(&mut self, update: UpdateRecord) {
        let key = update.log_key();
        let pos = self.records.partition_point(|r| r.log_key() < key);
        self.records.insert(pos, update);
    }

    pub fn records(&self) -> &[UpdateRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Admission hook consulted before a client update is applied.
pub trait AdmissionControl {
    fn eval_add_to_distribution_queue(&mut self, update: &UpdateRecord) -> bool;
}

impl<F: FnMut(&UpdateRecord) -> bool> AdmissionControl for F {
    fn eval_add_to_distribution_queue(&mut self, update: &UpdateRecord) -> bool {
        self(update)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClientOutcome {
    Accepted,
    /// Admission refused; the store is unchanged.
    Rejected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RemoteOutcome {
    /// Merged for the first time.
    Merged,
    /// Already present; acknowledged again without effect.
    Duplicate,
}

#[derive(Debug, Clone, Default)]
struct Entry {
    counter: PnCounter,
    log: UpdateLog,
}

#[derive(Debug, Clone, Default)]
pub struct CrdtStore {
    entries: BTreeMap<StateId, Entry>,
}

impl CrdtStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_states<'a>(states: impl IntoIterator<Item = &'a StateId>) -> Self {
        let mut store = Self::new();
        for s in states {
            store.register(s.clone());
        }
        store
    }

    pub fn register(&mut self, state: StateId) {
        self.entries.entry(state).or_default();
    }

    pub fn knows(&self, state: &StateId) -> bool {
        self.entries.contains_key(state)
    }

    pub fn states(&self) -> impl Iterator<Item = &StateId> {
        self.entries.keys()
    }

    /// Admission, then log append and merge on success.
    pub fn client_update<A: AdmissionControl>(
        &mut self,
        update: UpdateRecord,
        admission: &mut A,
    ) -> Result<ClientOutcome, StoreError> {
        if !self.knows(&update.state) {
            return Err(StoreError::UnknownState(update.state));
        }
        if !admission.eval_add_to_distribution_queue(&update) {
            return Ok(ClientOutcome::Rejected);
        }
        self.merge(update);
        Ok(ClientOutcome::Accepted)
    }

    /// Merge a record delivered by a peer. Unknown states are refused.
    pub fn remote_update(&mut self, update: UpdateRecord) -> Result<RemoteOutcome, StoreError> {
        if !self.knows(&update.state) {
            return Err(StoreError::UnknownState(update.state));
        }
        Ok(if self.merge(update) {
            RemoteOutcome::Merged
        } else {
            RemoteOutcome::Duplicate
        })
    }

    /// Idempotent merge. Returns false when the record was already present or its state is unknown.
    pub fn merge(&mut self, update: UpdateRecord) -> bool {
        let Some(entry) = self.entries.get_mut(&update.state) else {
            return false;
        };
        if !entry.counter.merge(&update) {
            return false;
        }
        entry.log.insert(update);
        true
    }

    pub fn contains(&self, state: &StateId, id: &UpdateId) -> bool {
        self.entries
            .get(state)
            .is_some_and(|e| e.counter.contains(id))
    }

    pub fn query(&self, state: &StateId) -> Result<i64, StoreError> {
        self.entries
            .get(state)
            .map(|e| e.counter.query())
            .ok_or_else(|| StoreError::UnknownState(state.clone()))
    }

    pub fn log(&self, state: &StateId) -> Option<&UpdateLog> {
        self.entries.get(state).map(|e| &e.log)
    }

    /// Every logged record across `states`, in log order.
    pub fn merged_log<'a>(&'a self, states: &[StateId]) -> Vec<&'a UpdateRecord> {
        let mut all: Vec<&UpdateRecord> = states
            .iter()
            .filter_map(|s| self.entries.get(s))
            .flat_map(|e| e.log.records().iter())
            .collect();
        all.sort_by_key(|r| r.log_key());
        all
    }

    pub fn all_records(&self) -> impl Iterator<Item = &UpdateRecord> {
        self.entries.values().flat_map(|e| e.log.records().iter())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sid(s: &str) -> StateId {
        StateId::new(s).unwrap()
    }

    fn rec(origin: u16, seq: u64, op: Op, amount: u64, t: u64) -> UpdateRecord {
        UpdateRecord {
            id: UpdateId {
                origin: ReplicaId(origin),
                seq,
            },
            state: sid("ctr"),
            op,
            amount,
            client: ClientId(0),
            timestamp: VirtualTime(t),
            request_id: RequestId(seq),
        }
    }

    fn store() -> CrdtStore {
        CrdtStore::with_states([&sid("ctr")])
    }

    #[test]
    fn empty_state_id_rejected() {
        assert_eq!(StateId::new(""), Err(StoreError::EmptyStateId));
    }

    #[test]
    fn fresh_counter_is_zero() {
        assert_eq!(store().query(&sid("ctr")), Ok(0));
    }

    #[test]
    fn increments_and_decrements() {
        let mut s = store();
        s.merge(rec(0, 1, Op::Increment, 5, 1));
        s.merge(rec(0, 2, Op::Decrement, 2, 2));
        assert_eq!(s.query(&sid("ctr")), Ok(3));
        s.merge(rec(1, 1, Op::Increment, 7, 3));
        s.merge(rec(1, 2, Op::Increment, 2, 4));
        assert_eq!(s.query(&sid("ctr")), Ok(12));
    }

    #[test]
    fn merge_is_idempotent() {
        let mut s = store();
        let r = rec(0, 1, Op::Increment, 5, 1);
        assert!(s.merge(r.clone()));
        assert!(!s.merge(r.clone()));
        assert_eq!(s.query(&sid("ctr")), Ok(5));
        assert_eq!(s.log(&sid("ctr")).unwrap().len(), 1);
    }

    #[test]
    fn client_update_respects_admission() {
        let mut s = store();
        let mut yes = |_: &UpdateRecord| true;
        let mut no = |_: &UpdateRecord| false;
        assert_eq!(
            s.client_update(rec(0, 1, Op::Increment, 5, 1), &mut yes),
            Ok(ClientOutcome::Accepted)
        );
        assert_eq!(
            s.client_update(rec(0, 2, Op::Increment, 9, 2), &mut no),
            Ok(ClientOutcome::Rejected)
        );
        assert_eq!(s.query(&sid("ctr")), Ok(5));
        assert_eq!(s.log(&sid("ctr")).unwrap().len(), 1);
    }

    #[test]
    fn unknown_state_fails() {
        let mut s = store();
        let mut r = rec(0, 1, Op::Increment, 5, 1);
        r.state = sid("other");
        let mut yes = |_: &UpdateRecord| true;
        assert!(matches!(
            s.client_update(r.clone(), &mut yes),
            Err(StoreError::UnknownState(_))
        ));
        assert!(matches!(
            s.remote_update(r),
            Err(StoreError::UnknownState(_))
        ));
        assert!(s.query(&sid("other")).is_err());
    }

    #[test]
    fn remote_duplicate_is_acknowledged_without_effect() {
        let mut s = store();
        let r = rec(3, 1, Op::Increment, 4, 1);
        assert_eq!(s.remote_update(r.clone()), Ok(RemoteOutcome::Merged));
        assert_eq!(s.remote_update(r), Ok(RemoteOutcome::Duplicate));
        assert_eq!(s.query(&sid("ctr")), Ok(4));
    }

    #[test]
    fn log_is_ordered_with_origin_tiebreak() {
        let mut s = store();
        s.merge(rec(2, 1, Op::Increment, 1, 50));
        s.merge(rec(1, 7, Op::Increment, 1, 50));
        s.merge(rec(0, 3, Op::Increment, 1, 10));
        s.merge(rec(1, 2, Op::Increment, 1, 50));
        let keys: Vec<_> = s
            .log(&sid("ctr"))
            .unwrap()
            .records()
            .iter()
            .map(|r| r.log_key())
            .collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
        assert_eq!(keys[1], (VirtualTime(50), ReplicaId(1), 2));
    }

    #[test]
    fn all_orders_of_four_updates_converge() {
        let updates = [
            rec(0, 1, Op::Increment, 5, 1),
            rec(1, 1, Op::Decrement, 2, 2),
            rec(2, 1, Op::Increment, 11, 3),
            rec(0, 2, Op::Decrement, 3, 4),
        ];
        let expected: i64 = updates.iter().map(|u| u.signed_amount()).sum();
        let mut seen = Vec::new();
        permute(
            &mut (0..4).collect::<Vec<_>>(),
            0,
            &mut |order: &[usize]| {
                let mut s = store();
                for &i in order {
                    s.merge(updates[i].clone());
                }
                seen.push(s.query(&sid("ctr")).unwrap());
            },
        );
        assert_eq!(seen.len(), 24);
        assert!(seen.iter().all(|v| *v == expected));
    }

    fn permute(items: &mut Vec<usize>, k: usize, f: &mut dyn FnMut(&[usize])) {
        if k == items.len() {
            f(items);
            return;
        }
        for i in k..items.len() {
            items.swap(k, i);
            permute(items, k + 1, f);
            items.swap(k, i);
        }
    }
}
