//! Replica of the strong backend.
//!
//! The origin forwards each request to the leader, which runs one transaction
//! at a time: it appends a read marker, decides against the state applied at
//! the marker once it commits, and appends the resulting update before the
//! next queued request gets its marker. Every read therefore sees all earlier
//! writes. The origin learns the outcome once the update has been applied at
//! the leader.

use std::collections::{BTreeMap, VecDeque};

use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::crdt::{ClientId, CrdtStore, Op, RequestId, StateId, UpdateId, UpdateRecord};
use crate::lb::{app_logic, server_index, server_state, RequestKind};
use crate::metrics::{CommitLabel, IneffTracePoint, Outcome};
use crate::raft::{Command, LogEntry, LogIndex, RaftAction, RaftNode, Term};
use crate::sim::{ReplicaId, VirtualTime};
use crate::wire::{Message, TxnMessage, TxnResult};

use super::{ScOp, TimerKind, World};

const MAX_BACKOFF_DOUBLINGS: u32 = 5;

/// A submitted request whose read marker has not committed yet.
struct Pending {
    origin: ReplicaId,
    cost: u64,
    release_of: Option<RequestId>,
}

/// A decision whose update has not been applied yet.
struct Waiter {
    origin: ReplicaId,
    read_index: LogIndex,
    values: Vec<i64>,
    result: TxnResult,
}

/// Origin-side state of an unanswered request.
struct Inflight {
    idx: usize,
    attempt: u32,
    target: ReplicaId,
}

pub(super) struct ScNode {
    id: ReplicaId,
    raft: RaftNode,
    store: CrdtStore,
    applied_index: LogIndex,
    /// Outcome and amount of every applied update, by request.
    applied: BTreeMap<RequestId, (LogIndex, TxnResult, u64)>,
    /// Submitted requests waiting for the running transaction to finish.
    queue: VecDeque<(RequestId, Pending)>,
    /// The request whose read marker is in the log.
    active: Option<(RequestId, Pending)>,
    waiters: BTreeMap<RequestId, Waiter>,
    inflight: BTreeMap<RequestId, Inflight>,
    retry_us: u64,
}

impl ScNode {
    pub fn new(
        id: ReplicaId,
        cluster: &[ReplicaId],
        cfg: &RunConfig,
        states: &[StateId],
        rng: ChaCha8Rng,
    ) -> Self {
        Self {
            id,
            raft: RaftNode::new(id, cluster, cfg.sc.raft(), rng),
            store: CrdtStore::with_states(states),
            applied_index: 0,
            applied: BTreeMap::new(),
            queue: VecDeque::new(),
            active: None,
            waiters: BTreeMap::new(),
            inflight: BTreeMap::new(),
            retry_us: cfg.sc.retry_ms * 1000,
        }
    }

    pub fn id(&self) -> ReplicaId {
        self.id
    }

    pub fn is_leader(&self) -> bool {
        self.raft.is_leader()
    }

    pub fn term(&self) -> Term {
        self.raft.term()
    }

    pub fn last_index(&self) -> LogIndex {
        self.raft.last_index()
    }

    pub fn applied_index(&self) -> LogIndex {
        self.applied_index
    }

    pub fn log(&self) -> &[LogEntry] {
        self.raft.log()
    }

    pub fn is_idle(&self) -> bool {
        let serving = self.raft.is_leader()
            && (!self.queue.is_empty() || self.active.is_some() || !self.waiters.is_empty());
        self.inflight.is_empty() && !serving
    }

    pub fn values(&self, states: &[StateId]) -> Vec<i64> {
        states
            .iter()
            .map(|s| self.store.query(s).unwrap_or(0))
            .collect()
    }

    pub fn start(&mut self, w: &mut World, campaign: bool) {
        self.raft.start();
        if campaign {
            self.raft.campaign();
        }
        self.pump(w);
    }

    /// Drain RAFT effects; applying entries may propose more, so loop until quiet.
    fn pump(&mut self, w: &mut World) {
        loop {
            let actions = self.raft.take_actions();
            if actions.is_empty() {
                break;
            }
            for action in actions {
                match action {
                    RaftAction::Send { to, msg } => w.send(self.id, to, &Message::Raft(msg)),
                    RaftAction::ArmElection { token, after_us } => {
                        w.timer(self.id, after_us, TimerKind::Election(token))
                    }
                    RaftAction::ArmHeartbeat { token, after_us } => {
                        w.timer(self.id, after_us, TimerKind::Heartbeat(token))
                    }
                    RaftAction::Apply(entry) => self.apply(w, entry),
                    RaftAction::BecameLeader { term } => {
                        w.auditor.on_became_leader(self.id, term, self.raft.log());
                        self.drop_transactions();
                    }
                }
            }
        }
    }

    /// Strictly increasing along the log, so timestamp order is log order.
    fn next_timestamp(&self, now: VirtualTime) -> VirtualTime {
        let last = self.raft.log().iter().rev().find_map(|e| match &e.command {
            Command::Update(u) => Some(u.timestamp),
            _ => None,
        });
        match last {
            Some(t) if t >= now => t + 1,
            _ => now,
        }
    }

    fn placement_of(&self, target: RequestId) -> Option<(usize, u64)> {
        match self.applied.get(&target) {
            Some((_, TxnResult::Placed { server }, amount)) => Some((*server as usize, *amount)),
            _ => None,
        }
    }

    fn drop_transactions(&mut self) {
        self.queue.clear();
        self.active = None;
        self.waiters.clear();
    }

    /// Propose the marker of the next queued request unless one is running.
    fn start_next(&mut self) {
        if self.active.is_some() || !self.raft.is_leader() {
            return;
        }
        while let Some((rid, p)) = self.queue.pop_front() {
            if self
                .raft
                .propose(Command::ReadMarker {
                    request_id: rid,
                    origin: p.origin,
                })
                .is_ok()
            {
                self.active = Some((rid, p));
                return;
            }
        }
    }

    fn apply(&mut self, w: &mut World, entry: LogEntry) {
        w.auditor.on_apply(self.id, &entry);
        self.applied_index = entry.index;
        match entry.command {
            Command::Noop => {}
            Command::ReadMarker { request_id, origin } => {
                if !self.raft.is_leader()
                    || self.active.as_ref().is_none_or(|(r, _)| *r != request_id)
                {
                    return;
                }
                let (rid, p) = self.active.take().expect("checked");
                debug_assert_eq!(p.origin, origin);
                self.decide(w, rid, p, entry.index);
                self.start_next();
            }
            Command::Update(u) => {
                let rid = u.request_id;
                let server = server_index(&u.state).unwrap_or(0) as u16;
                let result = match u.op {
                    Op::Increment => TxnResult::Placed { server },
                    Op::Decrement => TxnResult::Released { server },
                };
                let amount = u.amount;
                let remote = u.origin() != self.id;
                if !self.store.merge(u.clone()) {
                    return;
                }
                self.applied.insert(rid, (entry.index, result, amount));
                if remote {
                    let log = self.store.merged_log(&w.states);
                    let report = w.inspector.on_remote_update(self.id, &log, &u, w.now());
                    w.metrics.record_ineff(IneffTracePoint {
                        time: w.now(),
                        replica: self.id,
                        state: u.state.clone(),
                        phi: report.phi,
                        level: 0,
                        window_span: report.window_span,
                    });
                }
                if let Some((idx, _)) = w.request(rid) {
                    let outcome = match result {
                        TxnResult::Placed { server } => Outcome::Placed {
                            server: server as usize,
                        },
                        _ => Outcome::Released {
                            server: server as usize,
                        },
                    };
                    let view = self.values(&w.states);
                    w.resolve(idx, outcome, view);
                }
                if self.raft.is_leader() {
                    w.metrics.record_settled(w.now());
                    if let Some(wt) = self.waiters.remove(&rid) {
                        let msg = TxnMessage::Decided {
                            request_id: rid,
                            read_index: wt.read_index,
                            index: entry.index,
                            values: wt.values,
                            result: wt.result,
                        };
                        w.send(self.id, wt.origin, &Message::Txn(msg));
                    }
                }
            }
        }
    }

    fn decide(&mut self, w: &mut World, rid: RequestId, p: Pending, read_index: LogIndex) {
        let view = self.values(&w.states);
        let now = w.now();
        let (server, op, amount) = match p.release_of {
            None => match app_logic(p.cost, &view, w.lb.capacity) {
                Some(s) => (s, Op::Increment, p.cost),
                None => {
                    return self.reject(w, rid, p.origin, read_index, view, TxnResult::Rejected)
                }
            },
            Some(target) => match self.placement_of(target) {
                Some((s, amount)) => (s, Op::Decrement, amount),
                None => {
                    return self.reject(w, rid, p.origin, read_index, view, TxnResult::NoTarget)
                }
            },
        };
        let update = UpdateRecord {
            id: UpdateId {
                origin: p.origin,
                seq: rid.0,
            },
            state: server_state(server),
            op,
            amount,
            client: ClientId(p.origin.0 as u64),
            timestamp: self.next_timestamp(now),
            request_id: rid,
        };
        let result = match op {
            Op::Increment => TxnResult::Placed {
                server: server as u16,
            },
            Op::Decrement => TxnResult::Released {
                server: server as u16,
            },
        };
        if self.raft.propose(Command::Update(update)).is_ok() {
            self.waiters.insert(
                rid,
                Waiter {
                    origin: p.origin,
                    read_index,
                    values: view,
                    result,
                },
            );
        }
    }

    fn reject(
        &mut self,
        w: &mut World,
        rid: RequestId,
        origin: ReplicaId,
        read_index: LogIndex,
        view: Vec<i64>,
        result: TxnResult,
    ) {
        if let Some((idx, _)) = w.request(rid) {
            let outcome = if result == TxnResult::NoTarget {
                Outcome::NoTarget
            } else {
                Outcome::RejectedCapacity
            };
            w.resolve(idx, outcome, view.clone());
        }
        let msg = TxnMessage::Decided {
            request_id: rid,
            read_index,
            index: 0,
            values: view,
            result,
        };
        w.send(self.id, origin, &Message::Txn(msg));
    }

    pub fn on_arrival(&mut self, w: &mut World, idx: usize) {
        let rid = w.requests[idx].request_id;
        let target = self.raft.leader_hint().unwrap_or(self.id);
        self.inflight.insert(
            rid,
            Inflight {
                idx,
                attempt: 0,
                target,
            },
        );
        self.submit(w, rid);
    }

    fn submit(&mut self, w: &mut World, rid: RequestId) {
        let Some(f) = self.inflight.get(&rid) else {
            return;
        };
        let req = &w.requests[f.idx];
        let release_of = match req.kind {
            RequestKind::Embed => None,
            RequestKind::Release { target } => Some(target),
        };
        let msg = TxnMessage::Submit {
            request_id: rid,
            cost: req.cost,
            release_of,
        };
        let (target, attempt) = (f.target, f.attempt);
        w.send(self.id, target, &Message::Txn(msg));
        // doubling backoff so requests queued behind a busy leader stay quiet
        let after = self.retry_us << attempt.min(MAX_BACKOFF_DOUBLINGS);
        w.timer(
            self.id,
            after,
            TimerKind::ClientRetry {
                request: rid,
                attempt,
            },
        );
    }

    fn on_submit(
        &mut self,
        w: &mut World,
        from: ReplicaId,
        rid: RequestId,
        cost: u64,
        release_of: Option<RequestId>,
    ) {
        if !self.raft.is_leader() {
            let msg = TxnMessage::Unavailable {
                request_id: rid,
                hint: self.raft.leader_hint(),
            };
            w.send(self.id, from, &Message::Txn(msg));
            return;
        }
        if let Some(&(index, result, _)) = self.applied.get(&rid) {
            let msg = TxnMessage::Decided {
                request_id: rid,
                read_index: 0,
                index,
                values: Vec::new(),
                result,
            };
            w.send(self.id, from, &Message::Txn(msg));
            return;
        }
        let known = self.waiters.contains_key(&rid)
            || self.active.as_ref().is_some_and(|(r, _)| *r == rid)
            || self.queue.iter().any(|(r, _)| *r == rid);
        if known {
            return;
        }
        let queued = self.raft.log()[self.applied_index as usize..]
            .iter()
            .find_map(|e| match &e.command {
                Command::Update(u) if u.request_id == rid => Some(u.clone()),
                _ => None,
            });
        if let Some(u) = queued {
            let server = server_index(&u.state).unwrap_or(0) as u16;
            let result = match u.op {
                Op::Increment => TxnResult::Placed { server },
                Op::Decrement => TxnResult::Released { server },
            };
            self.waiters.insert(
                rid,
                Waiter {
                    origin: from,
                    read_index: 0,
                    values: Vec::new(),
                    result,
                },
            );
            return;
        }
        self.queue.push_back((
            rid,
            Pending {
                origin: from,
                cost,
                release_of,
            },
        ));
        self.start_next();
        self.pump(w);
    }

    fn on_decided(&mut self, w: &mut World, from: ReplicaId, msg: TxnMessage) {
        let TxnMessage::Decided {
            request_id,
            read_index,
            index,
            values,
            result,
        } = msg
        else {
            return;
        };
        let Some(f) = self.inflight.remove(&request_id) else {
            return;
        };
        let req = &w.requests[f.idx];
        let now = w.now();
        if matches!(
            result,
            TxnResult::Placed { .. } | TxnResult::Released { .. }
        ) {
            let label = if from == self.id {
                CommitLabel::ScLeader
            } else {
                CommitLabel::ScFollower
            };
            let id = UpdateId {
                origin: self.id,
                seq: request_id.0,
            };
            w.metrics.record_commit(label, id, now.since(req.arrival));
        }
        w.sc_ops.push(ScOp {
            request_id,
            origin: self.id,
            invoked: req.arrival,
            completed: now,
            read_index,
            index,
            values,
            result,
        });
    }

    pub fn on_message(&mut self, w: &mut World, from: ReplicaId, msg: Message) {
        match msg {
            Message::Raft(m) => {
                self.raft.on_message(from, m);
                self.pump(w);
            }
            Message::Txn(TxnMessage::Submit {
                request_id,
                cost,
                release_of,
            }) => self.on_submit(w, from, request_id, cost, release_of),
            Message::Txn(m @ TxnMessage::Decided { .. }) => self.on_decided(w, from, m),
            Message::Txn(TxnMessage::Unavailable { request_id, hint }) => {
                let Some(f) = self.inflight.get_mut(&request_id) else {
                    return;
                };
                if let Some(h) = hint.filter(|h| *h != f.target) {
                    f.target = h;
                    f.attempt += 1;
                    self.submit(w, request_id);
                }
            }
            _ => {}
        }
    }

    pub fn on_timer(&mut self, w: &mut World, kind: TimerKind) {
        match kind {
            TimerKind::Election(token) => self.raft.on_election_timeout(token),
            TimerKind::Heartbeat(token) => self.raft.on_heartbeat(token),
            TimerKind::ClientRetry { request, attempt } => {
                let hint = self.raft.leader_hint().unwrap_or(self.id);
                let Some(f) = self.inflight.get_mut(&request) else {
                    return;
                };
                if f.attempt != attempt {
                    return;
                }
                f.attempt += 1;
                f.target = hint;
                self.submit(w, request);
            }
            TimerKind::Distribution { .. } | TimerKind::ClRetransmit { .. } => {}
        }
        self.pump(w);
    }

    /// Durable state survives; leadership and unanswered submissions are retried.
    pub fn on_recover(&mut self, w: &mut World) {
        self.raft.recover();
        self.drop_transactions();
        let hint = self.id;
        let ids: Vec<RequestId> = self.inflight.keys().copied().collect();
        for rid in ids {
            let f = self.inflight.get_mut(&rid).expect("listed");
            f.attempt += 1;
            f.target = hint;
            self.submit(w, rid);
        }
        self.pump(w);
    }
}
