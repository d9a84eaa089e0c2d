//! Replica of the adaptive and eventual backends.
//!
//! A request is decided against the local view and issued through admission
//! control. A refused request stays parked, with every later request queued
//! behind it, until acknowledgments drain the queue or the level changes.
//! Remote updates are inspected on first merge; under the adaptive backend
//! the resulting reports go to the adaptation owner, which broadcasts level
//! changes.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use crate::adaptation::Oca;
use crate::config::{AdaptationKind, Backend, RunConfig};
use crate::crdt::{
    ClientId, ClientOutcome, CrdtStore, Op, RequestId, StateId, UpdateId, UpdateRecord,
};
use crate::lb::{app_logic, server_state, RequestKind};
use crate::metrics::{ClChangeEvent, IneffTracePoint, OccupancyRecord, Outcome};
use crate::sim::ReplicaId;
use crate::staleness::{ClTable, CommitTracker, ControlAction, DistributionMode, StalenessControl};
use crate::wire::Message;

use super::{TimerKind, World};

/// Adaptation state held by the owning replica.
struct Owner {
    oca: Oca,
    /// Peers that have not acknowledged the latest change of each state.
    awaiting: BTreeMap<StateId, (u64, BTreeSet<ReplicaId>)>,
    retransmit_us: u64,
}

pub(super) struct CrdtNode {
    pub id: ReplicaId,
    peers: Vec<ReplicaId>,
    store: CrdtStore,
    control: StalenessControl,
    pub tracker: CommitTracker,
    seq: u64,
    parked: VecDeque<usize>,
    /// Requests refused at least once; retried only when the queue has room.
    refused: BTreeSet<usize>,
    /// This replica's live embeddings: server and amount.
    placements: BTreeMap<RequestId, (usize, u64)>,
    /// Applied level and the epoch it was announced with.
    levels: BTreeMap<StateId, (u8, u64)>,
    synced: bool,
    report_to: Option<ReplicaId>,
    owner: Option<Owner>,
}

impl CrdtNode {
    pub fn new(
        id: ReplicaId,
        cluster: &[ReplicaId],
        cfg: &RunConfig,
        table: ClTable,
        states: &[StateId],
    ) -> Self {
        let (mode, initial) = match cfg.backend {
            Backend::Ec => (DistributionMode::Eventual, table.max_level()),
            _ => (cfg.ac.mode, table.clamp(cfg.ac.initial_cl as i32)),
        };
        let control = StalenessControl::new(mode, id, cluster, table.clone(), initial, states)
            .with_eventual_retransmit_us(cfg.ec.retransmit_ms * 1000);
        let policy = match cfg.backend {
            Backend::Ac => cfg.ac.policy(),
            _ => None,
        };
        let owner_id = ReplicaId(cfg.ac.oca_owner);
        let owner = match policy {
            Some(p) if id == owner_id => Some(Owner {
                oca: Oca::new(p, table, initial, states),
                awaiting: BTreeMap::new(),
                retransmit_us: cfg.ac.cl_retransmit_ms * 1000,
            }),
            _ => None,
        };
        let report_to =
            (policy.is_some() && cfg.ac.adaptation != AdaptationKind::None).then_some(owner_id);
        Self {
            id,
            peers: cluster.iter().copied().filter(|r| *r != id).collect(),
            store: CrdtStore::with_states(states),
            control,
            tracker: CommitTracker::default(),
            seq: 0,
            parked: VecDeque::new(),
            refused: BTreeSet::new(),
            placements: BTreeMap::new(),
            levels: states.iter().map(|s| (s.clone(), (initial, 0))).collect(),
            synced: true,
            report_to,
            owner,
        }
    }

    pub fn is_idle(&self) -> bool {
        self.synced && self.parked.is_empty() && self.control.total_occupancy() == 0
    }

    pub fn values(&self, states: &[StateId]) -> Vec<i64> {
        states
            .iter()
            .map(|s| self.store.query(s).unwrap_or(0))
            .collect()
    }

    fn view(&self, w: &World) -> Vec<i64> {
        self.values(&w.states)
    }

    fn level(&self, state: &StateId) -> u8 {
        self.control.applied(state).map_or(0, |c| c.level)
    }

    /// Flush the control block's outbox and admission audit into the world.
    fn pump(&mut self, w: &mut World) {
        let now = w.now();
        for rec in self.control.take_audit() {
            w.metrics.record_occupancy(OccupancyRecord {
                time: now,
                replica: self.id,
                state: rec.state,
                admitted: rec.admitted,
                occupancy: rec.occupancy,
                qs: rec.qs,
                level: rec.level,
            });
        }
        for action in self.control.take_actions() {
            match action {
                ControlAction::Distribute { state, updates } => {
                    w.broadcast(
                        self.id,
                        &self.peers,
                        &Message::Distribute { state, updates },
                    );
                }
                ControlAction::ArmTimer {
                    state,
                    token,
                    after_us,
                } => {
                    w.timer(self.id, after_us, TimerKind::Distribution { state, token });
                }
            }
        }
    }

    pub fn on_arrival(&mut self, w: &mut World, idx: usize) {
        self.parked.push_back(idx);
        self.drain_parked(w);
    }

    fn drain_parked(&mut self, w: &mut World) {
        while self.synced {
            let Some(&idx) = self.parked.front() else {
                break;
            };
            if !self.try_issue(w, idx) {
                break;
            }
            self.parked.pop_front();
            self.refused.remove(&idx);
        }
    }

    /// Decide and submit one request. Returns false if it must stay parked.
    fn try_issue(&mut self, w: &mut World, idx: usize) -> bool {
        let req = w.requests[idx].clone();
        let now = w.now();
        let (server, op, amount) = match req.kind {
            RequestKind::Embed => match app_logic(req.cost, &self.view(w), w.lb.capacity) {
                Some(s) => (s, Op::Increment, req.cost),
                None => {
                    w.resolve(idx, Outcome::RejectedCapacity, self.view(w));
                    return true;
                }
            },
            RequestKind::Release { target } => match self.placements.get(&target) {
                Some(&(s, amount)) => (s, Op::Decrement, amount),
                None => {
                    w.resolve(idx, Outcome::NoTarget, self.view(w));
                    return true;
                }
            },
        };
        let state = server_state(server);
        if self.refused.contains(&idx) && !self.control.has_room(&state) {
            return false;
        }
        let update = UpdateRecord {
            id: UpdateId {
                origin: self.id,
                seq: self.seq + 1,
            },
            state,
            op,
            amount,
            client: ClientId(req.origin.0 as u64),
            timestamp: now,
            request_id: req.request_id,
        };
        let outcome = self
            .store
            .client_update(update.clone(), &mut self.control)
            .expect("server states are registered");
        if outcome == ClientOutcome::Rejected {
            w.metrics.record_rejection();
            self.refused.insert(idx);
            self.pump(w);
            return false;
        }
        self.seq += 1;
        self.tracker
            .submit(update.id, req.arrival, now + w.local_loop_us(self.id));
        let result = match req.kind {
            RequestKind::Embed => {
                self.placements.insert(req.request_id, (server, amount));
                Outcome::Placed { server }
            }
            RequestKind::Release { target } => {
                self.placements.remove(&target);
                Outcome::Released { server }
            }
        };
        w.resolve(idx, result, self.view(w));
        self.pump(w);
        true
    }

    pub fn on_message(&mut self, w: &mut World, from: ReplicaId, msg: Message) {
        match msg {
            Message::Distribute { state, updates } => self.on_distribute(w, from, state, updates),
            Message::Ack { state, ids } => {
                let now = w.now();
                for id in &ids {
                    self.tracker.record_ack(*id, from, now);
                }
                let active = w.net.active();
                let settled = self.control.on_ack(from, &state, &ids, &active);
                if !settled.is_empty() {
                    w.metrics.record_settled(now);
                }
                self.drain_parked(w);
            }
            Message::UpdateFailed { .. } => {}
            Message::IneffReport { state, phi, .. } => self.on_report(w, &state, phi),
            Message::ClChange {
                state,
                level,
                epoch,
            } => {
                let current = self.levels.get(&state).map_or(0, |l| l.1);
                if epoch > current {
                    self.levels.insert(state.clone(), (level, epoch));
                    self.control.apply_cl(&state, level);
                }
                w.send(self.id, from, &Message::ClAck { state, epoch });
                self.drain_parked(w);
            }
            Message::ClAck { state, epoch } => {
                if let Some(owner) = &mut self.owner {
                    if let Some((e, waiting)) = owner.awaiting.get_mut(&state) {
                        if *e == epoch {
                            waiting.remove(&from);
                        }
                    }
                }
            }
            Message::SyncRequest => {
                let updates = self.store.all_records().cloned().collect();
                let levels = self
                    .levels
                    .iter()
                    .map(|(s, (l, e))| (s.clone(), *l, *e))
                    .collect();
                w.send(self.id, from, &Message::SyncResponse { updates, levels });
            }
            Message::SyncResponse { updates, levels } => {
                for u in updates {
                    self.store.merge(u);
                }
                for (state, level, epoch) in levels {
                    let current = self.levels.get(&state).map_or(0, |l| l.1);
                    if epoch > current {
                        self.levels.insert(state.clone(), (level, epoch));
                        self.control.apply_cl(&state, level);
                    }
                }
                self.synced = true;
                self.drain_parked(w);
            }
            Message::Raft(_) | Message::Txn(_) => {}
        }
    }

    fn on_distribute(
        &mut self,
        w: &mut World,
        from: ReplicaId,
        state: StateId,
        updates: Vec<UpdateRecord>,
    ) {
        let ids: Vec<UpdateId> = updates.iter().map(|u| u.id).collect();
        if !self.store.knows(&state) {
            w.send(self.id, from, &Message::UpdateFailed { state, ids });
            return;
        }
        let mut fresh = Vec::new();
        for u in updates {
            if self.store.merge(u.clone()) {
                fresh.push(u);
            }
        }
        w.send(
            self.id,
            from,
            &Message::Ack {
                state: state.clone(),
                ids,
            },
        );
        for u in fresh {
            let log = self.store.merged_log(&w.states);
            let report = w.inspector.on_remote_update(self.id, &log, &u, w.now());
            w.metrics.record_ineff(IneffTracePoint {
                time: w.now(),
                replica: self.id,
                state: state.clone(),
                phi: report.phi,
                level: self.level(&state),
                window_span: report.window_span,
            });
            match self.report_to {
                Some(owner) if owner == self.id => self.on_report(w, &state, report.phi),
                Some(owner) => {
                    let msg = Message::IneffReport {
                        state: state.clone(),
                        update: report.update,
                        phi: report.phi,
                        window_span: report.window_span as u32,
                        computed_at: report.computed_at,
                    };
                    w.send(self.id, owner, &msg);
                }
                None => {}
            }
        }
    }

    fn on_report(&mut self, w: &mut World, state: &StateId, phi: f64) {
        let Some(owner) = &mut self.owner else { return };
        if !self.levels.contains_key(state) {
            return;
        }
        let decision = owner.oca.report(state, phi);
        if !decision.changed {
            return;
        }
        let epoch = self.levels[state].1 + 1;
        self.levels.insert(state.clone(), (decision.level, epoch));
        self.control.apply_cl(state, decision.level);
        w.metrics.record_cl_change(ClChangeEvent {
            time: w.now(),
            replica: self.id,
            state: state.clone(),
            level: decision.level,
        });
        let waiting: BTreeSet<ReplicaId> = self.peers.iter().copied().collect();
        owner.awaiting.insert(state.clone(), (epoch, waiting));
        let retransmit_us = owner.retransmit_us;
        w.broadcast(
            self.id,
            &self.peers,
            &Message::ClChange {
                state: state.clone(),
                level: decision.level,
                epoch,
            },
        );
        w.timer(
            self.id,
            retransmit_us,
            TimerKind::ClRetransmit {
                state: state.clone(),
                epoch,
            },
        );
        self.drain_parked(w);
    }

    pub fn on_timer(&mut self, w: &mut World, kind: TimerKind) {
        match kind {
            TimerKind::Distribution { state, token } => {
                self.control.on_timer(&state, token);
                self.pump(w);
            }
            TimerKind::ClRetransmit { state, epoch } => {
                let Some(owner) = &mut self.owner else { return };
                let Some((e, waiting)) = owner.awaiting.get(&state) else {
                    return;
                };
                if *e != epoch {
                    return;
                }
                let targets: Vec<ReplicaId> = waiting
                    .iter()
                    .copied()
                    .filter(|p| w.net.is_up(*p))
                    .collect();
                if targets.is_empty() {
                    return;
                }
                let level = self.levels[&state].0;
                let retransmit_us = owner.retransmit_us;
                w.broadcast(
                    self.id,
                    &targets,
                    &Message::ClChange {
                        state: state.clone(),
                        level,
                        epoch,
                    },
                );
                w.timer(
                    self.id,
                    retransmit_us,
                    TimerKind::ClRetransmit { state, epoch },
                );
            }
            TimerKind::Election(_) | TimerKind::Heartbeat(_) | TimerKind::ClientRetry { .. } => {}
        }
    }

    /// This replica just failed: requests it had not issued are lost.
    pub fn on_fail(&mut self, w: &mut World) {
        for idx in std::mem::take(&mut self.parked) {
            w.resolve(idx, Outcome::Unavailable, Vec::new());
        }
        self.refused.clear();
    }

    /// A peer failed; its acknowledgments are no longer awaited.
    pub fn on_membership_change(&mut self, w: &mut World) {
        let active = w.net.active();
        if !self.control.reevaluate(&active).is_empty() {
            w.metrics.record_settled(w.now());
        }
        self.drain_parked(w);
    }

    /// Back from a failure: retransmit the own queue and fetch what was missed.
    pub fn on_recover(&mut self, w: &mut World) {
        self.control.resume();
        self.pump(w);
        let up: Vec<ReplicaId> = self
            .peers
            .iter()
            .copied()
            .filter(|p| w.net.is_up(*p))
            .collect();
        self.synced = up.is_empty();
        for p in up {
            w.send(self.id, p, &Message::SyncRequest);
        }
        if let Some(owner) = &self.owner {
            for (state, (epoch, waiting)) in &owner.awaiting {
                if !waiting.is_empty() {
                    w.timer(
                        self.id,
                        owner.retransmit_us,
                        TimerKind::ClRetransmit {
                            state: state.clone(),
                            epoch: *epoch,
                        },
                    );
                }
            }
        }
    }
}
