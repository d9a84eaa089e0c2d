//! A replicated controller cluster of one backend on the simulated network,
//! driven by a workload trace and an optional fault schedule.
//!
//! Each replica's logic lives in [`crdt_node`] (adaptive and eventual
//! backends) or [`sc_node`] (the RAFT-backed strong backend). Both share a
//! [`World`]: the event engine, the network, metrics, and the bookkeeping of
//! which requests have been resolved.

mod crdt_node;
mod sc_node;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::config::{Backend, ConfigError, FaultAction, RunConfig};
use crate::crdt::{RequestId, StateId};
use crate::inspection::Inspector;
use crate::lb::{LbConfig, ServiceRequest};
use crate::metrics::{
    write_summary, CommitLabel, DecisionRow, Metrics, MetricsError, Outcome, Summary, SummaryInput,
};
use crate::raft::audit::{AuditReport, RaftAuditor};
use crate::raft::LogIndex;
use crate::sim::{
    build_delay_matrix, rng_stream, streams, DelayMatrix, DelayParams, Engine, Network, ReplicaId,
    SimError, Target, Topology, TraceBytes, VirtualTime,
};
use crate::wire::{encode, Message, TxnResult};
use crate::workload::{generate, read_trace, trace_digest, WorkloadError};

use crdt_node::CrdtNode;
use sc_node::ScNode;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{0}")]
    Setup(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TimerKind {
    Distribution { state: StateId, token: u64 },
    Election(u64),
    Heartbeat(u64),
    ClRetransmit { state: StateId, epoch: u64 },
    ClientRetry { request: RequestId, attempt: u32 },
}

#[derive(Debug, Clone)]
pub enum Payload {
    Deliver {
        from: ReplicaId,
        frame: Vec<u8>,
    },
    Arrival(usize),
    /// Ignored unless the replica is up and still in `incarnation`.
    Timer {
        incarnation: u64,
        kind: TimerKind,
    },
    Fault(usize),
}

impl TraceBytes for Payload {
    fn trace_bytes(&self, out: &mut Vec<u8>) {
        match self {
            Payload::Deliver { from, frame } => {
                out.push(0);
                out.extend_from_slice(&from.0.to_le_bytes());
                out.extend_from_slice(frame);
            }
            Payload::Arrival(i) => {
                out.push(1);
                out.extend_from_slice(&(*i as u64).to_le_bytes());
            }
            Payload::Timer { incarnation, kind } => {
                out.push(2);
                out.extend_from_slice(&incarnation.to_le_bytes());
                match kind {
                    TimerKind::Distribution { state, token } => {
                        out.push(0);
                        out.extend_from_slice(state.as_str().as_bytes());
                        out.extend_from_slice(&token.to_le_bytes());
                    }
                    TimerKind::Election(t) | TimerKind::Heartbeat(t) => {
                        out.push(if matches!(kind, TimerKind::Election(_)) {
                            1
                        } else {
                            2
                        });
                        out.extend_from_slice(&t.to_le_bytes());
                    }
                    TimerKind::ClRetransmit { state, epoch } => {
                        out.push(3);
                        out.extend_from_slice(state.as_str().as_bytes());
                        out.extend_from_slice(&epoch.to_le_bytes());
                    }
                    TimerKind::ClientRetry { request, attempt } => {
                        out.push(4);
                        out.extend_from_slice(&request.0.to_le_bytes());
                        out.extend_from_slice(&attempt.to_le_bytes());
                    }
                }
            }
            Payload::Fault(i) => {
                out.push(3);
                out.extend_from_slice(&(*i as u64).to_le_bytes());
            }
        }
    }
}

/// One completed strong-consistency request as seen by its origin.
#[derive(Debug, Clone, PartialEq)]
pub struct ScOp {
    pub request_id: RequestId,
    pub origin: ReplicaId,
    pub invoked: VirtualTime,
    pub completed: VirtualTime,
    /// Log index of the request's read marker.
    pub read_index: LogIndex,
    /// Log index of the written update, 0 when nothing was written.
    pub index: LogIndex,
    /// Utilization view the decision was made against.
    pub values: Vec<i64>,
    pub result: TxnResult,
}

/// State shared by every replica of a run.
pub(crate) struct World {
    engine: Engine<Payload>,
    net: Network,
    metrics: Metrics,
    requests: Vec<ServiceRequest>,
    by_id: BTreeMap<RequestId, usize>,
    resolved: Vec<bool>,
    unresolved: usize,
    states: Vec<StateId>,
    lb: LbConfig,
    inspector: Inspector,
    auditor: RaftAuditor,
    sc_ops: Vec<ScOp>,
}

impl World {
    fn now(&self) -> VirtualTime {
        self.engine.now()
    }

    fn send(&mut self, from: ReplicaId, to: ReplicaId, msg: &Message) {
        let frame = encode(msg);
        if from != to {
            self.metrics.record_send(from, msg.kind(), frame.len());
        }
        self.net
            .send(&mut self.engine, from, to, Payload::Deliver { from, frame })
            .expect("replicas are in range");
    }

    fn broadcast(&mut self, from: ReplicaId, peers: &[ReplicaId], msg: &Message) {
        let frame = encode(msg);
        for &to in peers {
            self.metrics.record_send(from, msg.kind(), frame.len());
            self.net
                .send(
                    &mut self.engine,
                    from,
                    to,
                    Payload::Deliver {
                        from,
                        frame: frame.clone(),
                    },
                )
                .expect("replicas are in range");
        }
    }

    fn timer(&mut self, replica: ReplicaId, after_us: u64, kind: TimerKind) {
        let incarnation = self.net.incarnation(replica);
        self.engine.schedule_after(
            after_us.max(1),
            Target::Replica(replica),
            Payload::Timer { incarnation, kind },
        );
    }

    fn local_loop_us(&self, r: ReplicaId) -> u64 {
        self.net.delay(r, r)
    }

    fn request(&self, id: RequestId) -> Option<(usize, &ServiceRequest)> {
        let idx = *self.by_id.get(&id)?;
        Some((idx, &self.requests[idx]))
    }

    /// Record the final outcome of a request; later calls for the same request are ignored.
    fn resolve(&mut self, idx: usize, outcome: Outcome, utilization: Vec<i64>) {
        if self.resolved[idx] {
            return;
        }
        self.resolved[idx] = true;
        self.unresolved -= 1;
        let r = &self.requests[idx];
        let row = DecisionRow {
            request_id: r.request_id,
            arrival: r.arrival,
            decided: self.engine.now(),
            origin: r.origin,
            outcome,
            utilization,
        };
        self.metrics.record_decision(row);
    }
}

enum Nodes {
    Crdt(Vec<CrdtNode>),
    Sc(Vec<ScNode>),
}

/// Everything a finished run produced.
#[derive(Debug)]
pub struct RunOutput {
    pub summary: Summary,
    pub metrics: Metrics,
    /// Present for the strong backend.
    pub audit: Option<AuditReport>,
    pub sc_ops: Vec<ScOp>,
    pub delays: DelayMatrix,
    pub requests: Vec<ServiceRequest>,
}

pub struct Simulation {
    cfg: RunConfig,
    topology: String,
    world: World,
    nodes: Nodes,
    faults: Vec<(ReplicaId, FaultAction)>,
    faults_fired: usize,
    delays: DelayMatrix,
}

/// The configured trace as generated or read, before the start offset.
pub fn workload_trace(cfg: &RunConfig) -> Result<Vec<ServiceRequest>, RunError> {
    cfg.check()?;
    let mut topo = Topology::resolve(&cfg.topology)?;
    if let Some(p) = &cfg.placement {
        topo = topo.with_placement(p.clone())?;
    }
    raw_requests(cfg, &topo)
}

fn raw_requests(cfg: &RunConfig, topo: &Topology) -> Result<Vec<ServiceRequest>, RunError> {
    let n = topo.replica_count();
    let requests = match &cfg.workload.trace {
        Some(path) => {
            let file = std::fs::File::open(path).map_err(|e| {
                RunError::Setup(format!("cannot open trace {}: {e}", path.display()))
            })?;
            read_trace(std::io::BufReader::new(file))?
        }
        None => {
            let weights = topo.default_weights.clone().unwrap_or_default();
            generate(&cfg.workload.resolve(&weights, n), cfg.seed)?
        }
    };
    if let Some(r) = requests.iter().find(|r| r.origin.index() >= n) {
        return Err(RunError::Setup(format!(
            "request {} has origin {} outside the cluster",
            r.request_id.0, r.origin
        )));
    }
    Ok(requests)
}

fn load_requests(cfg: &RunConfig, topo: &Topology) -> Result<Vec<ServiceRequest>, RunError> {
    let mut requests = raw_requests(cfg, topo)?;
    let offset = cfg.workload.start_ms * 1000;
    for r in &mut requests {
        r.arrival += offset;
    }
    Ok(requests)
}

impl Simulation {
    pub fn new(cfg: &RunConfig) -> Result<Self, RunError> {
        cfg.check()?;
        let mut topo = Topology::resolve(&cfg.topology)?;
        if let Some(p) = &cfg.placement {
            topo = topo.with_placement(p.clone())?;
        }
        let requests = load_requests(cfg, &topo)?;
        Self::with_requests(cfg, topo, requests)
    }

    /// Build a run over an explicit request list instead of the configured workload.
    pub fn with_requests(
        cfg: &RunConfig,
        topo: Topology,
        requests: Vec<ServiceRequest>,
    ) -> Result<Self, RunError> {
        cfg.check()?;
        let n = topo.replica_count();
        if n == 0 {
            return Err(RunError::Setup("cluster has no replicas".into()));
        }
        if cfg.ac.oca_owner as usize >= n {
            return Err(RunError::Setup(format!(
                "oca_owner {} is not a replica of a {n}-replica cluster",
                cfg.ac.oca_owner
            )));
        }
        if let Some(l) = cfg.sc.preferred_leader {
            if l as usize >= n {
                return Err(RunError::Setup(format!(
                    "preferred_leader {l} is not a replica"
                )));
            }
        }
        for f in &cfg.faults {
            if f.replica as usize >= n {
                return Err(RunError::Setup(format!(
                    "fault targets replica {} of a {n}-replica cluster",
                    f.replica
                )));
            }
        }
        let params = DelayParams {
            speed_km_s: cfg.speed_km_s,
            local_loop_us: cfg.local_loop_us,
            scale: cfg.delay_scale,
        };
        let delays =
            build_delay_matrix(&topo, &params, &mut rng_stream(cfg.seed, streams::TOPOLOGY))?;
        let cluster: Vec<ReplicaId> = (0..n).map(ReplicaId::from_index).collect();
        let states = cfg.lb.states();

        let mut engine = Engine::new();
        for (i, r) in requests.iter().enumerate() {
            engine.schedule(r.arrival, Target::Replica(r.origin), Payload::Arrival(i))?;
        }
        let mut faults = Vec::new();
        for (i, f) in cfg.faults.iter().enumerate() {
            engine.schedule(
                VirtualTime::from_millis(f.at_ms),
                Target::Driver,
                Payload::Fault(i),
            )?;
            faults.push((ReplicaId(f.replica), f.action));
        }

        let by_id = requests
            .iter()
            .enumerate()
            .map(|(i, r)| (r.request_id, i))
            .collect::<BTreeMap<_, _>>();
        if by_id.len() != requests.len() {
            return Err(RunError::Setup(
                "duplicate request ids in the workload".into(),
            ));
        }
        let mut world = World {
            engine,
            net: Network::new(delays.clone()),
            metrics: Metrics::new(cfg.metrics).with_backend(cfg.backend.as_str()),
            resolved: vec![false; requests.len()],
            unresolved: requests.len(),
            requests,
            by_id,
            states: states.clone(),
            lb: cfg.lb.clone(),
            inspector: Inspector::new(cfg.lb.servers, cfg.lb.capacity, cfg.inspection.clone()),
            auditor: RaftAuditor::default(),
            sc_ops: Vec::new(),
        };

        let nodes = match cfg.backend {
            Backend::Sc => {
                let mut nodes: Vec<ScNode> = cluster
                    .iter()
                    .map(|&id| {
                        ScNode::new(
                            id,
                            &cluster,
                            cfg,
                            &states,
                            rng_stream(cfg.seed, streams::REPLICA_BASE + id.0 as u64),
                        )
                    })
                    .collect();
                for node in &mut nodes {
                    node.start(&mut world, cfg.sc.preferred_leader == Some(node.id().0));
                }
                Nodes::Sc(nodes)
            }
            Backend::Ac | Backend::Ec => {
                let table = cfg.ac.table().map_err(|e| RunError::Setup(e.to_string()))?;
                let nodes = cluster
                    .iter()
                    .map(|&id| CrdtNode::new(id, &cluster, cfg, table.clone(), &states))
                    .collect();
                Nodes::Crdt(nodes)
            }
        };
        Ok(Self {
            cfg: cfg.clone(),
            topology: topo.name.clone(),
            world,
            nodes,
            faults,
            faults_fired: 0,
            delays,
        })
    }

    fn done(&self) -> bool {
        if self.faults_fired < self.faults.len() {
            return false;
        }
        match &self.nodes {
            Nodes::Crdt(nodes) => {
                self.world.unresolved == 0
                    && nodes
                        .iter()
                        .all(|n| !self.world.net.is_up(n.id) || n.is_idle())
            }
            Nodes::Sc(nodes) => {
                let stranded = self
                    .world
                    .resolved
                    .iter()
                    .enumerate()
                    .filter(|(_, r)| !**r)
                    .all(|(i, _)| !self.world.net.is_up(self.world.requests[i].origin));
                if !stranded {
                    return false;
                }
                let up: Vec<&ScNode> = nodes
                    .iter()
                    .filter(|n| self.world.net.is_up(n.id()))
                    .collect();
                let Some(leader) = up.iter().filter(|n| n.is_leader()).max_by_key(|n| n.term())
                else {
                    return false;
                };
                let last = leader.last_index();
                up.iter().all(|n| n.applied_index() == last && n.is_idle())
            }
        }
    }

    fn dispatch(&mut self, target: Target, payload: Payload) {
        match (target, payload) {
            (Target::Driver, Payload::Fault(i)) => self.fault(i),
            (Target::Replica(r), Payload::Arrival(i)) => {
                let arrival = self.world.requests[i].arrival;
                self.world.metrics.record_arrival(arrival);
                if !self.world.net.is_up(r) {
                    self.world.resolve(i, Outcome::Unavailable, Vec::new());
                    return;
                }
                match &mut self.nodes {
                    Nodes::Crdt(nodes) => nodes[r.index()].on_arrival(&mut self.world, i),
                    Nodes::Sc(nodes) => nodes[r.index()].on_arrival(&mut self.world, i),
                }
            }
            (Target::Replica(r), Payload::Deliver { from, frame }) => {
                if !self.world.net.accepts(r) {
                    return;
                }
                let msg = crate::wire::decode(&frame).expect("frames are produced by encode");
                match &mut self.nodes {
                    Nodes::Crdt(nodes) => nodes[r.index()].on_message(&mut self.world, from, msg),
                    Nodes::Sc(nodes) => nodes[r.index()].on_message(&mut self.world, from, msg),
                }
            }
            (Target::Replica(r), Payload::Timer { incarnation, kind }) => {
                if !self.world.net.is_up(r) || self.world.net.incarnation(r) != incarnation {
                    return;
                }
                match &mut self.nodes {
                    Nodes::Crdt(nodes) => nodes[r.index()].on_timer(&mut self.world, kind),
                    Nodes::Sc(nodes) => nodes[r.index()].on_timer(&mut self.world, kind),
                }
            }
            (t, p) => unreachable!("payload {p:?} addressed to {t:?}"),
        }
    }

    fn fault(&mut self, i: usize) {
        self.faults_fired += 1;
        let (r, action) = self.faults[i];
        match action {
            FaultAction::Fail => {
                if !self.world.net.is_up(r) {
                    return;
                }
                self.world.net.fail(r).expect("validated replica");
                match &mut self.nodes {
                    Nodes::Crdt(nodes) => {
                        nodes[r.index()].on_fail(&mut self.world);
                        for n in nodes.iter_mut() {
                            if n.id != r && self.world.net.is_up(n.id) {
                                n.on_membership_change(&mut self.world);
                            }
                        }
                    }
                    Nodes::Sc(_) => {}
                }
            }
            FaultAction::Recover => {
                if self.world.net.is_up(r) {
                    return;
                }
                self.world.net.recover(r).expect("validated replica");
                match &mut self.nodes {
                    Nodes::Crdt(nodes) => nodes[r.index()].on_recover(&mut self.world),
                    Nodes::Sc(nodes) => nodes[r.index()].on_recover(&mut self.world),
                }
            }
        }
    }

    /// Run to completion or to the configured time limit.
    pub fn run(mut self) -> RunOutput {
        let limit = VirtualTime::from_millis(self.cfg.max_time_ms);
        while !self.done() {
            match self.world.engine.peek_time() {
                Some(t) if t <= limit => {}
                _ => break,
            }
            let ev = self.world.engine.pop().expect("peeked");
            self.dispatch(ev.target, ev.payload);
        }
        self.finish()
    }

    fn finish(mut self) -> RunOutput {
        for i in 0..self.world.requests.len() {
            if !self.world.resolved[i] {
                self.world.resolve(i, Outcome::Unavailable, Vec::new());
            }
        }
        let n = self.delays.len();
        let mut audit = None;
        let final_values: Vec<Vec<i64>> = match &self.nodes {
            Nodes::Crdt(nodes) => {
                let labels: Vec<(usize, CommitLabel)> = match self.cfg.backend {
                    Backend::Ec => vec![(n, CommitLabel::Ec)],
                    _ => std::iter::once((1, CommitLabel::AcLocal))
                        .chain(self.cfg.ac.commit_w.iter().map(|&w| {
                            (
                                w,
                                if w == 3 {
                                    CommitLabel::AcW3
                                } else {
                                    CommitLabel::AcW5
                                },
                            )
                        }))
                        .collect(),
                };
                for node in nodes {
                    for id in node.tracker.ids() {
                        let submitted = node.tracker.submitted(id).expect("tracked");
                        for &(w, label) in &labels {
                            if let Some(t) = node.tracker.commit_wait(id, w) {
                                self.world
                                    .metrics
                                    .record_commit(label, *id, t.since(submitted));
                            }
                        }
                    }
                }
                nodes
                    .iter()
                    .map(|node| node.values(&self.world.states))
                    .collect()
            }
            Nodes::Sc(nodes) => {
                let logs: Vec<_> = nodes.iter().map(|node| (node.id(), node.log())).collect();
                let auditor = std::mem::take(&mut self.world.auditor);
                audit = Some(auditor.finish(&logs));
                nodes
                    .iter()
                    .map(|node| node.values(&self.world.states))
                    .collect()
            }
        };
        let mut summary = self.world.metrics.summarize(SummaryInput {
            backend: self.cfg.backend.as_str(),
            seed: self.cfg.seed,
            topology: &self.topology,
            trace_hash: self.world.engine.trace_hash(),
            events: self.world.engine.processed(),
            end_time: self.world.engine.now(),
            replicas: n,
            final_values,
        });
        summary
            .extra
            .insert("dropped_messages".into(), self.world.net.dropped().into());
        summary.extra.insert(
            "workload_hash".into(),
            trace_digest(&self.world.requests).into(),
        );
        if let Some(a) = &audit {
            summary
                .extra
                .insert("raft_elections".into(), (a.elections as u64).into());
            summary
                .extra
                .insert("raft_violations".into(), (a.violations.len() as u64).into());
        }
        RunOutput {
            summary,
            metrics: self.world.metrics,
            audit,
            sc_ops: self.world.sc_ops,
            delays: self.delays,
            requests: self.world.requests,
        }
    }
}

/// Run one configured simulation in memory.
pub fn simulate(cfg: &RunConfig) -> Result<RunOutput, RunError> {
    Ok(Simulation::new(cfg)?.run())
}

/// Write the metric CSVs and `summary.json` of a finished run into `dir`.
pub fn write_outputs(out: &RunOutput, dir: &Path) -> Result<PathBuf, RunError> {
    out.metrics.write_csvs(dir)?;
    let path = dir.join("summary.json");
    write_summary(&out.summary, &path)?;
    Ok(path)
}

/// Run `cfg` and write its outputs into its output directory; returns the summary path.
pub fn run(cfg: &RunConfig) -> Result<PathBuf, RunError> {
    let out = simulate(cfg)?;
    write_outputs(&out, &cfg.output_dir)
}
