//! Oracles and scenario builders shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use conlab::cluster::ScOp;
use conlab::config::{Backend, Fault, FaultAction, RunConfig};
use conlab::crdt::{ClientId, CrdtStore, Op, RequestId, StateId, UpdateId, UpdateRecord};
use conlab::lb::{server_state, RequestKind, ServiceRequest};
use conlab::sim::{ReplicaId, VirtualTime};
use conlab::wire::TxnResult;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn record(origin: u16, seq: u64, server: usize, op: Op, amount: u64, t: u64) -> UpdateRecord {
    UpdateRecord {
        id: UpdateId {
            origin: ReplicaId(origin),
            seq,
        },
        state: server_state(server),
        op,
        amount,
        client: ClientId(origin as u64),
        timestamp: VirtualTime(t),
        request_id: RequestId(origin as u64 * 1_000_000 + seq),
    }
}

/// One delivery scenario: `updates` are issued at their origins, then every
/// replica receives every update in its own random order, some of them twice.
pub struct ConvergenceCase {
    pub replicas: usize,
    pub states: Vec<StateId>,
    pub updates: Vec<UpdateRecord>,
    pub deliveries: Vec<Vec<usize>>,
}

pub fn random_convergence_case(r: &mut ChaCha8Rng) -> ConvergenceCase {
    let replicas = r.random_range(1..=5);
    let states: Vec<StateId> = (0..r.random_range(1..=3)).map(server_state).collect();
    let n = r.random_range(0..=30);
    let mut seqs = vec![0u64; replicas];
    let updates = (0..n)
        .map(|_| {
            let origin = r.random_range(0..replicas);
            seqs[origin] += 1;
            let op = if r.random_bool(0.3) {
                Op::Decrement
            } else {
                Op::Increment
            };
            record(
                origin as u16,
                seqs[origin],
                r.random_range(0..states.len()),
                op,
                r.random_range(1..=1000),
                r.random_range(0..100),
            )
        })
        .collect::<Vec<_>>();
    let deliveries = (0..replicas)
        .map(|_| {
            let mut order: Vec<usize> = (0..n).collect();
            let dups = if n == 0 { 0 } else { r.random_range(0..=n) };
            for _ in 0..dups {
                order.push(r.random_range(0..n));
            }
            order.shuffle(r);
            order
        })
        .collect();
    ConvergenceCase {
        replicas,
        states,
        updates,
        deliveries,
    }
}

/// Final per-replica query vectors and the distinct signed sum they must equal.
pub fn play_convergence(case: &ConvergenceCase) -> (Vec<Vec<i64>>, Vec<i64>) {
    let mut stores: Vec<CrdtStore> = (0..case.replicas)
        .map(|_| CrdtStore::with_states(&case.states))
        .collect();
    for u in &case.updates {
        let origin = u.id.origin.index();
        let mut admit = |_: &UpdateRecord| true;
        stores[origin].client_update(u.clone(), &mut admit).unwrap();
    }
    for (i, order) in case.deliveries.iter().enumerate() {
        for &k in order {
            stores[i].remote_update(case.updates[k].clone()).unwrap();
        }
    }
    let finals = stores
        .iter()
        .map(|s| case.states.iter().map(|st| s.query(st).unwrap()).collect())
        .collect();
    let mut expected = vec![0i64; case.states.len()];
    for u in &case.updates {
        let s = case.states.iter().position(|s| *s == u.state).unwrap();
        expected[s] += match u.op {
            Op::Increment => u.amount as i64,
            Op::Decrement => -(u.amount as i64),
        };
    }
    (finals, expected)
}

fn std_f64(v: &[i64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().map(|&x| x as f64).sum::<f64>() / n;
    (v.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n).sqrt()
}

fn signed(u: &UpdateRecord) -> i64 {
    match u.op {
        Op::Increment => u.amount as i64,
        Op::Decrement => -(u.amount as i64),
    }
}

fn server_of(u: &UpdateRecord) -> usize {
    u.state
        .as_str()
        .strip_prefix("server-")
        .unwrap()
        .parse()
        .unwrap()
}

/// Independent replay of one inspection: serialize by (timestamp, origin,
/// seq), rebuild both histories from scratch and take the ratio of summed
/// floating-point standard deviations.
pub fn oracle_phi(
    log: &[UpdateRecord],
    remote: &UpdateRecord,
    servers: usize,
    capacity: u64,
    window: usize,
    cap: f64,
) -> f64 {
    let mut sorted: Vec<&UpdateRecord> = log.iter().filter(|u| u.id != remote.id).collect();
    sorted.sort_by_key(|u| (u.timestamp, u.id.origin, u.id.seq));
    let mut base = vec![0i64; servers];
    for u in sorted.iter().filter(|u| u.timestamp < remote.timestamp) {
        base[server_of(u)] += signed(u);
    }
    base[server_of(remote)] += signed(remote);
    let later: Vec<&&UpdateRecord> = sorted
        .iter()
        .filter(|u| u.timestamp >= remote.timestamp)
        .take(window)
        .collect();
    let (mut actual, mut optimal) = (base.clone(), base);
    let (mut su, mut so) = (0.0, 0.0);
    for u in later {
        actual[server_of(u)] += signed(u);
        let target = match u.op {
            Op::Decrement => server_of(u),
            Op::Increment => {
                let mut best: Option<(f64, usize)> = None;
                for s in 0..servers {
                    if optimal[s] as i128 + u.amount as i128 > capacity as i128 {
                        continue;
                    }
                    let mut v = optimal.clone();
                    v[s] += u.amount as i64;
                    let score = std_f64(&v);
                    if best.is_none_or(|(b, _)| score < b - 1e-12) {
                        best = Some((score, s));
                    }
                }
                best.map(|(_, s)| s).unwrap_or(server_of(u))
            }
        };
        optimal[target] += signed(u);
        let (a, o) = (std_f64(&actual), std_f64(&optimal));
        if a == 0.0 && o == 0.0 {
            continue;
        }
        su += a;
        so += o;
    }
    if so > 0.0 {
        su / so
    } else if su > 0.0 {
        cap
    } else {
        1.0
    }
}

/// A random small trace over two servers: the local log and one late remote update.
pub fn random_ineff_case(r: &mut ChaCha8Rng) -> (Vec<UpdateRecord>, UpdateRecord) {
    let n = r.random_range(1..=20);
    let mut log: Vec<UpdateRecord> = Vec::new();
    let mut seqs = [0u64; 4];
    for _ in 0..n {
        let origin = r.random_range(0..4usize);
        seqs[origin] += 1;
        let server = r.random_range(0..2);
        let t = r.random_range(0..50);
        let placed: Vec<&UpdateRecord> = log
            .iter()
            .filter(|u| u.op == Op::Increment && server_of(u) == server)
            .collect();
        let rec = if !placed.is_empty() && r.random_bool(0.15) {
            let amount = placed[r.random_range(0..placed.len())].amount;
            record(
                origin as u16,
                seqs[origin],
                server,
                Op::Decrement,
                amount,
                t,
            )
        } else {
            record(
                origin as u16,
                seqs[origin],
                server,
                Op::Increment,
                r.random_range(500..=600),
                t,
            )
        };
        log.push(rec);
    }
    let idx = r.random_range(0..log.len());
    let remote = log[idx].clone();
    if r.random_bool(0.5) {
        log.remove(idx);
    }
    log.sort_by_key(|u| u.log_key());
    (log, remote)
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-300)
}

/// Strong-backend run with a random fail/recover schedule that leaves everyone up at the end.
pub fn sc_fault_config(seed: u64) -> RunConfig {
    let mut r = rng(seed ^ 0x5eed);
    let mut cfg = RunConfig {
        seed,
        backend: Backend::Sc,
        ..RunConfig::default()
    };
    cfg.workload.total_requests = 40;
    cfg.workload.mean_interarrival_us = 25_000.0;
    cfg.workload.start_ms = 400;
    cfg.max_time_ms = 120_000;
    let mut faults = Vec::new();
    for _ in 0..r.random_range(1..=4) {
        let replica = r.random_range(0..5u16);
        let at = r.random_range(0..1500u64);
        let down = r.random_range(50..800u64);
        faults.push(Fault {
            at_ms: at,
            replica,
            action: FaultAction::Fail,
        });
        faults.push(Fault {
            at_ms: at + down,
            replica,
            action: FaultAction::Recover,
        });
    }
    faults.sort_by_key(|f| f.at_ms);
    cfg.faults = faults;
    cfg
}

/// Brute-force linearizability of read-decide-write transactions: find an
/// order respecting real time in which every transaction observed exactly the
/// utilization left by its predecessors and reached the decision the load
/// balancer makes on that view.
pub fn linearizable(
    ops: &[ScOp],
    requests: &[ServiceRequest],
    servers: usize,
    capacity: u64,
) -> bool {
    let by_id: BTreeMap<RequestId, &ServiceRequest> =
        requests.iter().map(|r| (r.request_id, r)).collect();
    fn search(
        done: &mut Vec<bool>,
        state: &mut Vec<i64>,
        placed: &mut BTreeMap<RequestId, (usize, u64)>,
        ops: &[ScOp],
        by_id: &BTreeMap<RequestId, &ServiceRequest>,
        capacity: u64,
    ) -> bool {
        if done.iter().all(|d| *d) {
            return true;
        }
        let horizon = ops
            .iter()
            .zip(done.iter())
            .filter(|(_, d)| !**d)
            .map(|(o, _)| o.completed)
            .min()
            .unwrap();
        for i in 0..ops.len() {
            if done[i] || ops[i].invoked > horizon {
                continue;
            }
            let op = &ops[i];
            if !op.values.is_empty() && op.values != *state {
                continue;
            }
            let req = by_id[&op.request_id];
            let effect = match (req.kind, op.result) {
                (RequestKind::Embed, TxnResult::Placed { server }) => {
                    if conlab::lb::app_logic(req.cost, state, capacity) != Some(server as usize) {
                        continue;
                    }
                    Some((server as usize, req.cost as i64))
                }
                (RequestKind::Embed, TxnResult::Rejected) => {
                    if conlab::lb::app_logic(req.cost, state, capacity).is_some() {
                        continue;
                    }
                    None
                }
                (RequestKind::Release { target }, TxnResult::Released { server }) => {
                    match placed.get(&target) {
                        Some(&(s, amount)) if s == server as usize => Some((s, -(amount as i64))),
                        _ => continue,
                    }
                }
                (RequestKind::Release { target }, TxnResult::NoTarget) => {
                    if placed.contains_key(&target) {
                        continue;
                    }
                    None
                }
                _ => continue,
            };
            done[i] = true;
            if let Some((s, d)) = effect {
                state[s] += d;
                if d > 0 {
                    placed.insert(op.request_id, (s, d as u64));
                }
            }
            if search(done, state, placed, ops, by_id, capacity) {
                return true;
            }
            if let Some((s, d)) = effect {
                state[s] -= d;
                placed.remove(&op.request_id);
            }
            done[i] = false;
        }
        false
    }
    let mut done = vec![false; ops.len()];
    let mut state = vec![0i64; servers];
    search(
        &mut done,
        &mut state,
        &mut BTreeMap::new(),
        ops,
        &by_id,
        capacity,
    )
}
