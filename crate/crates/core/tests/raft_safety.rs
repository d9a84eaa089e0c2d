mod common;

use conlab::cluster::simulate;
use conlab::config::{Backend, RunConfig};

use common::sc_fault_config;

#[test]
fn seeded_fault_schedules_keep_raft_safe() {
    let mut elections = 0;
    for seed in 0..200 {
        let cfg = sc_fault_config(seed);
        let out = simulate(&cfg).unwrap();
        let audit = out.audit.expect("strong backend audits");
        assert!(audit.is_clean(), "seed {seed}: {:?}", audit.violations);
        assert!(audit.committed > 0, "seed {seed}: nothing committed");
        assert!(
            out.metrics.ineff.iter().all(|p| p.phi == 1.0),
            "seed {seed}: phi above 1"
        );
        assert!(out.summary.converged, "seed {seed}: replicas diverged");
        elections += audit.elections;
    }
    assert!(elections > 200, "fault schedules should force re-elections");
}

#[test]
fn fault_free_run_replays_optimally() {
    let mut cfg = RunConfig {
        backend: Backend::Sc,
        ..RunConfig::default()
    };
    cfg.workload.total_requests = 200;
    cfg.workload.mean_interarrival_us = 50_000.0;
    let out = simulate(&cfg).unwrap();
    assert!(out.audit.unwrap().is_clean());
    assert!(!out.metrics.ineff.is_empty());
    assert!(out.metrics.ineff.iter().all(|p| p.phi == 1.0));
    assert_eq!(out.summary.requests.placed, 200);
}

#[test]
fn majority_loss_blocks_commits() {
    use conlab::config::{Fault, FaultAction};
    let mut cfg = RunConfig {
        backend: Backend::Sc,
        ..RunConfig::default()
    };
    cfg.workload.total_requests = 20;
    cfg.workload.mean_interarrival_us = 10_000.0;
    cfg.sc.preferred_leader = Some(0);
    cfg.max_time_ms = 10_000;
    cfg.faults = (2..5)
        .map(|r| Fault {
            at_ms: 500,
            replica: r,
            action: FaultAction::Fail,
        })
        .collect();
    let out = simulate(&cfg).unwrap();
    let audit = out.audit.unwrap();
    assert!(audit.is_clean());
    // only no-op and entries committed before the failures
    assert_eq!(out.summary.requests.placed, 0);
}
