//! Bundled experiment scenarios. Each preset is a list of named variants
//! sharing one seed, so variants of the same preset replay identical traces.

use crate::config::{AdaptationKind, Backend, RunConfig};
use crate::staleness::DistributionMode;

pub const NAMES: [&str; 6] = [
    "fig3-adaptation",
    "fig4-fattree-cdf",
    "fig6-internet2-cdf",
    "fig7-qmax",
    "fig8-commit",
    "table2-overhead",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub name: String,
    pub config: RunConfig,
}

fn variant(name: impl Into<String>, config: RunConfig) -> Variant {
    Variant {
        name: name.into(),
        config,
    }
}

fn base(seed: u64, topology: &str, interarrival_us: f64) -> RunConfig {
    let mut cfg = RunConfig {
        seed,
        topology: topology.into(),
        ..RunConfig::default()
    };
    cfg.workload.mean_interarrival_us = interarrival_us;
    cfg
}

fn ac(mut cfg: RunConfig, adaptation: AdaptationKind, mode: DistributionMode) -> RunConfig {
    cfg.backend = Backend::Ac;
    cfg.ac.adaptation = adaptation;
    cfg.ac.mode = mode;
    cfg
}

fn with_backend(mut cfg: RunConfig, backend: Backend) -> RunConfig {
    cfg.backend = backend;
    cfg
}

fn scaled(mut cfg: RunConfig, scale: f64) -> RunConfig {
    cfg.delay_scale = scale;
    cfg
}

/// Variants of the named preset, or `None` if the name is unknown.
pub fn preset(name: &str, seed: u64) -> Option<Vec<Variant>> {
    use AdaptationKind::{Pid, Threshold};
    use DistributionMode::{Batched, Fast};
    let v = match name {
        "fig3-adaptation" => {
            let b = base(seed, "internet2", 2000.0);
            vec![
                variant("threshold", ac(b.clone(), Threshold, Fast)),
                variant("pid", ac(b, Pid, Fast)),
            ]
        }
        "fig4-fattree-cdf" => {
            let mut v = Vec::new();
            for rate_ms in [2u64, 5] {
                let b = base(seed, "fattree", rate_ms as f64 * 1000.0);
                v.push(variant(
                    format!("ac-fast-{rate_ms}ms"),
                    ac(b.clone(), Threshold, Fast),
                ));
                v.push(variant(
                    format!("ac-batched-{rate_ms}ms"),
                    ac(b.clone(), Threshold, Batched),
                ));
                v.push(variant(
                    format!("ec-{rate_ms}ms"),
                    with_backend(b, Backend::Ec),
                ));
            }
            v
        }
        "fig6-internet2-cdf" => {
            let b = base(seed, "internet2", 2000.0);
            vec![
                variant("ac-threshold", ac(b.clone(), Threshold, Fast)),
                variant("ac-pid", ac(b.clone(), Pid, Fast)),
                variant("ec", with_backend(b.clone(), Backend::Ec)),
                variant(
                    "ac-threshold-delay2",
                    scaled(ac(b.clone(), Threshold, Fast), 2.0),
                ),
                variant("ec-delay2", scaled(with_backend(b, Backend::Ec), 2.0)),
            ]
        }
        "fig7-qmax" => {
            let b = base(seed, "internet2", 2000.0);
            let mut v: Vec<Variant> = [5usize, 10, 15]
                .into_iter()
                .map(|q| {
                    // pinned at the most relaxed level so qs_max is the effective bound
                    let mut cfg = ac(b.clone(), AdaptationKind::None, Fast);
                    cfg.ac.qs_max = q;
                    cfg.ac.initial_cl = cfg.ac.max_level;
                    variant(format!("qmax{q}"), cfg)
                })
                .collect();
            v.push(variant("ec", with_backend(b, Backend::Ec)));
            v
        }
        "fig8-commit" => {
            // sparse arrivals keep the serialized strong backend out of queueing
            let b = base(seed, "internet2", 200_000.0);
            vec![
                variant("ac", ac(b.clone(), Threshold, Fast)),
                variant("sc", with_backend(b, Backend::Sc)),
            ]
        }
        "table2-overhead" => {
            let mut b = base(seed, "internet2", 2000.0);
            b.workload.uniform = true;
            vec![
                variant("ec", with_backend(b.clone(), Backend::Ec)),
                variant("ac-fast", ac(b.clone(), Threshold, Fast)),
                variant("ac-batched", ac(b.clone(), Threshold, Batched)),
                variant("sc", with_backend(b, Backend::Sc)),
            ]
        }
        _ => return None,
    };
    Some(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_name_resolves_and_validates() {
        for name in NAMES {
            let variants = preset(name, 7).unwrap();
            assert!(!variants.is_empty(), "{name}");
            for v in variants {
                v.config
                    .check()
                    .unwrap_or_else(|e| panic!("{name}/{}: {e}", v.name));
                assert_eq!(v.config.seed, 7);
            }
        }
        assert!(preset("nope", 1).is_none());
    }

    #[test]
    fn qmax_variants_pin_relaxed_level() {
        let v = preset("fig7-qmax", 1).unwrap();
        let qs: Vec<usize> = v.iter().take(3).map(|v| v.config.ac.qs_max).collect();
        assert_eq!(qs, vec![5, 10, 15]);
        assert!(v
            .iter()
            .take(3)
            .all(|v| v.config.ac.initial_cl == v.config.ac.max_level));
    }
}
