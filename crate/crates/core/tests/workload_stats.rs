use statrs::distribution::{ChiSquared, ContinuousCDF, Exp};

use conlab::workload::{generate, read_trace, write_trace, WorkloadConfig};

fn config(n: usize, weights: Vec<u32>) -> WorkloadConfig {
    WorkloadConfig {
        total_requests: n,
        weights,
        ..WorkloadConfig::default()
    }
}

#[test]
fn origin_shares_follow_weights() {
    let weights = vec![1, 1, 2, 1, 5];
    let reqs = generate(&config(100_000, weights.clone()), 11).unwrap();
    let total: u32 = weights.iter().sum();
    let mut counts = vec![0f64; weights.len()];
    for r in &reqs {
        counts[r.origin.index()] += 1.0;
    }
    let n = reqs.len() as f64;
    let share5 = counts[4] / n;
    assert!((share5 - 0.5).abs() < 0.03, "share {share5}");
    let stat: f64 = counts
        .iter()
        .zip(&weights)
        .map(|(c, w)| {
            let e = n * *w as f64 / total as f64;
            (c - e).powi(2) / e
        })
        .sum();
    let p = 1.0
        - ChiSquared::new((weights.len() - 1) as f64)
            .unwrap()
            .cdf(stat);
    assert!(p > 0.001, "chi-square {stat} p {p}");
}

#[test]
fn gaps_are_exponential() {
    let reqs = generate(&config(10_000, vec![1, 2, 2, 5]), 5).unwrap();
    let mut gaps: Vec<f64> = reqs
        .windows(2)
        .map(|w| (w[1].arrival.as_micros() - w[0].arrival.as_micros()) as f64)
        .collect();
    let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
    assert!((mean / 2000.0 - 1.0).abs() < 0.05, "mean gap {mean}");
    gaps.sort_by(f64::total_cmp);
    let exp = Exp::new(1.0 / 2000.0).unwrap();
    let n = gaps.len() as f64;
    let d = gaps
        .iter()
        .enumerate()
        .map(|(i, &g)| {
            let f = exp.cdf(g);
            (f - i as f64 / n).abs().max((i as f64 + 1.0) / n - f)
        })
        .fold(0.0, f64::max);
    // integer microsecond rounding shifts the cdf by at most one density step
    // alpha = 0.001, as for the chi-square test
    let critical = 1.95 / n.sqrt() + 1.0 / 2000.0;
    assert!(d < critical, "ks distance {d} >= {critical}");
}

#[test]
fn costs_and_determinism() {
    let cfg = config(2000, vec![1, 1, 2, 1, 5]);
    let a = generate(&cfg, 3).unwrap();
    assert_eq!(a, generate(&cfg, 3).unwrap());
    assert_ne!(a, generate(&cfg, 4).unwrap());
    assert!(a.iter().all(|r| (500..=600).contains(&r.cost)));
    let mut buf = Vec::new();
    write_trace(&a, &mut buf).unwrap();
    assert_eq!(read_trace(buf.as_slice()).unwrap(), a);
}
