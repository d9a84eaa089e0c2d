use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use conlab::cluster::{simulate, workload_trace, write_outputs};
use conlab::compare::{compare, Assertion};
use conlab::config::{AdaptationKind, Backend, RunConfig};
use conlab::metrics::{read_summary, Summary};
use conlab::presets;
use conlab::staleness::DistributionMode;
use conlab::workload::write_trace;

#[derive(Parser)]
#[command(
    name = "conlab",
    version,
    about = "Strong, eventual and adaptive consistency experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one configuration, or every variant of a preset.
    Run(RunArgs),
    /// Run one configuration per most-relaxed queue size, in parallel.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated queue sizes of the most relaxed level.
        #[arg(long, value_delimiter = ',', required = true)]
        qmax: Vec<usize>,
    },
    /// Check ordering assertions between two summaries of the same trace.
    Compare {
        a: PathBuf,
        b: PathBuf,
        /// `METRIC OP [METRIC_B]`, OP one of <, >, ~TOL; repeatable.
        #[arg(long = "assert", required = true)]
        assertions: Vec<String>,
    },
    /// Write the configured request trace as CSV.
    GenTrace {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// List presets and their variants.
    Presets,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Sc,
    Ec,
    Ac,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Fast,
    Batched,
}

#[derive(Clone, Copy, ValueEnum)]
enum AdaptationArg {
    Threshold,
    Pid,
    None,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// TOML configuration file.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
    /// Restrict a preset to one variant.
    #[arg(long, requires = "preset")]
    variant: Option<String>,
    #[arg(long, env = "CONLAB_SEED")]
    seed: Option<u64>,
    #[arg(long, env = "CONLAB_OUTPUT_DIR")]
    output: Option<PathBuf>,
    #[arg(long, value_enum)]
    backend: Option<BackendArg>,
    #[arg(long)]
    topology: Option<String>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long, value_enum)]
    adaptation: Option<AdaptationArg>,
    #[arg(long)]
    initial_cl: Option<u8>,
    /// Mean inter-arrival time in microseconds.
    #[arg(long)]
    interarrival_us: Option<f64>,
    #[arg(long)]
    requests: Option<usize>,
    /// Spread requests evenly over the replicas.
    #[arg(long)]
    uniform: bool,
    #[arg(long)]
    delay_scale: Option<f64>,
    /// Replay this trace CSV instead of generating one.
    #[arg(long)]
    trace: Option<PathBuf>,
}

enum Failure {
    Assertion,
    Config(String),
}

impl<E: std::fmt::Display> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Config(e.to_string())
    }
}

impl RunArgs {
    /// Named configurations before flag overrides.
    fn bases(&self) -> Result<Vec<(Option<String>, RunConfig)>, Failure> {
        if let Some(name) = &self.preset {
            let seed = self.seed.unwrap_or(RunConfig::default().seed);
            let mut variants = presets::preset(name, seed).ok_or_else(|| {
                Failure::Config(format!(
                    "unknown preset '{name}' (known: {})",
                    presets::NAMES.join(", ")
                ))
            })?;
            if let Some(v) = &self.variant {
                variants.retain(|x| &x.name == v);
                if variants.is_empty() {
                    return Err(Failure::Config(format!(
                        "preset '{name}' has no variant '{v}'"
                    )));
                }
            }
            return Ok(variants
                .into_iter()
                .map(|v| (Some(v.name), v.config))
                .collect());
        }
        let cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        Ok(vec![(None, cfg)])
    }

    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.output {
            cfg.output_dir = o.clone();
        }
        if let Some(b) = self.backend {
            cfg.backend = match b {
                BackendArg::Sc => Backend::Sc,
                BackendArg::Ec => Backend::Ec,
                BackendArg::Ac => Backend::Ac,
            };
        }
        if let Some(t) = &self.topology {
            cfg.topology = t.clone();
        }
        if let Some(m) = self.mode {
            cfg.ac.mode = match m {
                ModeArg::Fast => DistributionMode::Fast,
                ModeArg::Batched => DistributionMode::Batched,
            };
        }
        if let Some(a) = self.adaptation {
            cfg.ac.adaptation = match a {
                AdaptationArg::Threshold => AdaptationKind::Threshold,
                AdaptationArg::Pid => AdaptationKind::Pid,
                AdaptationArg::None => AdaptationKind::None,
            };
        }
        if let Some(l) = self.initial_cl {
            cfg.ac.initial_cl = l;
        }
        if let Some(r) = self.interarrival_us {
            cfg.workload.mean_interarrival_us = r;
        }
        if let Some(n) = self.requests {
            cfg.workload.total_requests = n;
        }
        if self.uniform {
            cfg.workload.uniform = true;
        }
        if let Some(d) = self.delay_scale {
            cfg.delay_scale = d;
        }
        if let Some(t) = &self.trace {
            cfg.workload.trace = Some(t.clone());
        }
    }

    /// Final configurations; preset variants write into per-variant subdirectories.
    fn configs(&self) -> Result<Vec<(Option<String>, RunConfig)>, Failure> {
        let mut out = self.bases()?;
        for (name, cfg) in &mut out {
            self.apply(cfg);
            if let Some(n) = name {
                cfg.output_dir = cfg.output_dir.join(n.as_str());
            }
            cfg.check()?;
        }
        Ok(out)
    }
}

fn digest(label: &str, s: &Summary, path: &Path) -> String {
    format!(
        "{label}: backend={} placed={}/{} phi_mean={:.3} phi_worst={:.3} messages={} distribution_time_s={:.3} -> {}",
        s.backend,
        s.requests.placed,
        s.requests.total,
        s.phi.mean,
        s.phi.worst,
        s.messages.messages,
        s.distribution_time_s,
        path.display()
    )
}

fn run_all(runs: Vec<(String, RunConfig)>) -> Result<(), Failure> {
    let results: Vec<Result<String, String>> = runs
        .par_iter()
        .map(|(label, cfg)| {
            let out = simulate(cfg).map_err(|e| format!("{label}: {e}"))?;
            let path = write_outputs(&out, &cfg.output_dir).map_err(|e| format!("{label}: {e}"))?;
            Ok(digest(label, &out.summary, &path))
        })
        .collect();
    for r in results {
        println!("{}", r.map_err(Failure::Config)?);
    }
    Ok(())
}

fn execute(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Run(args) => {
            let runs = args
                .configs()?
                .into_iter()
                .map(|(name, cfg)| {
                    (
                        name.unwrap_or_else(|| cfg.backend.as_str().to_string()),
                        cfg,
                    )
                })
                .collect();
            run_all(runs)
        }
        Command::Sweep { run, qmax } => {
            let (name, base) = match run.configs()?.as_slice() {
                [one] => one.clone(),
                _ => {
                    return Err(Failure::Config(
                        "sweep needs a single base configuration; pick a --variant".into(),
                    ))
                }
            };
            let mut runs = Vec::new();
            for q in qmax {
                let mut cfg = base.clone();
                cfg.ac.qs_max = q;
                cfg.output_dir = cfg.output_dir.join(format!("qmax{q}"));
                cfg.check()?;
                let label = match &name {
                    Some(n) => format!("{n}/qmax{q}"),
                    None => format!("qmax{q}"),
                };
                runs.push((label, cfg));
            }
            run_all(runs)
        }
        Command::Compare { a, b, assertions } => {
            let assertions = assertions
                .iter()
                .map(|s| s.parse::<Assertion>())
                .collect::<Result<Vec<_>, _>>()?;
            let results = compare(&read_summary(&a)?, &read_summary(&b)?, &assertions)?;
            for r in &results {
                println!("{r}");
            }
            if results.iter().all(|r| r.pass) {
                Ok(())
            } else {
                Err(Failure::Assertion)
            }
        }
        Command::GenTrace { run, out } => {
            let (_, cfg) = match run.configs()?.as_slice() {
                [one] => one.clone(),
                _ => {
                    return Err(Failure::Config(
                        "gen-trace needs a single configuration; pick a --variant".into(),
                    ))
                }
            };
            let requests = workload_trace(&cfg)?;
            let file = std::fs::File::create(&out)
                .map_err(|e| format!("cannot create {}: {e}", out.display()))?;
            write_trace(&requests, std::io::BufWriter::new(file))?;
            println!("{} requests -> {}", requests.len(), out.display());
            Ok(())
        }
        Command::Presets => {
            for name in presets::NAMES {
                let variants = presets::preset(name, 1).expect("listed preset");
                let names: Vec<&str> = variants.iter().map(|v| v.name.as_str()).collect();
                println!("{name}: {}", names.join(", "));
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Assertion) => ExitCode::from(1),
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
