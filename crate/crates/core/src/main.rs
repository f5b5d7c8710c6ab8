use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use lqgmpid::bridge::BridgeContext;
use lqgmpid::config::{ExperimentConfig, ExperimentId};
use lqgmpid::linalg::Vector;
use lqgmpid::output::RunWriter;
use lqgmpid::protocol::{build_hierarchical_protocol, BlockSplit, Protocol, ProtocolDoc, Variant};
use lqgmpid::riccati::SweepOptions;
use lqgmpid::{experiment, oracle, Error};

#[derive(Parser)]
#[command(name = "lqgmpid", version, about = "Closed-form bridge diffusions on piecewise-constant LQ protocols")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON experiment configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory (defaults to the config's `output`, then `runs/<experiment>`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true)]
    eps: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Run both coefficient sweeps and dump the breakpoint states.
    Sweep {
        /// Protocol document to sweep instead of the one implied by the config.
        #[arg(long)]
        protocol: Option<PathBuf>,
    },
    /// Run an experiment suite.
    Experiment {
        /// Overrides the config's experiment id.
        id: Option<String>,
    },
    /// Run the oracle comparisons.
    Validate {
        #[arg(default_value = "all")]
        suite: String,
    },
}

enum Failure {
    Validation(String),
    Config(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => Failure::Config(m),
            Error::InvalidProtocol(m) => Failure::Config(format!("invalid protocol: {m}")),
            other => Failure::Validation(other.to_string()),
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(e) = cli.eps {
        cfg.epsilon = e;
    }
    Ok(cfg)
}

fn out_dir(cli: &Cli, cfg: &ExperimentConfig, name: &str) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| cfg.output.clone())
        .unwrap_or_else(|| Path::new("runs").join(name))
}

fn parse_id(s: &str) -> Result<ExperimentId, Failure> {
    serde_json::from_value(serde_json::Value::String(s.to_lowercase()))
        .map_err(|_| Failure::Config(format!("unknown experiment `{s}` (expected e1, e2, h1, e3 or custom)")))
}

/// Protocol, target and source implied by a config.
fn sweep_problem(cfg: &ExperimentConfig) -> Result<(Protocol, lqgmpid::bridge::GaussianMixture, Vector), Failure> {
    Ok(match cfg.experiment {
        ExperimentId::Custom => cfg.custom_problem()?,
        ExperimentId::H1 => {
            let h = &cfg.h1;
            let split = BlockSplit::for_dim(h.timing_dim);
            let p = build_hierarchical_protocol(
                h.timing_dim,
                &split,
                Variant::B2,
                &h.stiffness,
                h.t_star,
                h.intervals,
                h.target.trunk_travel,
            )?;
            let t = experiment::build_hierarchical_target(&split, h.sweep_modes, &h.target)?;
            (p, t, Vector::zeros(h.timing_dim))
        }
        _ => {
            let p = lqgmpid::protocol::baseline_protocol(
                cfg.corridor.intervals,
                cfg.corridor.geometry.length,
                cfg.corridor.baseline_stiffness,
            );
            (p, cfg.corridor_target()?, Vector::zeros(2))
        }
    })
}

fn cmd_sweep(cli: &Cli, protocol_file: Option<&Path>) -> Result<(), Failure> {
    let cfg = load_config(cli)?;
    let (mut protocol, target, mut source) = sweep_problem(&cfg)?;
    if let Some(path) = protocol_file {
        let text = std::fs::read_to_string(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
        let doc: ProtocolDoc =
            serde_json::from_str(&text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
        let violations = doc_violations(&doc);
        if !violations.is_empty() {
            for v in &violations {
                eprintln!("violation: {v}");
            }
            return Err(Failure::Config(format!("{} protocol violations", violations.len())));
        }
        protocol = Protocol::from_doc(&doc)?;
        if protocol.dim != target.dim() {
            return Err(Failure::Config(format!(
                "protocol d = {} but target d = {}",
                protocol.dim,
                target.dim()
            )));
        }
        source = Vector::zeros(protocol.dim);
    }
    let violations = protocol.validate();
    if !violations.is_empty() {
        for v in &violations {
            eprintln!("violation: {v}");
        }
        return Err(Failure::Config(format!("{} protocol violations", violations.len())));
    }
    let mut writer = RunWriter::create(&out_dir(cli, &cfg, "sweep"))?;
    let opts = SweepOptions::with_epsilon(cfg.epsilon);
    let ctx = writer.timed("precompute", || BridgeContext::new(&protocol, target, source, &opts))?;
    writer.write_json(
        "sweep.json",
        &serde_json::json!({"backward": &ctx.backward, "forward": &ctx.forward}),
    )?;
    let manifest = writer.finish(&cfg)?;
    println!("precompute_ms {:.3}", manifest.timings_ms["precompute"]);
    Ok(())
}

/// Structural problems `Protocol::from_doc` would reject, reported one per line.
fn doc_violations(doc: &ProtocolDoc) -> Vec<String> {
    match Protocol::from_doc(doc) {
        Ok(p) => p.validate().iter().map(|v| v.to_string()).collect(),
        Err(e) => vec![e.to_string()],
    }
}

fn cmd_experiment(cli: &Cli, id: Option<&str>) -> Result<(), Failure> {
    let mut cfg = load_config(cli)?;
    if let Some(id) = id {
        cfg.experiment = parse_id(id)?;
    }
    let out = out_dir(cli, &cfg, cfg.experiment.name());
    let manifest = experiment::run(&cfg, &out)?;
    println!("{} -> {}", manifest.experiment, out.display());
    for (stage, ms) in &manifest.timings_ms {
        println!("  {stage}: {ms:.1} ms");
    }
    Ok(())
}

fn cmd_validate(cli: &Cli, suite: &str) -> Result<(), Failure> {
    let cfg = load_config(cli)?;
    if suite != "all" && !oracle::SUITES.contains(&suite) {
        return Err(Failure::Config(format!("unknown suite `{suite}`")));
    }
    let checks = oracle::run_suite(suite, cfg.seed)?;
    let failed = checks.iter().filter(|c| !c.passed).count();
    for c in &checks {
        println!("{c}");
    }
    println!("{} checks, {failed} failed", checks.len());
    if failed > 0 {
        return Err(Failure::Validation(format!("{failed} checks failed")));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match &cli.command {
        Command::Sweep { protocol } => cmd_sweep(&cli, protocol.as_deref()),
        Command::Experiment { id } => cmd_experiment(&cli, id.as_deref()),
        Command::Validate { suite } => cmd_validate(&cli, suite),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
