//! Experiment driver: `kato <command> <config> [--jobs N] [--out DIR]`.
//!
//! Every run reads one TOML config (scenario plus one command table with
//! its assertion block), writes CSV/JSON artifacts and a manifest to the
//! output directory, prints a human-readable summary, and exits 0 exactly
//! when all in-config assertions pass. Reruns with the same config and
//! seed produce byte-identical CSV.

mod config;
mod geometry;
mod operator;
mod report;
mod scenario;
mod wave;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use config::ConfigError;
use report::RunReport;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("flow: {0}")]
    Flow(#[from] kato_core::genflow::GenFlowError),
    #[error("escape: {0}")]
    Escape(#[from] kato_core::escape::EscapeError),
    #[error("operator: {0}")]
    Discrete(#[from] kato_core::discrete::DiscreteError),
    #[error("evolution: {0}")]
    Evolve(#[from] kato_core::evolve::EvolveError),
    #[error("phase space: {0}")]
    Phase(#[from] kato_core::phasespace::PhaseSpaceError),
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment config (TOML): scenario, command table, assertions.
    config: PathBuf,
    /// Worker threads for the parallel stages.
    #[arg(long)]
    jobs: Option<usize>,
    /// Output directory; defaults to `<command>-out`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Parser)]
#[command(name = "kato", version, about = "Numerical laboratory driver")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Classify sampled boundary points into the reflection taxonomy.
    Classify(Common),
    /// Dump one generalized trajectory with its boundary events.
    Flow(Common),
    /// Randomized escape sweep over rays near the obstacle.
    Nontrap(Common),
    /// Incoming-time witnesses and monitor derivative bounds.
    Incoming(Common),
    /// Escape-function inequality sweep over a phase-space grid.
    EscapeCheck(Common),
    /// Functional-calculus backend agreement and extension decay.
    FuncalcCheck(Common),
    /// Commutator operator-norm scaling across semiclassical scales.
    CommutatorScan {
        #[command(flatten)]
        common: Common,
        /// Restrict the scan to one variant label.
        #[arg(long)]
        variant: Option<String>,
    },
    /// Resolvent bound on random data.
    ResolventCheck(Common),
    /// Dyadic decomposition reconstruction and energy equivalence.
    LpCheck(Common),
    /// Filtered smoothing quotients across the packet family's scales.
    SmoothScan(Common),
    /// Boundary-trace flux of a propagated packet.
    Flux(Common),
    /// Phase-space measurements: support fraction, Husimi dump, centroid.
    Measure(Common),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Classify(_) => "classify",
            Command::Flow(_) => "flow",
            Command::Nontrap(_) => "nontrap",
            Command::Incoming(_) => "incoming",
            Command::EscapeCheck(_) => "escape-check",
            Command::FuncalcCheck(_) => "funcalc-check",
            Command::CommutatorScan { .. } => "commutator-scan",
            Command::ResolventCheck(_) => "resolvent-check",
            Command::LpCheck(_) => "lp-check",
            Command::SmoothScan(_) => "smooth-scan",
            Command::Flux(_) => "flux",
            Command::Measure(_) => "measure",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::Classify(c)
            | Command::Flow(c)
            | Command::Nontrap(c)
            | Command::Incoming(c)
            | Command::EscapeCheck(c)
            | Command::FuncalcCheck(c)
            | Command::ResolventCheck(c)
            | Command::LpCheck(c)
            | Command::SmoothScan(c)
            | Command::Flux(c)
            | Command::Measure(c) => c,
            Command::CommutatorScan { common, .. } => common,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(command: Command) -> Result<bool, CliError> {
    let started = std::time::Instant::now();
    let common = command.common();
    if let Some(jobs) = common.jobs {
        if jobs == 0 {
            return Err(ConfigError::Invalid("--jobs must be positive".to_string()).into());
        }
        // Harmless if a pool already exists (tests drive run() repeatedly).
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global();
    }
    let name = command.name();
    let out_dir = common
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("{name}-out")));
    let config_path = common.config.clone();
    let jobs = common.jobs;
    let mut report = RunReport::new(name, &out_dir)?;

    let sha = dispatch(&command, &config_path, &mut report)?;
    let passed = report.finish(&config_path, &sha, jobs, started)?;
    Ok(passed)
}

fn dispatch(
    command: &Command,
    path: &Path,
    report: &mut RunReport,
) -> Result<String, CliError> {
    Ok(match command {
        Command::Classify(_) => {
            let loaded = config::load(path, "classify")?;
            let sha = loaded.sha256.clone();
            geometry::run_classify(loaded, report)?;
            sha
        }
        Command::Flow(_) => {
            let loaded = config::load(path, "flow")?;
            let sha = loaded.sha256.clone();
            geometry::run_flow(loaded, report)?;
            sha
        }
        Command::Nontrap(_) => {
            let loaded = config::load(path, "nontrap")?;
            let sha = loaded.sha256.clone();
            geometry::run_nontrap(loaded, report)?;
            sha
        }
        Command::Incoming(_) => {
            let loaded = config::load(path, "incoming")?;
            let sha = loaded.sha256.clone();
            geometry::run_incoming(loaded, report)?;
            sha
        }
        Command::EscapeCheck(_) => {
            let loaded = config::load(path, "escape-check")?;
            let sha = loaded.sha256.clone();
            operator::run_escape_check(loaded, report)?;
            sha
        }
        Command::FuncalcCheck(_) => {
            let loaded = config::load(path, "funcalc-check")?;
            let sha = loaded.sha256.clone();
            operator::run_funcalc_check(loaded, report)?;
            sha
        }
        Command::CommutatorScan { variant, .. } => {
            let loaded = config::load(path, "commutator-scan")?;
            let sha = loaded.sha256.clone();
            operator::run_commutator_scan(loaded, variant.as_deref(), report)?;
            sha
        }
        Command::ResolventCheck(_) => {
            let loaded = config::load(path, "resolvent-check")?;
            let sha = loaded.sha256.clone();
            operator::run_resolvent_check(loaded, report)?;
            sha
        }
        Command::LpCheck(_) => {
            let loaded = config::load(path, "lp-check")?;
            let sha = loaded.sha256.clone();
            operator::run_lp_check(loaded, report)?;
            sha
        }
        Command::SmoothScan(_) => {
            let loaded = config::load(path, "smooth-scan")?;
            let sha = loaded.sha256.clone();
            wave::run_smooth_scan(loaded, report)?;
            sha
        }
        Command::Flux(_) => {
            let loaded = config::load(path, "flux")?;
            let sha = loaded.sha256.clone();
            wave::run_flux(loaded, report)?;
            sha
        }
        Command::Measure(_) => {
            let loaded = config::load(path, "measure")?;
            let sha = loaded.sha256.clone();
            wave::run_measure(loaded, report)?;
            sha
        }
    })
}
