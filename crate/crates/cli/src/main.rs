//! `helix`: build truthfulness manifolds, run steered generation and
//! temperature sweeps, and summarize telemetry.
//!
//! Exit codes: 0 success, 2 bad input, 3 numerical failure, 4 I/O error,
//! 5 backend handshake or stream failure, 6 too many failed sweep cells.

mod commands;
mod exit;
mod setup;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use setup::{BackendFlags, SteeringFlags};

#[derive(Debug, Parser)]
#[command(name = "helix", version, about = "Uncertainty-guided generation steering")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Accumulate hidden-state statistics and write an HLXM manifold.
    BuildManifold(BuildArgs),
    /// Generate one completion with per-token scoring.
    Generate(GenerateArgs),
    /// Run one prompt across a temperature grid and cluster the outputs.
    Sweep(SweepArgs),
    /// Summarize telemetry JSONL files and flag low-UTS traces.
    Stats(StatsArgs),
}

#[derive(Debug, clap::Args)]
pub struct BuildArgs {
    /// Replay trace files to read activations from.
    inputs: Vec<PathBuf>,
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Truthful-regime steps drawn from the synthetic backend.
    #[arg(long, default_value_t = 10_000)]
    samples: usize,
    /// Covariance ridge.
    #[arg(long)]
    lambda: Option<f64>,
    /// Fraction of each layer's stream held out to calibrate d_ref.
    #[arg(long)]
    holdout: Option<f64>,
    /// Only keep these layer ids.
    #[arg(long)]
    layers: Option<String>,
    /// Sampling temperature of the corpus, recorded in the metadata.
    #[arg(long = "build-temperature", default_value_t = 0.1)]
    build_temperature: f64,
    #[command(flatten)]
    backend: BackendFlags,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Enabled,
    Observe,
    Disabled,
}

#[derive(Debug, clap::Args)]
pub struct GenerateArgs {
    #[arg(long)]
    prompt: String,
    #[arg(long, value_name = "FILE")]
    manifold: PathBuf,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long = "max-tokens")]
    max_tokens: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Per-token JSONL output; must not exist yet.
    #[arg(long, value_name = "FILE")]
    telemetry: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "enabled")]
    mode: ModeArg,
    #[command(flatten)]
    steering: SteeringFlags,
    #[command(flatten)]
    backend: BackendFlags,
}

#[derive(Debug, clap::Args)]
pub struct SweepArgs {
    #[arg(long)]
    prompt: String,
    #[arg(long, value_name = "FILE")]
    manifold: PathBuf,
    /// `start:stop:step` or a comma list.
    #[arg(long)]
    grid: Option<String>,
    /// Completions per temperature.
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long = "max-tokens")]
    max_tokens: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Duplicate threshold for clustering and SAC.
    #[arg(long)]
    theta: Option<f64>,
    /// Perplexity ceiling for LC.
    #[arg(long = "tau-ppl")]
    tau_ppl: Option<f64>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    #[command(flatten)]
    steering: SteeringFlags,
    #[command(flatten)]
    backend: BackendFlags,
}

#[derive(Debug, clap::Args)]
pub struct StatsArgs {
    #[arg(required = true)]
    files: Vec<PathBuf>,
    /// Flag traces whose mean UTS is below this.
    #[arg(long = "uts-threshold", default_value_t = 0.5)]
    uts_threshold: f64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::BuildManifold(a) => commands::build_manifold(a),
        Command::Generate(a) => commands::generate_cmd(a),
        Command::Sweep(a) => commands::sweep_cmd(a),
        Command::Stats(a) => commands::stats_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("helix: {e}");
            ExitCode::from(e.code)
        }
    }
}
