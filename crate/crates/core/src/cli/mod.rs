//! Command-line interface.
//!
//! Settings resolve in order: flag, then `--config` file, then built-in
//! default. Exit status is 0 on success, 1 for runtime or data errors
//! (including bound violations) and 2 for usage or config errors.

mod commands;
pub mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::error::Error;

pub use config::RunConfig;

#[derive(Debug, Parser)]
#[command(
    name = "nnscore",
    version,
    about = "Nearest-neighbour score estimation for diffusion models"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML config file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed for every random stream.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true, env = "NNSCORE_THREADS")]
    pub threads: Option<usize>,
    /// Dataset file (binary, or .csv).
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
    /// Output path.
    #[arg(long, short = 'o', global = true)]
    pub out: Option<PathBuf>,
    /// Noise schedule: edm or vp.
    #[arg(long, global = true)]
    pub schedule: Option<String>,
    #[arg(long, global = true)]
    pub t_min: Option<f64>,
    #[arg(long, global = true)]
    pub t_max: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Gen(GenArgs),
    /// Build the index and check it against a brute-force scan.
    Index(IndexArgs),
    /// Estimate posterior means and scores for z vectors read from CSV.
    Estimate(EstimateArgs),
    /// Bias / variance / MSE sweep over a time grid.
    Bench(BenchArgs),
    /// Check the covariance bounds of the nearest-neighbour proposal.
    Bounds(BoundsArgs),
    /// Integrate the probability-flow ODE.
    Sample(SampleArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// gmm, uniform or moons.
    #[arg(long)]
    pub kind: Option<String>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub components: Option<usize>,
    /// Per-component standard deviation (gmm) or noise level (moons).
    #[arg(long)]
    pub std: Option<f64>,
}

#[derive(Debug, Args)]
pub struct IndexArgs {
    #[arg(long)]
    pub k: Option<usize>,
    /// Number of random queries to validate.
    #[arg(long)]
    pub points: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    /// CSV file with one z vector per row.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub t: f64,
    /// knn, uniform, mc_posterior or exact.
    #[arg(long)]
    pub estimators: Option<String>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// `lo:hi:count` (log-spaced) or a comma-separated list.
    #[arg(long)]
    pub t_grid: Option<String>,
    /// z samples per time.
    #[arg(long)]
    pub points: Option<usize>,
    /// Estimator evaluations per z.
    #[arg(long)]
    pub reps: Option<usize>,
    /// Comma-separated: knn, uniform, stf, mc_single, mc_posterior, exact.
    #[arg(long)]
    pub estimators: Option<String>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
}

#[derive(Debug, Args)]
pub struct BoundsArgs {
    /// ratio or mixture.
    #[arg(long)]
    pub bound: Option<String>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub n: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub steps: Option<usize>,
    /// euler or heun.
    #[arg(long)]
    pub solver: Option<String>,
    /// Score source: exact, knn or uniform.
    #[arg(long)]
    pub score: Option<String>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    /// Stop the estimated-score integration at this time.
    #[arg(long)]
    pub t_switch: Option<f64>,
    /// After t_switch: stop, or continue with the exact score.
    #[arg(long)]
    pub handoff: Option<String>,
    /// Time grid: edm, linear or log.
    #[arg(long)]
    pub grid: Option<String>,
    #[arg(long)]
    pub samples: Option<usize>,
    /// Write every intermediate state.
    #[arg(long)]
    pub trace: bool,
    /// Use one estimator stream for both Heun stages.
    #[arg(long)]
    pub shared_batch: bool,
}

/// Parses the process arguments and runs the selected command.
pub fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

pub fn exit_code(e: &Error) -> u8 {
    if e.is_usage() {
        2
    } else {
        1
    }
}

pub fn run(cli: Cli) -> Result<ExitCode, Error> {
    let cfg = match &cli.global.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let threads = cli
        .global
        .threads
        .or(cfg.threads)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if threads == 0 {
        return Err(Error::Argument("--threads must be at least 1".into()));
    }
    let ctx = commands::Ctx::new(cli.global, cfg);
    crate::par::with_threads(threads, move || commands::dispatch(&ctx, cli.command))
}
