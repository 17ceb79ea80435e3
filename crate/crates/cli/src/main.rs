mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use calibayes::experiment::Scene;
use calibayes::mcmc::McmcConfig;
use calibayes::sprsa::TuningConstants;
use calibayes::stats::StatisticKind;

#[derive(Parser, Debug)]
#[command(name = "calibayes", version, about = "Calibrated credible regions for one-factor models")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate datasets from a scene.
    Simulate(SimulateArgs),
    /// Posterior mode and its Wald covariance.
    Map(MapArgs),
    /// Posterior draws and convergence diagnostics.
    Mcmc(McmcArgs),
    /// Calibrate a grid of credible-region thresholds.
    Calibrate(CalibrateArgs),
    /// Monte Carlo validity experiment.
    Experiment(ExperimentArgs),
    /// Re-run the command recorded in a manifest.
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

impl Format {
    fn ext(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Json => "json",
        }
    }
}

fn parse_scene(s: &str) -> Result<Scene, String> {
    s.parse().map_err(|e: calibayes::Error| e.to_string())
}

fn parse_statistic(s: &str) -> Result<StatisticKind, String> {
    s.parse().map_err(|e: calibayes::Error| e.to_string())
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct SimulateArgs {
    /// 1 (uniform communality), 2 (fixed low) or 3 (fixed high).
    #[arg(long, value_parser = parse_scene)]
    pub scene: Scene,
    #[arg(long, default_value_t = 5)]
    pub m: usize,
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    #[arg(long, default_value_t = 1)]
    pub reps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
    /// Output directory.
    #[arg(long)]
    #[serde(skip_serializing, default)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct MapArgs {
    /// Cross-product data (.csv or .json).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 1e-6)]
    pub grad_tol: f64,
    #[arg(long, default_value_t = 500)]
    pub max_iter: usize,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    pub format: Format,
    /// Output directory.
    #[arg(long)]
    #[serde(skip_serializing, default)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SamplerArgs {
    #[arg(long, default_value_t = 5)]
    pub chains: usize,
    #[arg(long, default_value_t = 1000)]
    pub adapt: usize,
    #[arg(long, default_value_t = 10_000)]
    pub burnin: usize,
    #[arg(long, default_value_t = 10_000)]
    pub retain: usize,
    #[arg(long, default_value_t = 10)]
    pub thin: usize,
}

impl SamplerArgs {
    pub fn config(&self, seed: u64) -> McmcConfig {
        McmcConfig {
            chains: self.chains,
            adapt_iters: self.adapt,
            burnin_iters: self.burnin,
            retain_iters: self.retain,
            thin: self.thin,
            seed,
        }
    }
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct McmcArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub sampler: SamplerArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long)]
    #[serde(skip_serializing, default)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TuningArgs {
    /// Number of calibration iterations K.
    #[arg(long, default_value_t = 50_000)]
    pub iterations: usize,
    #[arg(long, default_value_t = 0.1)]
    pub alpha_rate: f64,
    #[arg(long, default_value_t = 0.65)]
    pub beta_rate: f64,
    #[arg(long, default_value_t = 0.05)]
    pub gamma_rate: f64,
    #[arg(long, default_value_t = 0.149)]
    pub delta_rate: f64,
    /// Leading iterations left out of the average.
    #[arg(long, default_value_t = 0)]
    pub burn_in: usize,
}

impl TuningArgs {
    pub fn tuning(&self) -> calibayes::Result<TuningConstants> {
        let t = TuningConstants {
            alpha: self.alpha_rate,
            beta: self.beta_rate,
            gamma: self.gamma_rate,
            delta: self.delta_rate,
            iterations: self.iterations,
            burn_in: self.burn_in,
        };
        t.validate()?;
        Ok(t)
    }
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_parser = parse_statistic, default_value = "pdr")]
    pub statistic: StatisticKind,
    /// Nominal levels, comma separated. Overrides --grid.
    #[arg(long, value_delimiter = ',')]
    pub alphas: Option<Vec<f64>>,
    /// Use the levels i/(Q+1), i = 1..Q.
    #[arg(long, default_value_t = 19)]
    pub grid: usize,
    #[command(flatten)]
    pub tuning: TuningArgs,
    #[command(flatten)]
    pub sampler: SamplerArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
    /// Output directory.
    #[arg(long)]
    #[serde(skip_serializing, default)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentArgs {
    #[arg(long, value_parser = parse_scene)]
    pub scene: Scene,
    #[arg(long, default_value_t = 5)]
    pub m: usize,
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    #[arg(long, default_value_t = 512)]
    pub reps: usize,
    /// Statistics to evaluate (default: both).
    #[arg(long, value_parser = parse_statistic, value_delimiter = ',')]
    pub statistic: Vec<StatisticKind>,
    #[command(flatten)]
    pub tuning: TuningArgs,
    #[command(flatten)]
    pub sampler: SamplerArgs,
    /// Only compute the uncalibrated contours.
    #[arg(long)]
    pub no_calibrate: bool,
    /// Keep flagged replications in the EDFs.
    #[arg(long)]
    pub include_flagged: bool,
    /// EDF grid, comma separated (default .05, .10, ..., .95).
    #[arg(long, value_delimiter = ',')]
    pub alphas: Option<Vec<f64>>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long)]
    #[serde(skip_serializing, default)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct ReplayArgs {
    /// A manifest.json written by an earlier run.
    pub manifest: PathBuf,
    /// Output directory (default: the manifest's directory).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("warning: could not size the thread pool: {e}");
        }
    }
    let started = std::time::Instant::now();
    let result = match cli.command {
        Command::Simulate(a) => commands::simulate(&a),
        Command::Map(a) => commands::map(&a),
        Command::Mcmc(a) => commands::mcmc(&a),
        Command::Calibrate(a) => commands::calibrate(&a),
        Command::Experiment(a) => commands::experiment(&a),
        Command::Replay(a) => commands::replay(&a),
    };
    match result {
        Ok(()) => {
            eprintln!("done in {:.1} s", started.elapsed().as_secs_f64());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
