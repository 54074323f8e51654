mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use reform_decomp::data::CsvFormat;
use reform_decomp::reweight::Estimator;
use reform_decomp::Error;

/// Decompose a programme reform effect into policy, selection and time
/// effects, and the policy effect into direct and composition channels.
///
/// Settings resolve as: command-line flag, then environment variable, then
/// built-in default.
#[derive(Debug, Parser)]
#[command(name = "reform-decomp", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Draw a synthetic dataset and write it with its exact truth.
    Simulate(SimulateArgs),
    /// Estimate the reform decomposition (effects.json, effects.csv).
    Decompose(EstimateArgs),
    /// Estimate controlled direct and indirect effects (mediation.json).
    Mediate(EstimateArgs),
    /// Balance, support and pre-trend diagnostics (balance.json, balance.csv).
    Balance(BalanceArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FormatArg {
    Wide,
    Long,
}

impl From<FormatArg> for CsvFormat {
    fn from(f: FormatArg) -> CsvFormat {
        match f {
            FormatArg::Wide => CsvFormat::Wide,
            FormatArg::Long => CsvFormat::Long,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum EstimatorArg {
    Ipw,
    Ast,
}

impl From<EstimatorArg> for Estimator {
    fn from(e: EstimatorArg) -> Estimator {
        match e {
            EstimatorArg::Ipw => Estimator::Ipw,
            EstimatorArg::Ast => Estimator::Ast,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ViolationArg {
    BrokenTrend,
    HiddenConfounder,
    SupportHole,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Output directory (created if missing).
    #[arg(long, env = "REFORM_DECOMP_OUT", default_value = ".")]
    pub out: PathBuf,
    /// Worker threads; 0 uses all available cores.
    #[arg(long, env = "REFORM_DECOMP_THREADS", default_value_t = 0)]
    pub threads: usize,
    /// Random seed (default 0; for `simulate`, the configuration's seed).
    #[arg(long, env = "REFORM_DECOMP_SEED")]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub common: Common,
    /// JSON file with a full generator configuration; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Units drawn before control subsampling.
    #[arg(long, env = "REFORM_DECOMP_N")]
    pub n: Option<usize>,
    /// Outcome months.
    #[arg(long)]
    pub horizon: Option<usize>,
    /// Number of covariates.
    #[arg(long)]
    pub k: Option<usize>,
    /// Share of non-treated units kept (weights 1/rate).
    #[arg(long)]
    pub control_rate: Option<f64>,
    /// Pre-programme outcome months stored as hist_<j> covariates.
    #[arg(long)]
    pub history: Option<usize>,
    /// Common trend added to all post-period outcomes.
    #[arg(long)]
    pub trend: Option<f64>,
    /// Switch off every structural effect.
    #[arg(long)]
    pub null: bool,
    /// Draw binary outcomes instead of linear-probability values.
    #[arg(long)]
    pub binary_outcome: bool,
    /// Inject an assumption violation.
    #[arg(long, value_enum)]
    pub violation: Option<ViolationArg>,
    /// Size of the injected violation.
    #[arg(long, default_value_t = 0.0)]
    pub magnitude: f64,
    #[arg(long, value_enum, default_value = "wide")]
    pub format: FormatArg,
}

#[derive(Debug, Args)]
pub struct InputArgs {
    /// Dataset CSV.
    #[arg(long, env = "REFORM_DECOMP_INPUT")]
    pub input: PathBuf,
    #[arg(long, value_enum, env = "REFORM_DECOMP_FORMAT", default_value = "wide")]
    pub format: FormatArg,
    #[arg(long, value_enum, env = "REFORM_DECOMP_ESTIMATOR", default_value = "ast")]
    pub estimator: EstimatorArg,
    /// Keep only these covariates (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub covariates: Vec<String>,
    /// Drop these covariates (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub exclude: Vec<String>,
    /// Also balance mediator moments (direct and indirect effects).
    #[arg(long, env = "REFORM_DECOMP_MEDIATOR")]
    pub mediator: bool,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub input: InputArgs,
    /// Bootstrap replications; 0 skips inference.
    #[arg(long, env = "REFORM_DECOMP_REPS", default_value_t = 499)]
    pub reps: usize,
    /// Confidence level of the percentile intervals.
    #[arg(long, env = "REFORM_DECOMP_LEVEL", default_value_t = 0.95)]
    pub level: f64,
    /// Resample within each observed cell instead of the whole sample.
    #[arg(long)]
    pub stratified: bool,
    /// Write per-vector weight files (weights/<vector>.csv, id,weight).
    #[arg(long)]
    pub dump_weights: bool,
    /// Write propensity and tilting diagnostics (fits.json).
    #[arg(long)]
    pub dump_fits: bool,
    /// Write every replicate estimate (draws.csv).
    #[arg(long)]
    pub dump_draws: bool,
}

#[derive(Debug, Args)]
pub struct BalanceArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub input: InputArgs,
    /// Propensities outside [epsilon, 1 - epsilon] fail the support check.
    #[arg(long, env = "REFORM_DECOMP_EPSILON", default_value_t = 0.001)]
    pub epsilon: f64,
}

fn exit_code(kind: &str) -> u8 {
    match kind {
        "data" => 3,
        "input" => 4,
        "estimation" => 5,
        "support" => 6,
        "inference" => 7,
        "config" => 8,
        "io" => 9,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            return report(&Error::Config(first.to_string()));
        }
    };
    let result = match cli.command {
        Command::Simulate(a) => commands::simulate(&a),
        Command::Decompose(a) => commands::decompose(&a),
        Command::Mediate(a) => commands::mediate(&a),
        Command::Balance(a) => commands::balance(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(&e),
    }
}

fn report(e: &Error) -> ExitCode {
    let code = exit_code(e.kind());
    let line = serde_json::json!({ "error": e.kind(), "message": e.to_string(), "exit_code": code });
    eprintln!("{line}");
    ExitCode::from(code)
}
