//! `psilon`: train, grid-search, prune, analyze and evaluate networks.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// A problem with the command line or configuration; exits with status 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser)]
#[command(
    name = "psilon",
    version,
    about = "L1-weight-normalized networks with path-norm capacity control"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write model.json, metrics.csv and pathnorm.json.
    Train(TrainArgs),
    /// Train one model per λ and pick the best by final validation loss.
    Gridsearch(GridArgs),
    /// Train with a pruning window that anneals every L1 layer to exact sparsity.
    Prune(PruneArgs),
    /// Report path-norm bounds and sparsity of a saved model.
    Analyze(AnalyzeArgs),
    /// Evaluate a saved model on one split of a configured dataset.
    Eval(EvalArgs),
    /// Run the built-in invariant checks.
    Selftest(SelftestArgs),
}

#[derive(Args, Clone)]
pub struct RunArgs {
    /// Run configuration JSON.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; overrides the config's output_dir.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seed for every random choice; overrides the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of optimizer steps; overrides the config.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Replace an existing output directory.
    #[arg(long)]
    pub overwrite: bool,
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Regularization strength; overrides the config's regularizer λ.
    #[arg(long)]
    pub lambda: Option<f64>,
}

#[derive(Args)]
pub struct GridArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Comma-separated λ values; defaults to the config's list or the standard 13-value grid.
    #[arg(long, value_delimiter = ',')]
    pub lambdas: Option<Vec<f64>>,
    /// Worker threads for grid cells.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Args)]
pub struct PruneArgs {
    #[command(flatten)]
    pub train: TrainArgs,
    /// First step of the pruning window; overrides the config.
    #[arg(long)]
    pub prune_start: Option<usize>,
    /// Step at which pruning completes; overrides the config.
    #[arg(long)]
    pub prune_end: Option<usize>,
}

#[derive(Args)]
pub struct AnalyzeArgs {
    /// Saved model JSON.
    #[arg(long)]
    pub model: PathBuf,
    /// Also count paths one by one (refused past 10⁷ paths).
    #[arg(long)]
    pub oracle: bool,
    /// Random input pairs for the empirical Lipschitz probe; 0 disables it.
    #[arg(long, default_value_t = 0)]
    pub lipschitz_pairs: usize,
    /// Half-width of the input box the probe samples from.
    #[arg(long, default_value_t = 1.0)]
    pub input_box: f64,
    /// Largest output width for which the ∞→1 norm is computed exactly.
    #[arg(long, default_value_t = psilon::linalg::DEFAULT_EXACT_DIM_LIMIT)]
    pub exact_dim_limit: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write the report here instead of standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum SplitName {
    Train,
    Val,
    Test,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Saved model JSON.
    #[arg(long)]
    pub model: PathBuf,
    /// Run configuration naming the dataset and split.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitName::Test)]
    pub split: SplitName,
    /// Overrides the config's seed, which fixes the split.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args)]
pub struct SelftestArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 1;
    }
    match err.downcast_ref::<psilon::Error>() {
        Some(psilon::Error::Config(_)) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let outcome = match cli.command {
        Command::Train(a) => commands::train(&a, None),
        Command::Gridsearch(a) => commands::gridsearch(&a),
        Command::Prune(a) => commands::prune(&a),
        Command::Analyze(a) => commands::analyze(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Selftest(a) => commands::selftest(&a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
