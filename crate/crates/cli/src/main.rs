//! `softsae` command-line tool: synthetic data, training, evaluation,
//! gradient checks and file inspection.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "softsae", version, about = "Sparse autoencoders with per-input sparsity budgets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset with ground-truth factor counts.
    GenData(GenDataArgs),
    /// Train a model on an activation file.
    Train(TrainArgs),
    /// Evaluate a checkpoint on an activation file.
    Eval(EvalArgs),
    /// Compare analytic gradients against central finite differences.
    Gradcheck(GradcheckArgs),
    /// Print a checkpoint header.
    Inspect(InspectArgs),
    /// Per-dimension mean and variance of an activation file.
    Stats(StatsArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 64)]
    pub n: usize,
    /// Number of dictionary atoms.
    #[arg(long, default_value_t = 200)]
    pub atoms: usize,
    #[arg(long, default_value_t = 50_000)]
    pub samples: usize,
    #[arg(long, default_value_t = 1)]
    pub c_min: usize,
    #[arg(long, default_value_t = 8)]
    pub c_max: usize,
    #[arg(long, default_value_t = softsae::datagen::DEFAULT_COEFF_LOW)]
    pub coeff_low: f64,
    #[arg(long, default_value_t = softsae::datagen::DEFAULT_COEFF_HIGH)]
    pub coeff_high: f64,
    /// Standard deviation of the additive Gaussian noise.
    #[arg(long, default_value_t = 0.01)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Dictionary seed (defaults to --seed). Reuse it with a different --seed
    /// for held-out samples of the same atoms.
    #[arg(long)]
    pub dict_seed: Option<u64>,
    /// Output activation file; sidecars are written next to it.
    #[arg(long)]
    pub out: PathBuf,
    /// Overwrite existing outputs.
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// JSON config with `TrainConfig` field names.
    #[arg(long, conflicts_with = "profile")]
    pub config: Option<PathBuf>,
    /// Built-in profile: desk, clip-like or gemma-like.
    #[arg(long)]
    pub profile: Option<String>,
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Override total steps (schedule boundaries are rescaled).
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// softsae or topk.
    #[arg(long)]
    pub mode: Option<String>,
    /// Disable alpha and k annealing.
    #[arg(long)]
    pub no_anneal: bool,
    /// Write a checkpoint every this many steps (0 = only at the end).
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: u64,
    /// Continue from a checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Overwrite an existing output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Ground-truth sidecar; defaults to `<data>.truth.json` when present.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Report path (JSON).
    #[arg(long)]
    pub out: PathBuf,
    /// Also append a CSV row to this file.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 8)]
    pub n: usize,
    #[arg(long, default_value_t = 32)]
    pub d: usize,
    #[arg(long, default_value_t = 2)]
    pub batch: usize,
    /// Temperatures to check (repeatable).
    #[arg(long = "alpha", num_args = 1.., default_values_t = vec![0.1, 1.0])]
    pub alphas: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    /// Flip the sign of one analytic gradient; the suite must then fail.
    #[arg(long, hide = true)]
    pub inject_fault: bool,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    pub checkpoint: PathBuf,
}

#[derive(Args, Debug)]
pub struct StatsArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Write the statistics as JSON here instead of standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Inspect(a) => commands::inspect(a),
        Command::Stats(a) => commands::stats(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
