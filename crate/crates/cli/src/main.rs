use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hymoe::data::{Format, Phase};

mod commands;
mod config;
mod error;

#[derive(Parser, Debug)]
#[command(name = "hymoe", version, about = "Hybrid mixture-of-experts sequential recommender")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parse an interaction log, filter it and write a leave-one-out dataset
    PrepareData(PrepareArgs),
    /// Train a model; writes checkpoints and metric logs to a run directory
    Train(TrainArgs),
    /// Score a checkpoint on the validation or test targets
    Eval(EvalArgs),
    /// Compare autodiff gradients with finite differences per parameter group
    GradCheck(GradCheckArgs),
    /// Write a synthetic successor-cycle interaction log as CSV
    GenerateSynthetic(SyntheticArgs),
}

#[derive(Args, Debug)]
pub struct PrepareArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value = "movielens-dat")]
    pub format: Format,
    #[arg(long)]
    pub output: PathBuf,
    /// Minimum interactions per user (iterated with --min-item to a fixpoint)
    #[arg(long, default_value_t = 5)]
    pub min_user: usize,
    #[arg(long, default_value_t = 5)]
    pub min_item: usize,
    /// Malformed rows to skip before giving up
    #[arg(long, default_value_t = 0)]
    pub max_malformed: usize,
}

#[derive(Args, Debug, Default)]
pub struct ConfigArgs {
    /// key = value config file
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config key (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Parent of the run directory [default: $HYMOE_OUTPUT_ROOT or ./runs]
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    #[arg(long)]
    pub run_name: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Ablation: plain feed-forward layers instead of the hybrid block
    #[arg(long)]
    pub uniform_pffn: bool,
    /// Load-balance weight override
    #[arg(long)]
    pub lb_weight: Option<f64>,
    /// Keep the fusion scalar at its initial value
    #[arg(long)]
    pub freeze_alpha: bool,
    /// Replace the contents of an existing run directory
    #[arg(long)]
    pub overwrite: bool,
    /// Continue the run in this directory from its last checkpoint; only
    /// epochs, max_steps and patience may be changed with --set
    #[arg(long, value_name = "RUN_DIR", conflicts_with_all = ["config", "dataset", "output_dir", "run_name", "seed", "uniform_pffn", "lb_weight", "freeze_alpha", "overwrite"])]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, default_value = "test")]
    pub phase: Phase,
    /// Drop each user's input items from the candidates
    #[arg(long)]
    pub exclude_seen: bool,
    /// Model settings the checkpoint must match
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Metric records file to append to [default: eval.jsonl next to the checkpoint]
    #[arg(long)]
    pub record: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GradCheckArgs {
    /// Model settings (D=8, one layer, E=4, K=2 unless overridden)
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    /// Central-difference step
    #[arg(long, default_value_t = 1e-5)]
    pub eps: f64,
    /// Minimum top-K logit gap and router pre-activation for a usable point
    #[arg(long, default_value_t = 1e-3)]
    pub margin: f64,
    /// Optimizer step to evaluate at [default: half the warm-up]
    #[arg(long)]
    pub step: Option<u64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write the report as JSON
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SyntheticArgs {
    #[arg(long, default_value_t = 32)]
    pub sequences: usize,
    #[arg(long, default_value_t = 50)]
    pub items: usize,
    #[arg(long, default_value_t = 12)]
    pub length: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub output: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::PrepareData(a) => commands::prepare_data(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::GradCheck(a) => commands::grad_check(&a),
        Command::GenerateSynthetic(a) => commands::generate_synthetic(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
