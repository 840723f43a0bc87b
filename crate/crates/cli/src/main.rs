//! `dadmm` — generate datasets, train hyperparameter heads, evaluate
//! variants, and trace single-instance convergence for the learned
//! distributed ADMM pipeline.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use dadmm_core::problems::ProblemError;
use dadmm_core::training::TrainError;

/// Exit codes: 0 success, 2 configuration error, 3 numeric abort, 4 I/O.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Numeric(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

impl From<ProblemError> for CliError {
    fn from(e: ProblemError) -> Self {
        match &e {
            ProblemError::Io(_) => CliError::Io(e.to_string()),
            ProblemError::Graph(_) | ProblemError::DesignResampleBudget(_) => {
                CliError::Numeric(e.to_string())
            }
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match &e {
            TrainError::NonFinite { .. } | TrainError::Optim(_) => CliError::Numeric(e.to_string()),
            TrainError::Io(_) => CliError::Io(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "dadmm",
    version,
    about = "Decentralized distributed ADMM with learned hyperparameters"
)]
struct Cli {
    /// Worker threads for batch and evaluation parallelism. Results are
    /// bit-identical for any value; 1 keeps execution fully sequential.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/val/test dataset files for one problem class.
    Generate(GenerateArgs),
    /// Train a learned variant on a generated dataset.
    Train(TrainArgs),
    /// Evaluate the baseline and trained checkpoints on the test split.
    Eval(EvalArgs),
    /// Emit the per-iteration trace of a single instance.
    Trace(TraceArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Problem class: consensus | least-squares
    #[arg(long)]
    class: Option<String>,
    /// Output directory for train.jsonl / val.jsonl / test.jsonl
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    train_count: Option<usize>,
    #[arg(long)]
    val_count: Option<usize>,
    #[arg(long)]
    test_count: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Nodes per communication graph
    #[arg(long)]
    nodes: Option<usize>,
    /// Local problem dimension
    #[arg(long)]
    dim: Option<usize>,
    /// Edge probability of the random graph model
    #[arg(long)]
    edge_prob: Option<f64>,
    /// Iterations of the stored reference run
    #[arg(long)]
    baseline_k: Option<usize>,
    /// JSON config file; flags override its fields
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory produced by `generate`
    #[arg(long)]
    data: Option<PathBuf>,
    /// Run directory for checkpoints and the training log
    #[arg(long)]
    out: Option<PathBuf>,
    /// Variant: global-alpha | local-alpha | edge-weights | combined
    #[arg(long)]
    variant: Option<String>,
    /// Unrolled iterations the loss is evaluated after
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Global gradient clipping radius
    #[arg(long)]
    clip: Option<f64>,
    /// Loss denominator floor
    #[arg(long)]
    loss_eps: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Resume from a checkpoint written by an earlier run
    #[arg(long)]
    resume: Option<PathBuf>,
    /// JSON config file; flags override its fields
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Dataset directory containing test.jsonl
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory for the report and traces
    #[arg(long)]
    out: Option<PathBuf>,
    /// Trained checkpoints to evaluate alongside the baseline (repeatable)
    #[arg(long = "checkpoint")]
    checkpoints: Vec<PathBuf>,
    /// Require exactly these variants (comma-separated); errors if one has
    /// no checkpoint
    #[arg(long, value_delimiter = ',')]
    variants: Option<Vec<String>>,
    /// Iteration counts reported in the table (comma-separated)
    #[arg(long, value_delimiter = ',')]
    ks: Option<Vec<usize>>,
    /// Last iteration of the emitted traces
    #[arg(long)]
    trace_k: Option<usize>,
    /// JSON config file; flags override its fields
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct TraceArgs {
    /// Dataset directory
    #[arg(long)]
    data: Option<PathBuf>,
    /// Split to read the instance from: train | val | test
    #[arg(long)]
    split: Option<String>,
    /// Instance index within the split
    #[arg(long)]
    instance: Option<usize>,
    /// Output CSV path
    #[arg(long)]
    out: Option<PathBuf>,
    /// Checkpoint to trace; the baseline is traced when omitted
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Last iteration of the trace
    #[arg(long)]
    k_max: Option<usize>,
    /// JSON config file; flags override its fields
    #[arg(long)]
    config: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
    {
        eprintln!("error: failed to configure thread pool: {e}");
        return ExitCode::from(2);
    }
    let result = match cli.command {
        Command::Generate(args) => commands::generate(args),
        Command::Train(args) => commands::train(args),
        Command::Eval(args) => commands::eval(args),
        Command::Trace(args) => commands::trace(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
