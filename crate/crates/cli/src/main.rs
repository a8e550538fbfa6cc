//! `gladder`: precompute backbone embeddings, train ladder side networks,
//! evaluate them, and run full or early-exit inference.
//!
//! Exit codes: 0 success, 1 usage, 2 invalid input, 3 runtime failure.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_VALIDATION: u8 = 2;
pub const EXIT_RUNTIME: u8 = 3;

/// Environment variable that overrides the default cache directory.
pub const CACHE_DIR_ENV: &str = "GLADDER_CACHE_DIR";

#[derive(Debug, Parser)]
#[command(name = "gladder", version, about = "Side-network tuning for text-attributed graphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Embed every node at every inserted layer and write the cache.
    Precompute(PrecomputeArgs),
    /// Train a ladder stack and write a checkpoint plus per-epoch metrics.
    Train(TrainArgs),
    /// Accuracy of full inference on one split.
    Eval(EvalArgs),
    /// Per-node predictions, optionally with patience-based early exit.
    Infer(InferArgs),
    /// Time cached vs uncached training and full vs early-exit inference.
    Bench(BenchArgs),
    /// Re-hash every file named in a run manifest.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
struct Common {
    /// Graph in the tab-separated ingestion format.
    #[arg(long)]
    graph: PathBuf,
    /// Flat `key = value` config file; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the sampler, ladder-init and training seeds.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for embedding precomputation.
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum AblateArg {
    NoStruct,
    ConstLambda,
}

#[derive(Debug, Args)]
struct PrecomputeArgs {
    #[command(flatten)]
    common: Common,
    /// Cache file to write. Defaults to a file under the cache directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Embedding cache to train from. Without a value, the default cache
    /// location for this graph and config. Omit to run the backbone live.
    #[arg(long, num_args = 0..=1)]
    cache: Option<Option<PathBuf>>,
    /// Checkpoint to write.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Per-epoch metrics (JSON lines). Defaults to `<checkpoint>.metrics.jsonl`.
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long, value_enum)]
    ablate: Option<AblateArg>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, num_args = 0..=1)]
    cache: Option<Option<PathBuf>>,
    #[arg(long)]
    checkpoint: PathBuf,
    /// train, val or test.
    #[arg(long, default_value = "test")]
    split: String,
}

#[derive(Debug, Args)]
struct InferArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, num_args = 0..=1)]
    cache: Option<Option<PathBuf>>,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Stop once this many consecutive exit heads agree.
    #[arg(long)]
    early_exit: bool,
    /// Patience for early exit; defaults to the config's `infer.patience` (2).
    #[arg(long)]
    patience: Option<usize>,
    /// `all`, a split name, or comma-separated node ids.
    #[arg(long, default_value = "all")]
    nodes: String,
    /// Predictions as `node<TAB>class<TAB>exit_layer` lines.
    #[arg(long)]
    out: PathBuf,
    /// Exit statistics JSON. Defaults to `<out>.stats.json`.
    #[arg(long)]
    stats: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[command(flatten)]
    common: Common,
    /// Use this trained stack for the inference timings instead of training one.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Epochs timed per training mode.
    #[arg(long, default_value_t = 1)]
    epochs: usize,
    /// Early-exit patience for the inference timings.
    #[arg(long)]
    patience: Option<usize>,
    /// JSON report; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    manifest: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Precompute(a) => commands::precompute(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Infer(a) => commands::infer(a),
        Command::Bench(a) => commands::bench(a),
        Command::Verify(a) => commands::verify(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("gladder: {e}");
            ExitCode::from(if e.is_validation() { EXIT_VALIDATION } else { EXIT_RUNTIME })
        }
    }
}
