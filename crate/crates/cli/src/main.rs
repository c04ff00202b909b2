//! `crossfeat` command line: `gen` writes datasets, `train` runs a plan,
//! `eval` produces reports from a checkpoint, `ablate` runs a variant
//! matrix.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 runtime/numeric error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

#[derive(Parser)]
#[command(
    name = "crossfeat",
    about = "Miniature visual abstract reasoning experiments",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset directory (manifest.json + split .bin files).
    Gen(GenArgs),
    /// Train a model from a JSON run config.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Train a matrix of variants over shared seeds and report orderings.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Dataset kind: mini-rpm or mini-bongard.
    #[arg(long)]
    kind: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    train: usize,
    #[arg(long, default_value_t = 0)]
    val: usize,
    #[arg(long, default_value_t = 0)]
    test: usize,
    /// Generalization regime (mini-rpm): iid, interpolation, heldout_pair.
    #[arg(long, default_value = "iid")]
    regime: String,
    /// Concept family (mini-bongard): mixture, shape, count, combo, symmetry.
    #[arg(long, default_value = "mixture")]
    concept: String,
    /// Panel side in pixels (mini-bongard only; mini-rpm panels are 32).
    #[arg(long)]
    panel_side: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Path to the JSON run config.
    #[arg(long)]
    config: PathBuf,
    /// Warm-start checkpoint directory: inserts a re-space layer after the
    /// feature path and copies all base parameters.
    #[arg(long)]
    warm_start: Option<PathBuf>,
    /// With --warm-start: also drop the metadata constraints for this stage.
    #[arg(long, default_value_t = false)]
    drop_meta: bool,
    /// Override the EM schedule mode: off or alternate.
    #[arg(long)]
    em: Option<String>,
    /// Resume from the run directory's last checkpoint if present.
    #[arg(long, default_value_t = false)]
    resume: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint directory (params.bin + state.json).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    out: PathBuf,
    /// Also write PNG plots.
    #[arg(long, default_value_t = false)]
    plots: bool,
    /// Compare the checkpoint's config hash against this run config and
    /// refuse on mismatch (unless --force).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = false)]
    force: bool,
}

#[derive(Args)]
struct AblateArgs {
    /// Matrix description: {"data", "seeds", "arms": [...]}.
    #[arg(long)]
    matrix: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Skip runs whose results already exist.
    #[arg(long, default_value_t = false)]
    resume: bool,
    /// Worker pool size for independent runs.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

/// Errors split by exit code: usage/config problems exit 1, runtime 2.
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => m,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // Help/version requests are successes; anything else is usage.
            let benign = matches!(
                err.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            );
            let _ = err.print();
            return if benign {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            };
        }
    };
    let result = match cli.command {
        Command::Gen(args) => commands::gen(args),
        Command::Train(args) => commands::train(args),
        Command::Eval(args) => commands::eval(args),
        Command::Ablate(args) => commands::ablate(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}", err.message());
            ExitCode::from(err.code())
        }
    }
}
