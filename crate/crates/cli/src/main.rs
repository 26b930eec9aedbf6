//! `prose-fd`: data generation, training, evaluation, ablations, and
//! prediction export for the multimodal PDE surrogate.
//!
//! Exit codes: 0 success, 2 configuration error, 3 generation failure,
//! 4 training abort (non-finite loss; diagnostics land in `abort.json`),
//! 5 I/O error.

use clap::{Parser, Subcommand};
use prose_fd_cli::commands;
use prose_fd_cli::errors::CliError;

#[derive(Parser)]
#[command(
    name = "prose-fd",
    version,
    about = "Multimodal PDE surrogate: generate data, train, evaluate, ablate, predict"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic trajectory dataset and split it.
    Generate(commands::GenerateArgs),
    /// Train a model; writes manifest, NDJSON log, and checkpoints.
    Train(commands::TrainArgs),
    /// Score a checkpoint on a dataset split.
    Eval(commands::EvalArgs),
    /// Train and score the ablation variants side by side.
    Ablate(commands::AblateArgs),
    /// Export ground-truth and predicted frames as 16-bit PGM images.
    Predict(commands::PredictArgs),
}

fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.cmd {
        Cmd::Generate(args) => commands::generate(args),
        Cmd::Train(args) => commands::train(args),
        Cmd::Eval(args) => commands::eval(args),
        Cmd::Ablate(args) => commands::ablate(args),
        Cmd::Predict(args) => commands::predict(args),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(&cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
