//! Command-line frontend: dataset generation, noise injection, training in
//! both modes, evaluation, and multi-rate comparison experiments.
//!
//! Exit codes: 0 on success, 1 on validation errors (bad flags, bad config,
//! malformed inputs), 2 on runtime failures.

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

mod commands;
mod experiment;

#[derive(Parser)]
#[command(
    name = "ccml",
    version,
    about = "Collaborative two-network multi-label training under label noise"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a clean synthetic multi-label dataset.
    Generate(commands::GenerateArgs),
    /// Inject label noise into a dataset with clean labels.
    Corrupt(commands::CorruptArgs),
    /// Train a baseline or collaborative model.
    Train(commands::TrainArgs),
    /// Evaluate a finished run on a dataset.
    Eval(commands::EvalArgs),
    /// Compare baseline and collaborative training across noise rates.
    Experiment(experiment::ExperimentArgs),
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = err.print();
            std::process::exit(code);
        }
    };
    let result = match cli.command {
        Command::Generate(args) => commands::cmd_generate(args),
        Command::Corrupt(args) => commands::cmd_corrupt(args),
        Command::Train(args) => commands::cmd_train(args),
        Command::Eval(args) => commands::cmd_eval(args),
        Command::Experiment(args) => experiment::cmd_experiment(args),
    };
    if let Err(err) = result {
        eprintln!("error: {err}");
        std::process::exit(if err.is_input_error() { 1 } else { 2 });
    }
}
