//! `radalign`: mine criteria, generate synthetic data, train, index, infer,
//! report, evaluate and export attention maps.
//!
//! Exit codes: 0 success, 2 missing input file, 3 schema violation,
//! 4 LLM failure after retries, 1 anything else including usage errors.
//! Failures print one JSON line on stderr.

use std::io::IsTerminal;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tracing_subscriber::EnvFilter;

mod commands;
mod config;
mod error;

#[derive(Debug, Parser)]
#[command(name = "radalign", version, about = "Concept-aligned chest X-ray classification and report prompting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Mine diagnostic criteria from a report corpus with an LLM.
    Mine(commands::MineArgs),
    /// Generate a synthetic planted-concept dataset.
    Gen(commands::GenArgs),
    /// Train the alignment model and write a checkpoint.
    Train(commands::TrainArgs),
    /// Build a report index from a dataset.
    Index(commands::IndexArgs),
    /// Print class scores and findings for images.
    Infer(commands::InferArgs),
    /// Generate reports with retrieval-augmented prompts.
    Report(commands::ReportArgs),
    /// Per-class and macro F1 / AUC on a labelled dataset.
    Eval(commands::EvalArgs),
    /// Export per-token attention heatmaps.
    Attn(commands::AttnArgs),
    /// Print the default run configuration.
    Defaults,
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_env("RADALIGN_LOG").unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .with_ansi(std::io::stderr().is_terminal())
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let e = error::CliError::Other(e.to_string().trim_end().to_string());
            eprintln!("{}", e.to_json_line());
            return ExitCode::from(e.exit_code());
        }
    };
    let result = match cli.command {
        Command::Mine(a) => commands::mine(a),
        Command::Gen(a) => commands::gen(a),
        Command::Train(a) => commands::train_cmd(a),
        Command::Index(a) => commands::index(a),
        Command::Infer(a) => commands::infer(a),
        Command::Report(a) => commands::report(a),
        Command::Eval(a) => commands::eval(a),
        Command::Attn(a) => commands::attn(a),
        Command::Defaults => commands::defaults(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json_line());
            ExitCode::from(e.exit_code())
        }
    }
}
