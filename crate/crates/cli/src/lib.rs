//! The `deepcox` command-line pipeline: generate, train, evaluate, compare,
//! explain and plot. Every command writes into a fresh output directory
//! with a `manifest.json` recording inputs, seed, configuration and output
//! digests.

pub mod commands;
pub mod config;
pub mod output;
pub mod plot;
pub mod report;
pub mod strata;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "deepcox", version, about = "Deep Cox survival modelling over coded clinical histories")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Draw a synthetic cohort with known risk.
    Generate(commands::GenerateArgs),
    /// Train a network ensemble on a cohort.
    Train(commands::TrainArgs),
    /// Score a trained model on a cohort.
    Evaluate(commands::EvaluateArgs),
    /// 5x2 cross-validated comparison against a Cox model.
    Compare(commands::CompareArgs),
    /// Local hazard ratios across retrained models.
    Explain(commands::ExplainArgs),
    /// SVG charts from an `evaluate` output directory.
    Plot(plot::PlotArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Generate(_) => "generate",
            Command::Train(_) => "train",
            Command::Evaluate(_) => "evaluate",
            Command::Compare(_) => "compare",
            Command::Explain(_) => "explain",
            Command::Plot(_) => "plot",
        }
    }
}

/// Runs one command, returning its output directory.
pub fn run(command: &Command) -> anyhow::Result<PathBuf> {
    match command {
        Command::Generate(a) => commands::cmd_generate(a),
        Command::Train(a) => commands::cmd_train(a),
        Command::Evaluate(a) => commands::cmd_evaluate(a),
        Command::Compare(a) => commands::cmd_compare(a),
        Command::Explain(a) => commands::cmd_explain(a),
        Command::Plot(a) => plot::cmd_plot(a),
    }
}

/// One-line JSON error report.
pub fn error_line(command: &str, err: &anyhow::Error) -> String {
    let message = format!("{err:#}").replace('\n', " ");
    serde_json::json!({ "status": "error", "command": command, "error": message }).to_string()
}

/// Parses `args` (program name first) and runs. Usage errors exit with 2,
/// command failures with 1.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(&cli.command) {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", error_line(cli.command.name(), &e));
            ExitCode::from(1)
        }
    }
}
