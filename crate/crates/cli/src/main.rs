//! Command-line front end: evaluation runs, reports, adaptive-retrieval
//! sweeps and the training sandbox.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::Settings;
use error::CliError;

#[derive(Parser)]
#[command(
    name = "anchorconf",
    version,
    about = "Token-probability confidence, calibration and adaptive retrieval"
)]
struct Cli {
    /// Flat `key = value` config file.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Set any config key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    #[command(flatten)]
    run: RunFlags,

    #[command(subcommand)]
    command: Command,
}

/// Shortcuts for the most common config keys.
#[derive(Args, Default)]
struct RunFlags {
    #[arg(long, global = true)]
    base_url: Option<String>,
    #[arg(long, global = true)]
    model: Option<String>,
    #[arg(long, global = true, value_name = "FILE")]
    mock_script: Option<String>,
    #[arg(long, global = true, value_name = "FILE")]
    task: Option<String>,
    #[arg(long, global = true, value_name = "FILE")]
    dataset: Option<String>,
    /// normalized, raw or both.
    #[arg(long, global = true)]
    mode: Option<String>,
    #[arg(long, global = true)]
    bins: Option<String>,
    /// error, neutral or skip.
    #[arg(long, global = true)]
    missing_policy: Option<String>,
    #[arg(long, global = true)]
    concurrency: Option<String>,
    #[arg(long, global = true, value_name = "FILE")]
    cache: Option<String>,
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<String>,
    #[arg(long, global = true)]
    seed: Option<String>,
    /// Comma-separated thresholds.
    #[arg(long, global = true)]
    taus: Option<String>,
    /// static or http.
    #[arg(long, global = true)]
    retriever: Option<String>,
    #[arg(long, global = true)]
    retriever_url: Option<String>,
    /// Comma-separated data distribution for the sandbox.
    #[arg(long, global = true)]
    p_data: Option<String>,
}

impl RunFlags {
    fn into_pairs(self) -> Vec<(String, String)> {
        [
            ("base_url", self.base_url),
            ("model", self.model),
            ("mock_script", self.mock_script),
            ("task", self.task),
            ("dataset", self.dataset),
            ("mode", self.mode),
            ("bins", self.bins),
            ("missing_policy", self.missing_policy),
            ("concurrency", self.concurrency),
            ("cache", self.cache),
            ("out", self.out),
            ("seed", self.seed),
            ("taus", self.taus),
            ("retriever", self.retriever),
            ("retriever_url", self.retriever_url),
            ("p_data", self.p_data),
        ]
        .into_iter()
        .filter_map(|(k, v)| Some((k.to_string(), v?)))
        .collect()
    }
}

#[derive(Subcommand)]
enum Command {
    /// Score a dataset; writes records.jsonl, report.json and calibration.csv.
    Eval,
    /// Adaptive-retrieval threshold sweep; writes sweep.csv.
    Sweep,
    /// ECE and weighted accuracy from a CSV of bin aggregates.
    EceFromBins {
        /// CSV with count, mean_accuracy and mean_confidence columns.
        path: PathBuf,
        /// mean_accuracy is given in percent.
        #[arg(long)]
        percent: bool,
    },
    /// Train the toy policy three ways; writes trace.csv and summary.json.
    Sandbox,
    /// Re-render a report JSON as calibration-curve CSV.
    Report {
        report: PathBuf,
        /// Write here instead of stdout.
        #[arg(long = "csv", value_name = "FILE")]
        csv: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut overrides = cli.run.into_pairs();
    for kv in &cli.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        overrides.push((k.trim().to_string(), v.trim().to_string()));
    }
    let settings = Settings::load(cli.config.as_deref(), std::env::vars(), overrides)?;
    match cli.command {
        Command::Eval => commands::eval(&settings),
        Command::Sweep => commands::sweep(&settings),
        Command::EceFromBins { path, percent } => commands::ece_from_bins(&path, percent),
        Command::Sandbox => commands::sandbox(&settings),
        Command::Report { report, csv } => commands::report(&report, csv.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}
