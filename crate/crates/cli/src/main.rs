//! `dimerge`: merge, diagnose and inspect safetensors checkpoints.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "dimerge", version, about = "Training-free checkpoint merging")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Merge the multilingual residual into the anchor's backbone.
    Merge(RunArgs),
    /// Export per-layer, per-module residual statistics.
    Diagnose(RunArgs),
    /// List tensors, shapes and dtypes of a checkpoint.
    Inspect { path: PathBuf },
}

#[derive(Args)]
pub struct RunArgs {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config field, e.g. `--set merge.seed=3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    /// Worker threads; defaults to available parallelism.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Output checkpoint (merge) or CSV table (diagnose).
    #[arg(long)]
    pub output: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DIMERGE_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Merge(a) => commands::cmd_merge(a),
        Command::Diagnose(a) => commands::cmd_diagnose(a),
        Command::Inspect { path } => commands::cmd_inspect(path),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({"error": {"class": e.class(), "message": e.to_string()}});
            eprintln!("{line}");
            ExitCode::from(e.exit_code())
        }
    }
}
