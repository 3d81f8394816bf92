//! `skidiag` — run the transfer-diagnostics pipeline from config files
//! and emit checkpoints, CSV metrics, JSON reports, and SVG plots.
//!
//! Exit codes: 0 success, 1 run failure, 2 malformed config/arguments.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use skidiag::error::Error;

#[derive(Parser)]
#[command(name = "skidiag", version, about = "Layer-wise transfer diagnostics on a mini transformer encoder", disable_help_subcommand = true)]
pub struct Cli {
    /// Experiment config file (TOML); built-in desk defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Override the config's seed list with a single seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Directory for all produced artifacts.
    #[arg(long, global = true, default_value = "runs")]
    pub out_dir: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Train source-domain checkpoints for the configured regimes.
    Pretrain {
        /// Restrict to one regime: under | over | all.
        #[arg(long, default_value = "all")]
        regime: String,
    },
    /// Fine-tune pretrained checkpoints under the configured strategies.
    Finetune {
        #[arg(long, default_value = "all")]
        regime: String,
        /// Restrict to one strategy kind, or all.
        #[arg(long, default_value = "all")]
        strategy: String,
    },
    /// Locate the injection band from a dumped metrics CSV.
    Locate {
        /// Metrics CSV (step,layer,metric,value) with entropy and
        /// activation-gradient rows.
        #[arg(long)]
        metrics: PathBuf,
        /// Override the configured method: greedy | ski-maxima.
        #[arg(long)]
        method: Option<String>,
        /// Record file; defaults to <out-dir>/locate.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train layer-wise probes on a checkpoint and write the probe CSV.
    Probe {
        /// Checkpoint file produced by `pretrain` (or any saved model).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output CSV; defaults to <out-dir>/probes.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fold run reports into the summary table.
    Aggregate {
        /// Directory holding run-*.json reports; defaults to --out-dir.
        #[arg(long)]
        dir: Option<PathBuf>,
    },
    /// Render an SVG plot from run reports or a summary.
    Plot {
        /// entropy-by-layer | actgrad-by-layer | paramgrad-by-layer |
        /// deltacka-by-layer | probe-accuracy-by-layer | accuracy-vs-params
        #[arg(long)]
        kind: String,
        /// Input artifacts (run reports, or summary.json for scatter).
        #[arg(long, required = true)]
        input: Vec<PathBuf>,
        /// Output SVG path.
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Format(_) | Error::InvalidInput(_) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let record = serde_json::json!({
                "error": match e {
                    Error::Format(_) => "malformed-config",
                    Error::InvalidInput(_) => "invalid-input",
                    Error::RunFailure(_) => "run-failure",
                    _ => "error",
                },
                "message": e.to_string(),
            });
            eprintln!("{record}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
