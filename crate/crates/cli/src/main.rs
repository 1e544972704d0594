//! `hmil` — synthetic-slide MIL pipeline driver.
//!
//! Exit codes: 0 success; 2 config error; 3 I/O error; 4 training aborted on
//! a non-finite value; 5 run id collision; 6 checkpoint/config mismatch.

use clap::{Parser, Subcommand};
use hmil_cli::commands;
use hmil_cli::errors::CliError;
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "hmil",
    version,
    about = "Synthetic whole-slide MIL: generate, train, evaluate, coverage",
    after_help = "Set HMIL_THREADS to run independent --seeds sweeps concurrently \
                  (default 1). All outputs are deterministic given the same inputs \
                  and seed."
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic slide dataset into --out.
    Generate {
        /// Flat key=value generator config (profile, n_slides, ...).
        #[arg(long)]
        config: PathBuf,
        /// Dataset output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Train one run per seed into content-addressed run directories.
    Train {
        /// Flat key=value model + training config.
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory produced by `generate`.
        #[arg(long)]
        data: PathBuf,
        /// Root for run directories (one subdirectory per config+seed).
        #[arg(long)]
        out: PathBuf,
        /// Single seed.
        #[arg(long, conflicts_with = "seeds")]
        seed: Option<u64>,
        /// Comma-separated seed sweep, e.g. --seeds 1,2,3; also writes a
        /// summary CSV with mean, sd, and best validation AUC.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Score a split with a trained checkpoint and write report.csv.
    Evaluate {
        /// Checkpoint file (checkpoint.hmil from a run directory).
        #[arg(long)]
        checkpoint: PathBuf,
        /// The training config the checkpoint was built with (model keys).
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Split to score: train, val, or test.
        #[arg(long, default_value = "test")]
        split: String,
        /// Output directory for report.csv (and heatmaps/).
        #[arg(long)]
        out: PathBuf,
        /// Also run the top-attention second pass (adds prob_top columns).
        #[arg(long)]
        top: bool,
        /// Write one attention heatmap (.pgm + .csv) per slide.
        #[arg(long)]
        heatmaps: bool,
    },
    /// Monte Carlo ROI-coverage diagnostic for sampling strategies.
    Coverage {
        /// Flat key=value coverage config (grid, ROI, strategies).
        #[arg(long)]
        config: PathBuf,
        /// Output directory for coverage.csv.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20000)]
        trials: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::Generate { config, out, seed } => commands::cmd_generate(&config, &out, seed),
        Cmd::Train {
            config,
            data,
            out,
            seed,
            seeds,
        } => {
            let seeds = match (seed, seeds) {
                (Some(s), None) => vec![s],
                (None, Some(list)) => list,
                (None, None) => vec![1],
                (Some(_), Some(_)) => unreachable!("clap conflicts_with"),
            };
            commands::cmd_train(&config, &data, &out, &seeds)
        }
        Cmd::Evaluate {
            checkpoint,
            config,
            data,
            split,
            out,
            top,
            heatmaps,
        } => commands::cmd_evaluate(&checkpoint, &config, &data, &split, &out, top, heatmaps),
        Cmd::Coverage {
            config,
            out,
            trials,
            seed,
        } => commands::cmd_coverage(&config, &out, trials, seed),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.code());
    }
}
