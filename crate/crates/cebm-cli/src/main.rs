//! `cebm` — batch front end for training, sampling, and evaluating
//! conjugate energy-based models.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error,
//! 4 divergence, 5 metric failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;

use config::MetricKind;

#[derive(Parser)]
#[command(
    name = "cebm",
    version,
    about = "Train, sample, and evaluate conjugate energy-based models",
    after_help = "Exit codes: 0 success, 2 config error, 3 data error, 4 divergence, 5 metric failure.\n\
                  Set CEBM_OUT_ROOT to re-root the configured output directory."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run PCD training from a TOML config; writes diagnostics, checkpoints,
    /// and a fully-defaulted config echo to the output directory.
    Train {
        /// Path to the run configuration.
        #[arg(long)]
        config: PathBuf,
    },
    /// Draw SGLD samples from a checkpoint and export them as a PGM/PPM grid.
    Sample {
        /// Path to a trained checkpoint.
        #[arg(long)]
        ckpt: PathBuf,
        /// Langevin steps from uniform noise.
        #[arg(long, default_value_t = 500)]
        steps: usize,
        /// Number of samples in the grid.
        #[arg(long, default_value_t = 16)]
        count: usize,
        /// Output image path (.pgm for one channel, .ppm for three).
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute representation metrics for a checkpoint; one JSON document
    /// per metric, plus CSV confusion matrices.
    Eval {
        /// Path to a trained checkpoint.
        #[arg(long)]
        ckpt: PathBuf,
        /// Path to the run configuration (data and eval sections are used).
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated subset of knn,ood,fewlabel,collapse; defaults to
        /// the config's eval.metrics list.
        #[arg(long, value_delimiter = ',')]
        metrics: Vec<MetricKind>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train { config } => commands::cmd_train(config),
        Command::Sample {
            ckpt,
            steps,
            count,
            out,
        } => commands::cmd_sample(ckpt, *steps, *count, out),
        Command::Eval {
            ckpt,
            config,
            metrics,
        } => commands::cmd_eval(ckpt, config, metrics),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
