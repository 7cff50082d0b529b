//! `wsol`: train a small residual classifier on image-level labels,
//! pull class activation maps out of it, and score the derived boxes.
//! Each subcommand writes its artifacts plus the fully-resolved config
//! under `--out`, so any run can be replayed from its own directory.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "wsol", version, about = "Weakly-supervised object localization pipeline")]
struct Cli {
    /// JSON config merged over built-in defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Dotted-path override, repeatable: --set train.epochs=30
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,

    /// Directory receiving all artifacts of this run.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic shape dataset to train/ and test/ subdirectories.
    GenerateData,

    /// Train a classifier; writes checkpoint.ckpt and train_log.jsonl.
    Train {
        /// Path to a dataset manifest.csv.
        #[arg(long, value_name = "MANIFEST")]
        data: PathBuf,
    },

    /// Score a checkpoint on a dataset, or re-score saved per-sample results.
    Evaluate {
        #[arg(long, value_name = "CKPT")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_name = "MANIFEST")]
        data: Option<PathBuf>,
        /// Per-sample results JSON written by a previous run (or a hand
        /// fixture); replaces checkpoint + data.
        #[arg(long, value_name = "JSON", conflicts_with_all = ["checkpoint", "data"])]
        results: Option<PathBuf>,
    },

    /// Emit heatmap.ppm, overlay.ppm, and localize.json for one sample.
    Localize {
        #[arg(long, value_name = "CKPT")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "MANIFEST")]
        data: PathBuf,
        /// Sample index within the dataset.
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Use this class's activation map instead of the prediction's.
        #[arg(long, value_name = "CLASS")]
        class: Option<usize>,
    },

    /// Write a before/after strip image for every augmentation policy.
    AugmentPreview {
        #[arg(long, value_name = "MANIFEST")]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Augmented draws per policy.
        #[arg(long, default_value_t = 3)]
        draws: usize,
    },

    /// Run the policy x batch-size x depth experiment grid.
    Matrix {
        #[arg(long, value_name = "MANIFEST")]
        train_data: PathBuf,
        #[arg(long, value_name = "MANIFEST")]
        test_data: PathBuf,
    },

    /// Run the oracle and invariant battery; nonzero exit on any failure.
    Selftest,
}

/// Usage problems exit 1, runtime failures exit 2.
pub enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<wsol_core::Error> for Failure {
    fn from(e: wsol_core::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn install_thread_pool() -> Result<(), Failure> {
    let Ok(raw) = std::env::var("WSOL_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| {
            Failure::Usage(format!("WSOL_THREADS must be a positive integer, got `{raw}`"))
        })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Runtime(format!("thread pool setup failed: {e}")))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version are not failures.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let run = || -> Result<ExitCode, Failure> {
        install_thread_pool()?;
        let cfg = config::resolve(cli.config.as_deref(), &cli.sets).map_err(Failure::Usage)?;
        commands::dispatch(&cli.command, &cfg, &cli.out)
    };
    match run() {
        Ok(code) => code,
        Err(Failure::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
