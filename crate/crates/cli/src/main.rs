//! `glims`: generate phantoms, train, evaluate, infer, count parameters and
//! check gradients.
//!
//! Exit codes: 0 success, 1 configuration or validation error, 2 numeric
//! failure (non-finite loss, failed gradient check), 3 I/O or file format
//! error.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use glims::config::Overrides;

#[derive(Parser, Debug)]
#[command(
    name = "glims",
    version,
    about = "Volumetric segmentation with a hybrid CNN/transformer"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run seed (dataset seed for `generate`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    #[arg(long, global = true)]
    pub patch_size: Option<usize>,
    /// Sliding-window overlap in [0, 1).
    #[arg(long, global = true)]
    pub overlap: Option<f64>,
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// Checkpoint directory (holding manifest.txt and tensors.bin).
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true)]
    pub device_threads: Option<usize>,
}

impl Common {
    pub fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            epochs: self.epochs,
            patch_size: self.patch_size,
            overlap: self.overlap,
            threads: self.device_threads,
        }
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic phantom dataset tree.
    Generate,
    /// Train on a dataset tree (or phantoms generated in memory).
    Train {
        /// Dataset directory written by `generate`.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continue from the checkpoint given with --checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Score a checkpoint, or saved predictions, against labelled volumes.
    Eval {
        #[arg(long)]
        data: PathBuf,
        /// Directory of predicted label volumes named like the cases.
        #[arg(long, conflicts_with = "checkpoint")]
        predictions: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Split::Val)]
        split: Split,
    },
    /// Write predicted label volumes.
    Infer {
        /// Dataset directory; every case is predicted.
        #[arg(long, required_unless_present = "input")]
        data: Option<PathBuf>,
        /// Single image volume.
        #[arg(long)]
        input: Vec<PathBuf>,
    },
    /// Print the parameter count and FLOP estimate of the configured model.
    Params {
        /// Report the reduced desk-scale model when no config is given.
        #[arg(long)]
        reduced: bool,
        #[arg(long)]
        json: bool,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        /// Only cases whose name contains this string.
        #[arg(long, default_value = "")]
        filter: String,
    },
}

#[derive(clap::ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    All,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
