//! `skyalign` command-line tool. Exit codes: 0 success, 1 usage or
//! validation error, 2 numeric failure.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "skyalign", version, about = "Ground-to-satellite 3-DoF pose refinement")]
pub struct Cli {
    /// TOML file of config keys; unspecified keys keep their defaults.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Single worker thread and fixed summation order.
    #[arg(long, global = true)]
    pub deterministic: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render synthetic ground/satellite pairs with a manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Number of pairs (default: train_samples).
        #[arg(long)]
        n: Option<usize>,
        /// Pose and scene seed (default: config seed).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model; writes per-epoch checkpoints, `final/` and `loss.csv`.
    Train {
        /// Dataset directory from `synth` (default: render train_samples pairs).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Refine one pose; writes `trace.csv`, `prob.cvt` and a heatmap.
    Refine {
        /// Checkpoint directory (default: freshly initialized weights).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Ground image (PGM).
        #[arg(long)]
        ground: PathBuf,
        /// Satellite image (PGM), centered on the prior location.
        #[arg(long)]
        satellite: PathBuf,
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        prior_theta_deg: f64,
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        prior_tx_m: f64,
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        prior_tz_m: f64,
        #[arg(long)]
        out: PathBuf,
        /// Heatmap format.
        #[arg(long, default_value = "pgm", value_parser = ["pgm", "png"])]
        format: String,
    },
    /// Evaluate on a dataset; writes `errors.csv` and `summary.csv`.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Dataset directory from `synth` (default: render `n` fresh pairs).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 16)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Benchmark sweeps, training ablations and the raw-pixel search test.
    Bench {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Sweeps to run: noise, range, iterations or all.
        #[arg(long, value_delimiter = ',', default_value = "all")]
        sweep: Vec<String>,
        /// Also train and compare with each ablation switch on and off.
        #[arg(long)]
        ablations: bool,
        /// Run the raw-pixel search benchmark with this many trials.
        #[arg(long)]
        identity: Option<usize>,
        /// Samples per sweep setting.
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every custom backward pass.
    Gradcheck {
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
        seeds: Vec<u64>,
    },
    /// Render a CVT1 probability map (as written by `refine`) as an image.
    Heatmap {
        #[arg(long)]
        input: PathBuf,
        /// Output path; `.png` selects PNG, anything else PGM.
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match commands::run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { 2 } else { 1 })
        }
    }
}
