//! `mvmm`: phantom generation, joint segmentation, evaluation and ablation.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// Exit status for inputs that fail validation (bad config, paths, formats).
pub const EXIT_VALIDATION: u8 = 1;
/// Exit status for numerical failures inside a run.
pub const EXIT_NUMERICAL: u8 = 2;
/// Exit status when some ablation presets or evaluation rows failed.
pub const EXIT_PARTIAL: u8 = 3;

#[derive(Parser)]
#[command(name = "mvmm", version, about = "Joint multi-sequence segmentation with a multivariate mixture model")]
struct Cli {
    /// Worker threads for voxel loops. Results are bit-identical for any count.
    #[arg(long, global = true, env = "MVMM_WORKERS")]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom (images, truth, atlas, ready-to-run config).
    Phantom {
        /// Phantom spec (TOML).
        spec: PathBuf,
        /// Output directory.
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Print a phantom spec to start from.
    Spec {
        /// The 32-voxel isotropic phantom instead of the full-size one.
        #[arg(long)]
        small: bool,
        /// Seed for every random draw of the phantom.
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Segment the images named in a run config.
    Segment {
        /// Run config (TOML).
        config: PathBuf,
    },
    /// Score segmentations against reference labels (Dice and average contour distance).
    Evaluate {
        /// Segmentation volumes (.vhdr), one per case.
        #[arg(long, num_args = 1.., required = true)]
        seg: Vec<PathBuf>,
        /// Reference volumes (.vhdr), paired with --seg in order.
        #[arg(long, num_args = 1.., required = true)]
        truth: Vec<PathBuf>,
        /// Label ids to score.
        #[arg(long, num_args = 1.., required = true)]
        labels: Vec<u16>,
        /// Also write the table to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the four registration presets on one config and tabulate the scores.
    Ablate {
        /// Run config (TOML) with a `truth` entry.
        config: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.workers {
        if n == 0 {
            eprintln!("error: --workers must be at least 1");
            return ExitCode::from(EXIT_VALIDATION);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_VALIDATION);
        }
    }
    let outcome = match cli.command {
        Command::Phantom { spec, out } => commands::phantom(&spec, &out),
        Command::Spec { small, seed } => commands::print_spec(small, seed),
        Command::Segment { config } => commands::segment(&config),
        Command::Evaluate {
            seg,
            truth,
            labels,
            out,
        } => commands::evaluate(&seg, &truth, &labels, out.as_deref()),
        Command::Ablate { config } => commands::ablate(&config),
    };
    match outcome {
        Ok(commands::Status::Complete) => ExitCode::SUCCESS,
        Ok(commands::Status::Partial) => ExitCode::from(EXIT_PARTIAL),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { EXIT_NUMERICAL } else { EXIT_VALIDATION })
        }
    }
}
