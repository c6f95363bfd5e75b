//! Command-line surface for the spiking video-forensics pipeline.
//!
//! Six subcommands cover the full loop: `synth` writes labeled synthetic
//! datasets, `train` fits the network, `eval` scores a dataset, `analyze`
//! computes per-clip statistics, `gatemap` exports gate maps as graymaps,
//! and `energy` prints the op-count energy model. Every failure puts one
//! machine-readable JSON line on stderr; exit codes are 0 success,
//! 1 usage/config, 2 data/format, 3 numeric.

use std::path::PathBuf;
use std::process::exit;

use clap::{Args, Parser, Subcommand};
use spikegate::metrics::DEFAULT_TAU_ANOM;
use spikegate::synthgen::{DEFAULT_FRAMES, DEFAULT_SIZE};
use spikegate::SgError;

mod commands;

#[derive(Parser)]
#[command(
    name = "spikegate",
    version,
    about = "spiking temporal pathway for generated-video detection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a balanced synthetic dataset: clips, embeddings, manifest
    Synth(SynthArgs),
    /// Train on a dataset; writes a checkpoint plus an epoch CSV beside it
    Train(TrainArgs),
    /// Score a dataset with a checkpoint; prints a scores CSV and a summary
    Eval(EvalArgs),
    /// Print per-clip statistics as CSV with mean and std summary rows
    Analyze(AnalyzeArgs),
    /// Export per-frame gate maps as P5 graymaps plus a fire-fraction CSV
    Gatemap(GatemapArgs),
    /// Print the op-count energy report at the measured firing rate
    Energy(EnergyArgs),
}

#[derive(Args)]
pub struct SynthArgs {
    /// Output directory, created if missing
    #[arg(long)]
    pub out: PathBuf,
    /// Clips per class
    #[arg(long, default_value_t = 4)]
    pub clips: usize,
    /// Frames per clip
    #[arg(long, default_value_t = DEFAULT_FRAMES)]
    pub frames: usize,
    /// Square frame edge in pixels
    #[arg(long, default_value_t = DEFAULT_SIZE)]
    pub size: usize,
    /// Base content seed; sample i of both classes shares seed + i
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Dataset directory holding manifest.json
    #[arg(long)]
    pub data: PathBuf,
    /// Run config JSON; defaults apply when omitted
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override the configured epoch count
    #[arg(long)]
    pub epochs: Option<u32>,
    /// Override the configured seed
    #[arg(long)]
    pub seed: Option<u64>,
    /// Checkpoint output path; the epoch log lands beside it as .csv
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Dataset directory holding manifest.json
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint to score with
    #[arg(long)]
    pub ckpt: PathBuf,
}

#[derive(Args)]
pub struct AnalyzeArgs {
    /// Dataset directory holding manifest.json
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated list drawn from hoyer,fc,curvature,volume,anomaly
    #[arg(long, default_value = "hoyer,fc,curvature,volume,anomaly")]
    pub metrics: String,
    /// Decay constant of the raw anomaly trace
    #[arg(long, default_value_t = DEFAULT_TAU_ANOM)]
    pub tau_anom: f64,
}

#[derive(Args)]
pub struct GatemapArgs {
    /// Clip tensor file (CT01)
    #[arg(long)]
    pub clip: PathBuf,
    /// Checkpoint to run the clip through
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Output directory, created if missing
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct EnergyArgs {
    /// Checkpoint describing the architecture
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Dataset directory the firing rate is measured on
    #[arg(long)]
    pub data: PathBuf,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            if usage {
                error_line(1, "usage", "invalid command line");
                exit(1);
            }
            // --help and --version land here
            exit(0);
        }
    };
    let result = match cli.command {
        Command::Synth(args) => commands::synth(&args),
        Command::Train(args) => commands::train(&args),
        Command::Eval(args) => commands::eval(&args),
        Command::Analyze(args) => commands::analyze(&args),
        Command::Gatemap(args) => commands::gatemap(&args),
        Command::Energy(args) => commands::energy(&args),
    };
    if let Err(e) = result {
        let code = e.exit_code();
        error_line(code, kind(&e), &e.to_string());
        exit(code);
    }
}

fn kind(e: &SgError) -> &'static str {
    match e {
        SgError::NonFinite { .. } => "non_finite",
        SgError::Shape { .. } => "shape",
        SgError::Invalid { .. } => "invalid",
        SgError::Data { .. } => "data",
        SgError::Config { .. } => "config",
        SgError::Io(_) => "io",
        SgError::Json(_) => "json",
    }
}

fn error_line(code: i32, kind: &str, message: &str) {
    let line = serde_json::json!({ "code": code, "kind": kind, "message": message });
    eprintln!("{}", line);
}
