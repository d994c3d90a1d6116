//! `hdrfusion`: reproducible dual-camera HDR fusion experiments.
//!
//! Every subcommand is a pure function of (config, seed, input files).
//! Successful runs exit 0 and leave a `run.json` manifest in the output
//! directory; failures exit nonzero and print one JSON error object to
//! stderr.

mod commands;
mod config;
mod manifest;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use hdrfusion::capture::CaptureError;
use hdrfusion::io::IoError;
use hdrfusion::metrics::MetricsError;
use hdrfusion::model::train::TrainError;
use hdrfusion::model::ModelError;
use hdrfusion::radiometry::RadiometryError;
use hdrfusion::scene::SceneError;
use hdrfusion::tensor::checkpoint::CheckpointError;
use hdrfusion::tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Input(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Data(#[from] IoError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Capture(#[from] CaptureError),
    #[error(transparent)]
    Radiometry(#[from] RadiometryError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("gradient check failed for: {0}")]
    GradCheckFailed(String),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Input(_) => "input",
            CliError::Io(_) => "io",
            CliError::Json(_) => "json",
            CliError::Data(_) => "dataset",
            CliError::Scene(_) => "scene",
            CliError::Capture(_) => "capture",
            CliError::Radiometry(_) => "radiometry",
            CliError::Tensor(_) => "tensor",
            CliError::Model(_) => "model",
            CliError::Train(_) => "train",
            CliError::Metrics(_) => "metrics",
            CliError::Checkpoint(_) => "checkpoint",
            CliError::GradCheckFailed(_) => "gradcheck",
        }
    }
}

#[derive(Parser)]
#[command(
    name = "hdrfusion",
    version,
    about = "Dual-camera HDR video fusion: simulate, train, infer, evaluate, compare"
)]
struct Cli {
    /// Experiment config JSON; built-in defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; all randomness is derived from it by labeled hashing.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output directory for artifacts and the run manifest.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the scene and capture AE and DCS datasets of it.
    Simulate,
    /// Train the fusion network on a simulated DCS dataset.
    Train {
        /// Dataset directory produced by `simulate` (its dcs/ subdir).
        #[arg(long)]
        dataset: PathBuf,
        /// Previous train run directory to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Reconstruct one HDR frame per group of a dataset.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Score reconstructed frames against dataset ground truth.
    Evaluate {
        /// Infer run directory holding the reconstructed PFM frames.
        #[arg(long)]
        outputs: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Compare two sequences for temporal stability (AE vs DCS).
    Compare {
        /// AE side: a dataset directory or an infer run directory.
        #[arg(long)]
        ae: PathBuf,
        /// DCS side: a dataset directory or an infer run directory.
        #[arg(long)]
        dcs: PathBuf,
    },
    /// Verify analytic gradients against central differences.
    Gradcheck,
}

fn require_out(out: Option<PathBuf>) -> Result<PathBuf, CliError> {
    out.ok_or_else(|| CliError::Input("--out <dir> is required for this command".into()))
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = config::ExperimentConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Simulate => commands::simulate::run(&cfg, cli.seed, &require_out(cli.out)?),
        Command::Train { dataset, resume } => {
            commands::train::run(&cfg, cli.seed, &require_out(cli.out)?, &dataset, resume.as_deref())
        }
        Command::Infer { checkpoint, dataset } => {
            commands::infer::run(&cfg, cli.seed, &require_out(cli.out)?, &checkpoint, &dataset)
        }
        Command::Evaluate { outputs, dataset } => {
            commands::evaluate::run(&cfg, cli.seed, &require_out(cli.out)?, &outputs, &dataset)
        }
        Command::Compare { ae, dcs } => {
            commands::compare::run(&cfg, cli.seed, &require_out(cli.out)?, &ae, &dcs)
        }
        Command::Gradcheck => commands::gradcheck::run(&cfg, cli.seed, cli.out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let payload =
                serde_json::json!({ "error": { "kind": e.kind(), "message": e.to_string() } });
            eprintln!("{payload}");
            ExitCode::FAILURE
        }
    }
}
