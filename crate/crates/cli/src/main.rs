//! `posefree`: synthesize data, train, reconstruct, render and evaluate.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 solver failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Raised when some views could not be solved; partial outputs are on disk.
#[derive(Debug)]
pub struct SolverFailure(pub String);

impl std::fmt::Display for SolverFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for SolverFailure {}

#[derive(Parser, Debug)]
#[command(name = "posefree", version, about = "Pose-free sparse-view Gaussian reconstruction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic blob dataset.
    Synth(SynthArgs),
    /// Train the reconstruction model on a dataset.
    Train(TrainArgs),
    /// Predict Gaussians, focal length and poses from images.
    Reconstruct(ReconstructArgs),
    /// Render a PLY scene from a camera.
    Render(RenderArgs),
    /// Compare two camera files.
    EvalPose(EvalPoseArgs),
    /// Compare two directories of PNG images.
    EvalNvs(EvalNvsArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub scenes: Option<usize>,
    #[arg(long)]
    pub views: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub mode: Option<posefree::Mode>,
    #[arg(long)]
    pub resolution: Option<usize>,
    #[arg(long)]
    pub random_azimuths: bool,
    /// Write into an existing non-empty directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint manifest path; the payload goes next to it as `.bin`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// JSON-lines loss log; defaults to `<out>.log.jsonl`.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub patch: Option<usize>,
    #[arg(long)]
    pub lambda_a: Option<f64>,
    #[arg(long)]
    pub lambda_p: Option<f64>,
    #[arg(long)]
    pub t_max: Option<usize>,
}

#[derive(Args, Debug)]
pub struct ReconstructArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub mode: Option<posefree::Mode>,
    /// Foreground mask PNGs, one per image, in image order.
    #[arg(long, num_args = 1..)]
    pub masks: Vec<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// RANSAC inlier threshold in pixels.
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(required = true)]
    pub images: Vec<PathBuf>,
}

#[derive(Args, Debug)]
pub struct RenderArgs {
    #[arg(long)]
    pub ply: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Camera file; renders the pose selected by `--view`.
    #[arg(long, conflicts_with = "pose")]
    pub cameras: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub view: usize,
    /// Explicit camera-to-reference matrix, 16 row-major values.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true, requires_all = ["focal", "width", "height"])]
    pub pose: Option<Vec<f64>>,
    #[arg(long)]
    pub focal: Option<f64>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long, default_value = "object")]
    pub background: posefree::Mode,
    /// Also write the depth buffer as PFM.
    #[arg(long)]
    pub depth: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalPoseArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalNvsArgs {
    #[arg(long)]
    pub rendered: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use posefree::Error as E;
    if err.downcast_ref::<UsageError>().is_some() {
        return 1;
    }
    if err.downcast_ref::<SolverFailure>().is_some() {
        return 3;
    }
    match err.downcast_ref::<E>() {
        Some(E::InvalidArgument(_)) => 1,
        Some(E::Ransac(_) | E::Degenerate(_) | E::TooFewPoints { .. } | E::Diverged { .. }) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train(a),
        Command::Reconstruct(a) => commands::reconstruct(a),
        Command::Render(a) => commands::render(a),
        Command::EvalPose(a) => commands::eval_pose(a),
        Command::EvalNvs(a) => commands::eval_nvs(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
