//! `m2mil`: dataset generation, cross-validated training, evaluation,
//! gradient checks, hyper-parameter sweeps and report summaries.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use m2mil::trainer::{TaskMode, TrainConfig};

/// Process exit codes besides 0 (success) and 2 (usage, set by clap).
pub mod exit {
    pub const FAILURE: u8 = 1;
    pub const USAGE: u8 = 2;
    pub const MISSING_DATASET: u8 = 3;
    pub const MISSING_CHECKPOINT: u8 = 4;
}

/// An error carrying the exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub error: anyhow::Error,
}

impl<E: Into<anyhow::Error>> From<E> for CliError {
    fn from(e: E) -> Self {
        Self {
            code: exit::FAILURE,
            error: e.into(),
        }
    }
}

pub fn fail(code: u8, msg: impl Into<String>) -> CliError {
    CliError {
        code,
        error: anyhow::anyhow!(msg.into()),
    }
}

pub type CliResult<T = ()> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(
    name = "m2mil",
    version,
    about = "Multi-task lobe segmentation and severity MIL on synthetic phantoms"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic phantom dataset.
    Gen(GenArgs),
    /// Train one model per cross-validation fold.
    Train(TrainArgs),
    /// Evaluate the fold checkpoints of a training run on their test splits.
    Eval(EvalArgs),
    /// Finite-difference check of every differentiable component.
    Gradcheck(GradcheckArgs),
    /// Train and evaluate every cell of a lambda x learning-rate grid.
    Sweep(SweepArgs),
    /// Summarize one or more evaluation reports.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
pub struct GenArgs {
    /// Dataset root.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 120, value_parser = clap::value_parser!(u64).range(1..))]
    pub cases: u64,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Infected-fraction threshold separating severe from non-severe.
    #[arg(long, default_value_t = 0.15)]
    pub tau: f64,
    /// Fraction of cases shipped with a lobe mask.
    #[arg(long, default_value_t = 0.25)]
    pub mask_fraction: f64,
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u64).range(1..))]
    pub scans_per_patient: u64,
    /// Inclusive range of in-plane extents, voxels; the paper profile needs at least 128.
    #[arg(long, default_value_t = 88)]
    pub min_axial: usize,
    #[arg(long, default_value_t = 104)]
    pub max_axial: usize,
    /// Replace an existing non-empty root.
    #[arg(long)]
    pub force: bool,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    /// Full-width network, 200-patch bags of 128 px, 100 epochs.
    Paper,
    /// Narrow network, 32-patch bags of 32 px, 20 epochs.
    Desk,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    MultiTask,
    SegOnly,
    ClsOnly,
}

impl From<Mode> for TaskMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::MultiTask => TaskMode::MultiTask,
            Mode::SegOnly => TaskMode::SegOnly,
            Mode::ClsOnly => TaskMode::ClsOnly,
        }
    }
}

/// Training hyper-parameters; unset flags keep the profile's values.
#[derive(Args, Debug, Clone)]
pub struct HyperArgs {
    #[arg(long, value_enum, default_value_t = Profile::Paper)]
    pub profile: Profile,
    #[arg(long, value_enum, default_value_t = Mode::MultiTask)]
    pub mode: Mode,
    /// Seeds model init, fold assignment and bag sampling.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Weight of the classification loss against the segmentation loss.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Initial learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub bag_size: Option<usize>,
    #[arg(long)]
    pub patch_size: Option<usize>,
    /// Random bags averaged per case at evaluation.
    #[arg(long)]
    pub eval_draws: Option<usize>,
    /// Folds to run (default: all).
    #[arg(long, value_delimiter = ',')]
    pub folds: Vec<usize>,
}

impl HyperArgs {
    pub fn train_config(&self) -> TrainConfig {
        let mut cfg = match self.profile {
            Profile::Paper => TrainConfig::paper(),
            Profile::Desk => TrainConfig::desk(),
        };
        cfg.mode = self.mode.into();
        cfg.optim.seed = self.seed;
        if let Some(v) = self.epochs {
            cfg.optim.epochs = v;
        }
        if let Some(v) = self.lambda {
            cfg.loss.lambda = v;
        }
        if let Some(v) = self.lr {
            cfg.optim.lr0 = v;
        }
        if let Some(v) = self.bag_size {
            cfg.bag_size = v;
        }
        if let Some(v) = self.patch_size {
            cfg.patch_size = v;
        }
        if let Some(v) = self.eval_draws {
            cfg.eval_draws = v;
        }
        cfg
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset root.
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory for checkpoints, logs and the config snapshot.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub hyper: HyperArgs,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Training run directory.
    #[arg(long)]
    pub run: PathBuf,
    /// Dataset root (default: the one the run was trained on).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Report directory (default: `<run>/eval`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub eval_draws: Option<usize>,
    /// Seed of the evaluation bag draws.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Score segmentation on the sampled patches instead of tiled volumes.
    #[arg(long)]
    pub patch_level: bool,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Random points per check.
    #[arg(long, default_value_t = 20, value_parser = clap::value_parser!(u64).range(1..))]
    pub points: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Maximum relative error.
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    /// Optional directory for a JSON copy of the table.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0.01")]
    pub lambda_grid: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0.01")]
    pub lr_grid: Vec<f64>,
    #[command(flatten)]
    pub hyper: HyperArgs,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Evaluation directories, or run directories holding `eval/`.
    #[arg(required = true)]
    pub dirs: Vec<PathBuf>,
    /// Optional path of a CSV comparing the reports.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => commands::gen(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a),
        Command::Sweep(a) => commands::sweep(&a),
        Command::Report(a) => commands::report(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e.error);
            ExitCode::from(e.code)
        }
    }
}
