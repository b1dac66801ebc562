use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "dlolab", version, about = "DLO Jacobian learning and shape control lab")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Collect random-motion data on the configured DLO list.
    Collect(CollectArgs),
    /// Train the RBFN Jacobian model offline.
    Train(TrainArgs),
    /// Velocity and n-step shape errors of a model on a dataset.
    EvalModel(EvalArgs),
    /// Run control episodes.
    Control(ControlArgs),
    /// Compare the analytic Jacobian with finite differences.
    Oracle(OracleArgs),
    /// Run the comparison battery and emit CSV and SVG.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct CollectArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Output JSONL dataset.
    #[arg(long)]
    pub out: PathBuf,
    /// Seconds of collection per DLO.
    #[arg(long)]
    pub duration: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Training dataset (JSONL).
    #[arg(long)]
    pub data: PathBuf,
    /// Output model file.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub no_augmentation: bool,
    #[arg(long)]
    pub no_scale_normalization: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Rollout length of the shape error.
    #[arg(long, default_value_t = 10)]
    pub steps: usize,
    /// Also evaluate on a randomly rotated and translated copy.
    #[arg(long)]
    pub transform: bool,
    /// Translation half-range of the transformed copy (m).
    #[arg(long, default_value_t = 0.3)]
    pub max_translation: f64,
}

#[derive(Debug, Args)]
pub struct ControlArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Offline model; not needed for `wls`.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Overrides the configured method list.
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long)]
    pub episodes: Option<usize>,
    /// `random`, `initial` or `stretched:<chord ratio>`.
    #[arg(long, default_value = "random")]
    pub desired: String,
    /// Overrides the configured output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, default_value_t = 100)]
    pub count: usize,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-5)]
    pub eps: f64,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}
