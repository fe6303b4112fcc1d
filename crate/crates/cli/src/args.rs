use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use disc_core::disc::Mode;
use disc_core::gnn::EncoderKind;

#[derive(Debug, Parser)]
#[command(
    name = "disc",
    version,
    about = "Debiased graph classification with learned edge masks"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the five dataset splits and a manifest.
    GenData(GenDataArgs),
    /// Train a two-branch or vanilla model into a run directory.
    Train(TrainArgs),
    /// Accuracy, mask AUC and probes for a checkpoint.
    Eval(EvalArgs),
    /// Per-edge causal/bias weights as JSON lines.
    ExportMasks(ExportArgs),
    /// Per-graph embeddings as JSON lines.
    ExportEmbeddings(ExportArgs),
    /// Drop the weakest edges of every split by the learned mask.
    Prune(PruneArgs),
    /// Train vanilla models on original and pruned copies of the data.
    Transfer(TransferArgs),
    /// Finite-difference and gradient-identity release checks.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Clone, Args)]
pub struct Shared {
    /// TOML or JSON file with `[data]` and `[train]` sections; flags win.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub shared: Shared,
    /// Training bias degree rho.
    #[arg(long)]
    pub bias: Option<f64>,
    #[arg(long)]
    pub val_bias: Option<f64>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub train: Option<usize>,
    #[arg(long)]
    pub val: Option<usize>,
    /// Size of each of the three test splits.
    #[arg(long)]
    pub test: Option<usize>,
    /// Nodes per graph.
    #[arg(long)]
    pub nodes: Option<usize>,
    #[arg(long)]
    pub knn: Option<usize>,
}

/// Training hyperparameters shared by `train` and `transfer`.
#[derive(Debug, Clone, Default, Args)]
pub struct Hyper {
    #[arg(long)]
    pub q: Option<f64>,
    #[arg(long)]
    pub lambda_g: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// First epoch (0-based) with the generation loss; defaults to half the epochs.
    #[arg(long)]
    pub t_gen: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub encoder: Option<EncoderKind>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub masker_hidden: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub shared: Shared,
    /// Dataset directory holding `manifest.json`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub mode: Option<Mode>,
    #[command(flatten)]
    pub hyper: Hyper,
    /// Continue the run in this directory from its checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Record per-epoch wall time (makes metrics non-reproducible).
    #[arg(long)]
    pub wall_clock: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub shared: Shared,
    /// Checkpoint file or run directory.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Restrict to these splits (repeatable); default is every split.
    #[arg(long)]
    pub split: Vec<String>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[command(flatten)]
    pub shared: Shared,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test_unbiased")]
    pub split: String,
}

#[derive(Debug, Args)]
pub struct PruneArgs {
    #[command(flatten)]
    pub shared: Shared,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub fraction: f64,
}

#[derive(Debug, Args)]
pub struct TransferArgs {
    #[command(flatten)]
    pub shared: Shared,
    /// Two-branch checkpoint whose masker prunes the data.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_delimiter = ',')]
    pub fractions: Option<Vec<f64>>,
    #[command(flatten)]
    pub hyper: Hyper,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub shared: Shared,
    /// Corrupt the backward rule of one op (negative control).
    #[arg(long, hide = true)]
    pub inject_fault: Option<String>,
}
