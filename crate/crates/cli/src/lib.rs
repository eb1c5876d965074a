//! Command-line front end: argument definitions, the config file, and the
//! subcommand implementations.

pub mod commands;
pub mod config;
pub mod plot;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use refnet::eval::ReferenceMode;
use refnet::train::Toggle;

/// Reference-conditioned segmentation with boundary critics.
#[derive(Debug, Parser)]
#[command(name = "refnet", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    GenData(GenData),
    /// Train a model.
    Train(Train),
    /// Evaluate a checkpoint on a dataset split.
    Eval(Eval),
    /// Segment one image given a reference image and mask.
    Predict(Predict),
    /// Train the full model and its ablated variants and compare them.
    Ablate(Ablate),
    /// Train on datasets with a growing number of target categories.
    CategorySweep(Sweep),
}

#[derive(Debug, Args)]
pub struct GenData {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Training overrides; each one wins over the config file.
#[derive(Debug, Clone, Args)]
pub struct TrainFlags {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub max_iterations: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Segmenter learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub critic_steps: Option<usize>,
    #[arg(long)]
    pub neg_ratio: Option<f64>,
    /// References kept per category.
    #[arg(long)]
    pub k: Option<usize>,
}

#[derive(Debug, Args)]
pub struct Train {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Component to switch off; repeatable.
    #[arg(long, value_parser = clap::value_parser!(Toggle))]
    pub ablate: Vec<Toggle>,
    #[command(flatten)]
    pub flags: TrainFlags,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    /// Continue from the latest checkpoint in --out.
    #[arg(long)]
    pub resume: bool,
    /// Write loss curves under --out/plots.
    #[arg(long)]
    pub plot: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SplitArg {
    Heldout,
    Target,
    Reference,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum RefModeArg {
    First,
    Averaged,
}

impl From<RefModeArg> for ReferenceMode {
    fn from(m: RefModeArg) -> Self {
        match m {
            RefModeArg::First => ReferenceMode::First,
            RefModeArg::Averaged => ReferenceMode::Averaged,
        }
    }
}

#[derive(Debug, Args)]
pub struct Eval {
    #[arg(long, required_unless_present = "oracle_stub")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub report: PathBuf,
    /// Checked against the checkpoint architecture when given.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "heldout")]
    pub split: SplitArg,
    #[arg(long, value_enum)]
    pub reference_mode: Option<RefModeArg>,
    /// Predict the ground truth instead of running a model (test hook).
    #[arg(long)]
    pub oracle_stub: bool,
    /// Write a per-category IoU chart next to the report.
    #[arg(long)]
    pub plot: bool,
}

#[derive(Debug, Args)]
pub struct Predict {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub reference_image: PathBuf,
    #[arg(long)]
    pub reference_mask: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the soft mask.
    #[arg(long)]
    pub soft: bool,
}

#[derive(Debug, Args)]
pub struct Ablate {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Variants besides the full model; defaults to every toggle.
    #[arg(long, value_delimiter = ',', value_parser = clap::value_parser!(Toggle))]
    pub variants: Vec<Toggle>,
    #[command(flatten)]
    pub flags: TrainFlags,
    #[arg(long)]
    pub plot: bool,
}

#[derive(Debug, Args)]
pub struct Sweep {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Target-category counts; defaults to 1 through all configured.
    #[arg(long, value_delimiter = ',')]
    pub counts: Vec<usize>,
    #[command(flatten)]
    pub flags: TrainFlags,
    #[arg(long)]
    pub plot: bool,
}

