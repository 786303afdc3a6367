//! The `layerfuse` command line.
//!
//! Exit codes: 0 on success, 2 for usage or configuration errors, 3 for
//! runtime failures such as I/O errors or diverged training.

mod commands;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

pub use commands::{group_thousands, run};

#[derive(Debug, Parser, Serialize)]
#[command(name = "layerfuse", version, about = "Multi-layer attentive probing on frozen ViT features")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
pub enum Command {
    /// Generate a synthetic feature store.
    Synth(SynthArgs),
    /// Train one probe with fixed hyperparameters.
    Train(TrainArgs),
    /// Search learning rate, weight decay and dropout on an 80/20 split.
    Gridsearch(GridArgs),
    /// Score a checkpoint on a split, optionally against a baseline.
    Eval(EvalArgs),
    /// Attention mass per token kind and layer for an attentive checkpoint.
    Heatmap(HeatmapArgs),
    /// RBF-kernel CKA of every layer against a reference layer.
    Cka(CkaArgs),
    /// Print the parameter count of a probe.
    Params(ParamsArgs),
    /// Retrain one configuration under several seeds.
    Seedstudy(SeedArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
pub enum Preset {
    Separable,
    Planted,
    MixedWidth,
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    /// Starting point for the generated store.
    #[arg(long, value_enum, default_value = "separable")]
    pub preset: Preset,
    /// JSON spec file; replaces the preset entirely.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Planted layer (1-based) for the planted preset.
    #[arg(long, default_value_t = 3)]
    pub layer: usize,
    /// Planted token kind for the planted preset (cls, ap or patch).
    #[arg(long, default_value = "ap")]
    pub kind: String,
    /// Number of layers.
    #[arg(long)]
    pub layers: Option<usize>,
    /// Comma-separated widths: one for all layers or one per layer.
    #[arg(long, value_delimiter = ',')]
    pub dims: Option<Vec<usize>>,
    /// Token kinds to generate, e.g. `cls+ap` or `cls+ap+patch`.
    #[arg(long)]
    pub tokens: Option<String>,
    /// Patch tokens per image.
    #[arg(long)]
    pub patches: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub n_train: Option<usize>,
    #[arg(long)]
    pub n_val: Option<usize>,
    #[arg(long)]
    pub n_test: Option<usize>,
    /// Length of the class-mean vectors before noise.
    #[arg(long)]
    pub signal: Option<f64>,
    /// Standard deviation of the per-coordinate Gaussian noise.
    #[arg(long)]
    pub noise: Option<f64>,
    /// Largest over smallest class size.
    #[arg(long)]
    pub imbalance: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output `.lfr` path.
    #[arg(long)]
    pub out: PathBuf,
}

/// Probe selection, named after the `[layers] ([tokens], [fusion])` taxonomy.
#[derive(Debug, Clone, Args, Serialize)]
pub struct ProbeArgs {
    /// linear-cls, linear, attentive-fusion, aat or hybrid.
    #[arg(long, default_value = "attentive-fusion")]
    pub probe: String,
    /// Layer subset: last, mid+last, quarterly, all, or a list like 3,6,9.
    #[arg(long, default_value = "all")]
    pub layers: String,
    /// Fused token kinds, e.g. cls, ap, cls+ap.
    #[arg(long, default_value = "cls+ap")]
    pub tokens: String,
    /// Attention heads: auto (one per fused row when it divides 2d) or a count.
    #[arg(long, default_value = "auto")]
    pub heads: String,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DataArgs {
    /// Input `.lfr` feature store.
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long, default_value = "train")]
    pub train_split: String,
    /// Validation split for per-epoch history; `val` when present.
    #[arg(long)]
    pub val_split: Option<String>,
    /// Split scored after training; `test` when present.
    #[arg(long)]
    pub test_split: Option<String>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct HyperArgs {
    /// Peak learning rate of the cosine schedule.
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// AdamW weight decay (ignored where the probe pins it).
    #[arg(long, default_value_t = 1e-4)]
    pub wd: f64,
    /// Attention dropout (ignored where the probe pins it).
    #[arg(long, default_value_t = 0.0)]
    pub dropout: f64,
    /// Requested batch size; capped at 2048 and at N/5.
    #[arg(long, default_value_t = 2048)]
    pub batch_size: usize,
    /// Requested epochs; raised to reach 40 epochs and 1000 updates.
    #[arg(long, default_value_t = 40)]
    pub epochs: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub probe: ProbeArgs,
    #[command(flatten)]
    pub hyper: HyperArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Report of a baseline run; its `test_bal_acc` is used for the gain.
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct GridArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub probe: ProbeArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Parallel training runs.
    #[arg(long, env = "LAYERFUSE_WORKERS")]
    pub workers: Option<usize>,
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    /// Probe checkpoint (`.lfpb`).
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Baseline report (`report.json` or `eval.json`).
    #[arg(long, conflicts_with = "baseline_acc")]
    pub baseline: Option<PathBuf>,
    /// Baseline balanced accuracy as a fraction.
    #[arg(long)]
    pub baseline_acc: Option<f64>,
    /// Directory for `eval.json`; stdout only when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct HeatmapArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct CkaArgs {
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long, default_value = "train")]
    pub split: String,
    /// Token kinds, comma-separated (cls, ap).
    #[arg(long, value_delimiter = ',', default_value = "cls")]
    pub kind: Vec<String>,
    /// Reference layer; the last layer by default.
    #[arg(long)]
    pub reference: Option<usize>,
    /// RBF bandwidth as a fraction of the median pairwise distance.
    #[arg(long, default_value_t = 0.2)]
    pub bandwidth: f64,
    /// Use `--bandwidth` as an absolute RBF width instead.
    #[arg(long)]
    pub absolute: bool,
    /// Seed of the row subsample (at most 2000 rows).
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ParamsArgs {
    /// linear-cls, linear, attentive-fusion, aat or hybrid.
    #[arg(long, default_value = "attentive-fusion")]
    pub probe: String,
    /// Feature width.
    #[arg(long)]
    pub d: usize,
    #[arg(long)]
    pub classes: usize,
    /// Fused layers (linear concatenation uses CLS and AP of each).
    #[arg(long, default_value_t = 1)]
    pub num_layers: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct SeedArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub probe: ProbeArgs,
    #[command(flatten)]
    pub hyper: HyperArgs,
    /// Comma-separated seeds (at least two).
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    pub seeds: Vec<u64>,
    #[arg(long, env = "LAYERFUSE_WORKERS")]
    pub workers: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}
