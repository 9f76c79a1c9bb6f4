use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use patchbank_core::bank::DEFAULT_CORESET_RATIO;
use patchbank_core::clustering::DEFAULT_MAX_ITERS;
use patchbank_core::scoring::{DEFAULT_HEATMAP_SIGMA, DEFAULT_K_RATIO};
use patchbank_core::{Border, BpmParams, Pooling};

pub const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), " (UFT1 v1, bank sidecar v1)");

#[derive(Debug, Parser)]
#[command(name = "patchbank", version = VERSION, about = "Memory-bank patch anomaly detection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset from a JSON spec.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a memory bank from the normal samples of a manifest.
    BuildBank(BuildBankArgs),
    /// Union several banks and subsample the result.
    MergeBanks {
        #[arg(long = "bank", required = true, num_args = 1..)]
        banks: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        coreset_ratio: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Score every sample of a manifest against a bank.
    Score(ScoreArgs),
    /// Cluster samples by pooled patch features.
    Cluster(ClusterArgs),
    /// Image and pixel AUROC of a scores file.
    Eval(EvalArgs),
    /// NMI, ARI and Hungarian F1 of a cluster assignment file.
    EvalCluster(EvalClusterArgs),
    /// Re-run scoring and evaluation over a list of parameter values; prints CSV.
    Sweep(SweepArgs),
}

/// Masking flags. Unset values fall back to the bank's settings when a bank
/// is given, otherwise to the defaults.
#[derive(Clone, Debug, Default, Args)]
pub struct MaskArgs {
    /// Attention smoothing kernel size (odd).
    #[arg(long)]
    pub kernel_size: Option<usize>,
    /// Mask threshold on the smoothed attention.
    #[arg(long)]
    pub lambda: Option<f32>,
    #[arg(long, value_parser = clap::value_parser!(Border))]
    pub border: Option<Border>,
    /// Weight features by smoothed attention instead of thresholding.
    #[arg(long)]
    pub soft_mask: bool,
}

impl MaskArgs {
    pub fn resolve(&self, base: BpmParams) -> BpmParams {
        BpmParams {
            kernel_size: self.kernel_size.unwrap_or(base.kernel_size),
            lambda: self.lambda.unwrap_or(base.lambda),
            border: self.border.unwrap_or(base.border),
            soft_mask: self.soft_mask || base.soft_mask,
        }
    }
}

#[derive(Debug, Args)]
pub struct BuildBankArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub mask: MaskArgs,
    #[arg(long, default_value_t = DEFAULT_CORESET_RATIO)]
    pub coreset_ratio: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// L2-normalize each layer's patch vectors before averaging.
    #[arg(long)]
    pub l2_normalize_layers: bool,
    /// Load and shape-check every tensor before starting.
    #[arg(long)]
    pub strict: bool,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub bank: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value_t = DEFAULT_K_RATIO)]
    pub k_ratio: f64,
    #[command(flatten)]
    pub mask: MaskArgs,
    /// Scores JSON destination; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Directory receiving one pixel heatmap per sample (`<id>.uft1`).
    #[arg(long)]
    pub heatmaps: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_HEATMAP_SIGMA)]
    pub heatmap_sigma: f64,
    #[arg(long)]
    pub strict: bool,
}

#[derive(Debug, Args)]
pub struct ClusterArgs {
    #[arg(long)]
    pub bank: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value_t = DEFAULT_K_RATIO)]
    pub k_ratio: f64,
    #[arg(long)]
    pub num_clusters: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "topk", value_parser = clap::value_parser!(Pooling))]
    pub pooling: Pooling,
    /// L2-normalize pooled vectors before k-means.
    #[arg(long)]
    pub normalize: bool,
    #[arg(long, default_value_t = DEFAULT_MAX_ITERS)]
    pub max_iters: usize,
    #[command(flatten)]
    pub mask: MaskArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub strict: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DetectionMetric {
    Auroc,
    PixelAuroc,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ClusterMetric {
    Nmi,
    Ari,
    F1,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub scores: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "auroc")]
    pub metrics: Vec<DetectionMetric>,
    /// Heatmap directory written by `score --heatmaps`; needed for pixel-auroc.
    #[arg(long)]
    pub heatmaps: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalClusterArgs {
    #[arg(long)]
    pub assignments: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "nmi,ari,f1")]
    pub metrics: Vec<ClusterMetric>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SweepParam {
    KRatio,
    Lambda,
    KernelSize,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long, value_enum)]
    pub param: SweepParam,
    /// Comma-separated values, e.g. `0.1,5,100`.
    #[arg(long, value_delimiter = ',', required = true)]
    pub values: Vec<f64>,
    /// Test manifest.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Training manifest; required unless sweeping k-ratio with --bank.
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// Existing bank reused for k-ratio sweeps; never modified.
    #[arg(long)]
    pub bank: Option<PathBuf>,
    /// Also report pixel AUROC.
    #[arg(long)]
    pub pixel: bool,
    #[arg(long, default_value_t = DEFAULT_K_RATIO)]
    pub k_ratio: f64,
    #[command(flatten)]
    pub mask: MaskArgs,
    #[arg(long, default_value_t = DEFAULT_CORESET_RATIO)]
    pub coreset_ratio: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub l2_normalize_layers: bool,
    #[arg(long, default_value_t = DEFAULT_HEATMAP_SIGMA)]
    pub heatmap_sigma: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}
