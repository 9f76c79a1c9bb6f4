//! Memory-bank visual anomaly detection over pre-extracted ViT patch features.
//!
//! The pipeline is split into small, independently testable stages:
//!
//! * [`tensor_io`]: the `UFT1` tensor container and the dataset manifest.
//! * [`aggregation`]: averaging per-layer patch embeddings into one map per image.
//! * [`bpm`]: back patch masking (attention smoothing, thresholding, masking).
//! * [`bank`]: memory bank construction with greedy k-center coreset subsampling.
//! * [`search`]: exact nearest-neighbour distances against the bank.
//! * [`scoring`]: top k-ratio image scores and pixel heatmaps.
//! * [`clustering`]: pooled top-k features and k-means for anomaly types.
//! * [`metrics`]: AUROC, NMI, ARI and Hungarian-matched F1.
//! * [`synth`]: seeded synthetic datasets with known ground truth.
//! * [`pipeline`]: manifest-level orchestration used by the CLI.

pub mod aggregation;
pub mod bank;
pub mod bpm;
pub mod clustering;
mod error;
pub mod metrics;
pub mod pipeline;
pub mod scoring;
pub mod search;
pub mod synth;
pub mod tensor_io;

pub use aggregation::{aggregate_layers, PatchFeatureMap};
pub use bank::{build_bank, coreset_subsample, load_bank, merge_banks, save_bank, BankMeta, BankParams, MemoryBank};
pub use bpm::{apply_mask, binarize, smooth_attention, AttentionMap, BinaryMask, Border, BpmParams, MaskedPatchSet};
pub use clustering::{kmeans, pool_all, pool_max, pool_topk_features, KMeansResult, Pooling};
pub use error::{Error, Result};
pub use metrics::{ari, auroc, hungarian_f1, nmi, pixel_auroc};
pub use scoring::{render_heatmap, score_image, topk_score, PixelHeatmap, ScoreParams, ScoreResult, TopK};
pub use search::{nearest_distances, DistanceVector};
pub use synth::{generate, SynthSpec};
pub use tensor_io::{load_manifest, read_tensor, write_tensor, DatasetManifest, Sample, Tensor};

/// Version tag of the on-disk tensor container.
pub const TENSOR_FORMAT: &str = "UFT1";
/// Version of the bank `meta.json` sidecar schema.
pub const BANK_FORMAT_VERSION: u32 = 1;
