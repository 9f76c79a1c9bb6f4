//! Manifest-level drivers tying the stages together.

use rayon::prelude::*;

use crate::aggregation::{aggregate_sample_layers, PatchFeatureMap};
use crate::bank::MemoryBank;
use crate::clustering::{kmeans, l2_normalize, pool_all, pool_max, pool_topk_features, KMeansResult, Pooling};
use crate::error::{Error, Result};
use crate::metrics::{auroc, pixel_auroc};
use crate::scoring::{render_heatmap, score_image, PixelHeatmap, ScoreParams, ScoreResult};
use crate::tensor_io::DatasetManifest;

/// Scores every sample; output order follows the manifest.
pub fn score_manifest(manifest: &DatasetManifest, bank: &MemoryBank, params: &ScoreParams) -> Result<Vec<ScoreResult>> {
    if manifest.feature_dim != bank.dim() {
        return Err(Error::Shape(format!(
            "manifest feature_dim {} but bank dim {}",
            manifest.feature_dim,
            bank.dim()
        )));
    }
    manifest
        .samples
        .par_iter()
        .map(|sample| {
            let layers = manifest.load_layers(sample)?;
            let attention = manifest.load_attention(sample)?;
            score_image(&layers, &attention, bank, params)
        })
        .collect()
}

/// Ground-truth anomaly flags; every sample must carry a label.
pub fn labels(manifest: &DatasetManifest) -> Result<Vec<bool>> {
    manifest
        .samples
        .iter()
        .map(|s| match s.label {
            Some(l) => Ok(l == 1),
            None => Err(Error::Manifest(format!("sample {} has no label", s.id))),
        })
        .collect()
}

pub fn image_auroc(manifest: &DatasetManifest, results: &[ScoreResult]) -> Result<f64> {
    check_len(manifest, results.len())?;
    let scores: Vec<f64> = results.iter().map(|r| r.image_score).collect();
    auroc(&scores, &labels(manifest)?)
}

fn check_len(manifest: &DatasetManifest, n: usize) -> Result<()> {
    if manifest.samples.len() != n {
        return Err(Error::Shape(format!(
            "{} results for {} samples",
            n,
            manifest.samples.len()
        )));
    }
    Ok(())
}

pub fn heatmaps(manifest: &DatasetManifest, results: &[ScoreResult], sigma: f64) -> Result<Vec<PixelHeatmap>> {
    check_len(manifest, results.len())?;
    results
        .par_iter()
        .map(|r| render_heatmap(&r.patch_scores, r.grid_h, r.grid_w, manifest.image_h, manifest.image_w, sigma))
        .collect()
}

/// Pixel AUROC over the whole manifest; every sample needs a pixel mask.
pub fn manifest_pixel_auroc(manifest: &DatasetManifest, maps: &[PixelHeatmap]) -> Result<f64> {
    check_len(manifest, maps.len())?;
    let masks = manifest
        .samples
        .iter()
        .map(|s| {
            if s.pixel_mask_path.is_none() {
                return Err(Error::Manifest(format!("sample {} has no pixel mask", s.id)));
            }
            manifest.load_pixel_mask(s)
        })
        .collect::<Result<Vec<_>>>()?;
    let pairs: Vec<_> = maps.iter().zip(&masks).map(|(h, m)| (h, m.as_slice())).collect();
    pixel_auroc(&pairs)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClusterParams {
    pub pooling: Pooling,
    pub num_clusters: usize,
    pub seed: u64,
    /// L2-normalize pooled vectors before k-means.
    pub normalize: bool,
    pub l2_normalize_layers: bool,
    pub max_iters: usize,
}

fn aggregated(manifest: &DatasetManifest, index: usize, l2: bool) -> Result<PatchFeatureMap> {
    aggregate_sample_layers(&manifest.load_layers(&manifest.samples[index])?, l2)
}

/// One pooled vector per sample, in manifest order.
pub fn pooled_features(
    manifest: &DatasetManifest,
    results: &[ScoreResult],
    pooling: Pooling,
    l2_normalize_layers: bool,
) -> Result<Vec<Vec<f64>>> {
    check_len(manifest, results.len())?;
    (0..results.len())
        .into_par_iter()
        .map(|i| {
            let feats = aggregated(manifest, i, l2_normalize_layers)?;
            match pooling {
                Pooling::TopK => pool_topk_features(&feats, &results[i].topk_indices),
                Pooling::All => Ok(pool_all(&feats)),
                Pooling::Max => pool_max(&feats, &results[i].patch_scores),
            }
        })
        .collect()
}

pub fn cluster_samples(
    manifest: &DatasetManifest,
    results: &[ScoreResult],
    params: &ClusterParams,
) -> Result<KMeansResult> {
    let mut points = pooled_features(manifest, results, params.pooling, params.l2_normalize_layers)?;
    if params.normalize {
        points.iter_mut().for_each(|p| l2_normalize(p));
    }
    kmeans(&points, params.num_clusters, params.seed, params.max_iters)
}
