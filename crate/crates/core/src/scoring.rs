//! Top k-ratio image scoring and pixel heatmaps.
//!
//! The image score is the mean of the `K = ceil(k/100 * N)` largest patch
//! scores, where `N` counts every grid cell and masked-out cells score 0.

use std::cmp::Ordering;

use crate::aggregation::{aggregate_sample_layers, PatchFeatureMap};
use crate::bank::MemoryBank;
use crate::bpm::{mask_patches, AttentionMap, BpmParams};
use crate::error::{Error, Result};
use crate::search::nearest_distances;

pub const DEFAULT_K_RATIO: f64 = 5.0;
pub const DEFAULT_HEATMAP_SIGMA: f64 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoreParams {
    pub bpm: BpmParams,
    /// Percentage of patches averaged into the image score, in (0, 100].
    pub k_ratio: f64,
    pub l2_normalize_layers: bool,
}

impl Default for ScoreParams {
    fn default() -> Self {
        ScoreParams {
            bpm: BpmParams::default(),
            k_ratio: DEFAULT_K_RATIO,
            l2_normalize_layers: false,
        }
    }
}

/// Image score and the patches that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct TopK {
    pub score: f64,
    /// Grid indices of the selected patches, highest score first.
    pub indices: Vec<usize>,
}

pub fn validate_k_ratio(k_ratio: f64) -> Result<()> {
    if !(k_ratio > 0.0 && k_ratio <= 100.0) {
        return Err(Error::Param(format!("k ratio must lie in (0, 100], got {k_ratio}")));
    }
    Ok(())
}

/// `ceil(k/100 * n)`, clamped to `[1, n]`.
///
/// Products within 1e-9 of an integer are snapped first so that e.g.
/// `k = 5, n = 20` yields exactly 1 despite binary rounding.
pub fn topk_count(n: usize, k_ratio: f64) -> usize {
    let raw = k_ratio * n as f64 / 100.0;
    let snapped = if (raw - raw.round()).abs() < 1e-9 {
        raw.round()
    } else {
        raw.ceil()
    };
    (snapped as usize).clamp(1, n.max(1))
}

/// Descending by score, then ascending by index.
fn rank_order(scores: &[f32]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b))
}

/// Mean of the `K` largest scores. Selection is linear-time; only the top
/// `K` entries are sorted.
pub fn topk_score(scores: &[f32], k_ratio: f64) -> Result<TopK> {
    validate_k_ratio(k_ratio)?;
    if scores.is_empty() {
        return Err(Error::Empty("patch scores"));
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("patch scores"));
    }
    let k = topk_count(scores.len(), k_ratio);
    let order = rank_order(scores);
    let mut indices: Vec<usize> = (0..scores.len()).collect();
    if k < indices.len() {
        indices.select_nth_unstable_by(k - 1, &order);
        indices.truncate(k);
    }
    indices.sort_unstable_by(&order);
    let sum: f64 = indices.iter().map(|&i| f64::from(scores[i])).sum();
    Ok(TopK {
        score: sum / k as f64,
        indices,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreResult {
    pub image_score: f64,
    /// Nearest-bank distance per grid cell, 0 for masked cells.
    pub patch_scores: Vec<f32>,
    pub grid_h: usize,
    pub grid_w: usize,
    pub topk_indices: Vec<usize>,
    pub k_ratio: f64,
    pub fallback_used: bool,
}

/// Scores one image: aggregate layers, mask, match against the bank, scatter
/// distances onto the grid and take the top-k mean.
pub fn score_image(
    layers: &[PatchFeatureMap],
    attention: &AttentionMap,
    bank: &MemoryBank,
    params: &ScoreParams,
) -> Result<ScoreResult> {
    let feats = aggregate_sample_layers(layers, params.l2_normalize_layers)?;
    score_features(&feats, attention, bank, params)
}

/// [`score_image`] on an already aggregated feature map.
pub fn score_features(
    feats: &PatchFeatureMap,
    attention: &AttentionMap,
    bank: &MemoryBank,
    params: &ScoreParams,
) -> Result<ScoreResult> {
    validate_k_ratio(params.k_ratio)?;
    let kept = mask_patches(feats, attention, &params.bpm)?;
    let hits = nearest_distances(&kept, bank)?;
    let mut patch_scores = vec![0f32; feats.num_patches()];
    for (&cell, &d) in hits.grid_indices.iter().zip(&hits.distances) {
        patch_scores[cell] = d;
    }
    let top = topk_score(&patch_scores, params.k_ratio)?;
    Ok(ScoreResult {
        image_score: top.score,
        patch_scores,
        grid_h: feats.grid_h(),
        grid_w: feats.grid_w(),
        topk_indices: top.indices,
        k_ratio: params.k_ratio,
        fallback_used: kept.fallback(),
    })
}

/// Per-pixel anomaly scores at image resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelHeatmap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
}

impl PixelHeatmap {
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.width + col]
    }
}

/// Pixel coordinate that patch `i` of `cells` maps to along an axis of `pixels`.
pub fn patch_center(i: usize, cells: usize, pixels: usize) -> usize {
    let cell = pixels as f64 / cells as f64;
    ((i as f64 + 0.5) * cell).floor() as usize
}

/// For every pixel along one axis: left sample, right sample and weight.
fn axis_weights(cells: usize, pixels: usize) -> Vec<(usize, usize, f64)> {
    let centers: Vec<usize> = (0..cells).map(|i| patch_center(i, cells, pixels)).collect();
    let last = cells - 1;
    let mut seg = 0;
    (0..pixels)
        .map(|p| {
            if p <= centers[0] {
                return (0, 0, 0.0);
            }
            if p >= centers[last] {
                return (last, last, 0.0);
            }
            while centers[seg + 1] <= p {
                seg += 1;
            }
            let t = (p - centers[seg]) as f64 / (centers[seg + 1] - centers[seg]) as f64;
            (seg, seg + 1, t)
        })
        .collect()
}

/// Upsamples a patch score grid to image resolution and blurs it.
///
/// Bilinear interpolation places each patch score exactly on its center
/// pixel (edge values are held constant outside the outermost centers), then
/// a normalized Gaussian of standard deviation `sigma` pixels is applied with
/// replicated borders. `sigma = 0` skips the blur.
pub fn render_heatmap(
    patch_scores: &[f32],
    grid_h: usize,
    grid_w: usize,
    image_h: usize,
    image_w: usize,
    sigma: f64,
) -> Result<PixelHeatmap> {
    if grid_h == 0 || grid_w == 0 || patch_scores.len() != grid_h * grid_w {
        return Err(Error::Shape(format!(
            "{} patch scores for a {grid_h}x{grid_w} grid",
            patch_scores.len()
        )));
    }
    if image_h < grid_h || image_w < grid_w {
        return Err(Error::Shape(format!(
            "image {image_h}x{image_w} smaller than grid {grid_h}x{grid_w}"
        )));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Param(format!("heatmap sigma must be >= 0, got {sigma}")));
    }
    let cols = axis_weights(grid_w, image_w);
    let rows = axis_weights(grid_h, image_h);
    // Interpolate along x for every grid row, then along y.
    let mut wide = vec![0f64; grid_h * image_w];
    for r in 0..grid_h {
        let src = &patch_scores[r * grid_w..(r + 1) * grid_w];
        for (x, &(a, b, t)) in cols.iter().enumerate() {
            let (va, vb) = (f64::from(src[a]), f64::from(src[b]));
            wide[r * image_w + x] = va + t * (vb - va);
        }
    }
    let mut full = vec![0f64; image_h * image_w];
    for (y, &(a, b, t)) in rows.iter().enumerate() {
        for x in 0..image_w {
            let (va, vb) = (wide[a * image_w + x], wide[b * image_w + x]);
            full[y * image_w + x] = va + t * (vb - va);
        }
    }
    if sigma > 0.0 {
        full = gaussian_blur(&full, image_h, image_w, sigma);
    }
    Ok(PixelHeatmap {
        height: image_h,
        width: image_w,
        values: full.into_iter().map(|v| v as f32).collect(),
    })
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

fn gaussian_blur(src: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as isize;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, &wt)| wt * src[y * w + clamp(x as isize + k as isize - radius, w)])
                .sum();
        }
    }
    let mut out = vec![0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, &wt)| wt * tmp[clamp(y as isize + k as isize - radius, h) * w + x])
                .sum();
        }
    }
    out
}
