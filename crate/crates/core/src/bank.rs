//! Normal patch memory bank: construction, greedy k-center coreset
//! subsampling, persistence and merging.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::aggregate_sample_layers;
use crate::bpm::{mask_patches, BpmParams};
use crate::error::{Error, Result};
use crate::tensor_io::{read_tensor, write_tensor, DatasetManifest, Tensor};
use crate::BANK_FORMAT_VERSION;

pub const DEFAULT_CORESET_RATIO: f64 = 0.01;
pub const VECTORS_FILE: &str = "vectors.uft1";
pub const META_FILE: &str = "meta.json";

/// Everything bank construction depends on besides the training data.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BankParams {
    pub bpm: BpmParams,
    pub coreset_ratio: f64,
    pub seed: u64,
    pub l2_normalize_layers: bool,
}

impl Default for BankParams {
    fn default() -> Self {
        BankParams {
            bpm: BpmParams::default(),
            coreset_ratio: DEFAULT_CORESET_RATIO,
            seed: 0,
            l2_normalize_layers: false,
        }
    }
}

impl BankParams {
    pub fn validate(&self) -> Result<()> {
        self.bpm.validate()?;
        validate_ratio(self.coreset_ratio)
    }
}

fn validate_ratio(ratio: f64) -> Result<()> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Param(format!("coreset ratio must lie in (0, 1], got {ratio}")));
    }
    Ok(())
}

/// Sidecar metadata stored next to the bank vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BankMeta {
    pub format_version: u32,
    pub dim: usize,
    pub count: usize,
    pub source_sample_ids: Vec<String>,
    pub coreset_ratio: f64,
    pub lambda: f32,
    pub kernel_size: usize,
    pub border: crate::bpm::Border,
    pub soft_mask: bool,
    pub l2_normalize_layers: bool,
    /// Number of feature layers averaged per image, in manifest order.
    pub layer_count: usize,
    pub creation_seed: u64,
    /// Vectors in the full bank before subsampling.
    pub full_size: usize,
}

impl BankMeta {
    pub fn bpm_params(&self) -> BpmParams {
        BpmParams {
            kernel_size: self.kernel_size,
            lambda: self.lambda,
            border: self.border,
            soft_mask: self.soft_mask,
        }
    }
}

/// Immutable set of retained normal patch vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank {
    dim: usize,
    vectors: Vec<f32>,
    meta: BankMeta,
}

impl MemoryBank {
    fn from_parts(dim: usize, vectors: Vec<f32>, mut meta: BankMeta) -> Result<Self> {
        if dim == 0 || vectors.is_empty() || vectors.len() % dim != 0 {
            return Err(Error::Bank(format!(
                "{} values do not form a nonempty bank of dim {dim}",
                vectors.len()
            )));
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("bank vectors"));
        }
        meta.dim = dim;
        meta.count = vectors.len() / dim;
        Ok(MemoryBank { dim, vectors, meta })
    }

    /// Bank over explicit vectors with default metadata, e.g. for externally
    /// built banks or benchmarks.
    pub fn from_vectors(dim: usize, vectors: Vec<f32>) -> Result<Self> {
        let count = if dim == 0 { 0 } else { vectors.len() / dim };
        let meta = BankMeta {
            format_version: BANK_FORMAT_VERSION,
            dim,
            count,
            source_sample_ids: Vec::new(),
            coreset_ratio: 1.0,
            lambda: BpmParams::default().lambda,
            kernel_size: BpmParams::default().kernel_size,
            border: Default::default(),
            soft_mask: false,
            l2_normalize_layers: false,
            layer_count: 1,
            creation_seed: 0,
            full_size: count,
        };
        Self::from_parts(dim, vectors, meta)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// Flat `len x dim` row-major vectors.
    pub fn vectors(&self) -> &[f32] {
        &self.vectors
    }

    pub fn vector(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn meta(&self) -> &BankMeta {
        &self.meta
    }
}

/// `ceil(ratio * total)` clamped to `[1, total]`; products within 1e-9 of an
/// integer are snapped first so binary rounding cannot add a row.
pub fn coreset_size(total: usize, ratio: f64) -> usize {
    let raw = ratio * total as f64;
    let snapped = if (raw - raw.round()).abs() < 1e-9 { raw.round() } else { raw.ceil() };
    (snapped as usize).clamp(1, total.max(1))
}

/// Seeded greedy farthest-first traversal over the rows of `points`.
///
/// The first center is drawn uniformly from the seed; every later one is the
/// point farthest (L2) from its nearest chosen center, ties to the lowest index.
/// Returns `m` distinct indices in selection order.
pub fn coreset_subsample(points: &[f32], dim: usize, m: usize, seed: u64) -> Result<Vec<usize>> {
    let total = row_count(points, dim)?;
    if total == 0 {
        return Err(Error::Empty("coreset points"));
    }
    let first = ChaCha8Rng::seed_from_u64(seed).random_range(0..total);
    coreset_subsample_from(points, dim, m, first)
}

/// [`coreset_subsample`] with an explicit first center.
pub fn coreset_subsample_from(points: &[f32], dim: usize, m: usize, first: usize) -> Result<Vec<usize>> {
    let total = row_count(points, dim)?;
    if m == 0 || m > total {
        return Err(Error::Param(format!("coreset size {m} outside [1, {total}]")));
    }
    if first >= total {
        return Err(Error::Param(format!("first center {first} outside [0, {total})")));
    }
    let mut selected = Vec::with_capacity(m);
    // Squared distance to the nearest chosen center; -inf marks chosen points.
    let mut min_dist = vec![f64::INFINITY; total];
    let mut next = first;
    for _ in 0..m {
        selected.push(next);
        min_dist[next] = f64::NEG_INFINITY;
        if selected.len() == m {
            break;
        }
        let center = &points[next * dim..(next + 1) * dim];
        next = update_and_find_farthest(points, dim, center, &mut min_dist);
    }
    Ok(selected)
}

const CORESET_CHUNK: usize = 4096;

fn update_and_find_farthest(points: &[f32], dim: usize, center: &[f32], min_dist: &mut [f64]) -> usize {
    min_dist
        .par_chunks_mut(CORESET_CHUNK)
        .zip(points.par_chunks(CORESET_CHUNK * dim))
        .enumerate()
        .map(|(chunk, (dists, rows))| {
            let mut best = (f64::NEG_INFINITY, usize::MAX);
            for (offset, (d, row)) in dists.iter_mut().zip(rows.chunks_exact(dim)).enumerate() {
                if *d == f64::NEG_INFINITY {
                    continue;
                }
                let cand = squared_l2(row, center);
                if cand < *d {
                    *d = cand;
                }
                if *d > best.0 {
                    best = (*d, chunk * CORESET_CHUNK + offset);
                }
            }
            best
        })
        .reduce(
            || (f64::NEG_INFINITY, usize::MAX),
            |a, b| {
                if b.0 > a.0 || (b.0 == a.0 && b.1 < a.1) {
                    b
                } else {
                    a
                }
            },
        )
        .1
}

pub(crate) fn squared_l2(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum()
}

fn row_count(points: &[f32], dim: usize) -> Result<usize> {
    if dim == 0 || points.len() % dim != 0 {
        return Err(Error::Shape(format!("{} values are not rows of dim {dim}", points.len())));
    }
    Ok(points.len() / dim)
}

fn gather_rows(points: &[f32], dim: usize, indices: &[usize]) -> Vec<f32> {
    let mut out = Vec::with_capacity(indices.len() * dim);
    for &i in indices {
        out.extend_from_slice(&points[i * dim..(i + 1) * dim]);
    }
    out
}

fn subsample_rows(points: Vec<f32>, dim: usize, ratio: f64, seed: u64) -> Result<Vec<f32>> {
    let total = points.len() / dim;
    let m = coreset_size(total, ratio);
    if m == total {
        return Ok(points);
    }
    let picked = coreset_subsample(&points, dim, m, seed)?;
    Ok(gather_rows(&points, dim, &picked))
}

/// Builds the bank from the normal samples of `manifest` (label absent or 0).
///
/// Each image is layer-averaged and masked; surviving patch vectors are
/// concatenated in manifest order and then coreset-subsampled.
pub fn build_bank(manifest: &DatasetManifest, params: &BankParams) -> Result<MemoryBank> {
    params.validate()?;
    let normals: Vec<_> = manifest.samples.iter().filter(|s| !s.is_anomalous()).collect();
    if normals.is_empty() {
        return Err(Error::Bank("manifest has no normal samples".into()));
    }
    let per_image: Vec<Vec<f32>> = normals
        .par_iter()
        .map(|s| {
            let layers = manifest.load_layers(s)?;
            let feats = aggregate_sample_layers(&layers, params.l2_normalize_layers)?;
            let attention = manifest.load_attention(s)?;
            let kept = mask_patches(&feats, &attention, &params.bpm)?;
            Ok(kept.vectors().to_vec())
        })
        .collect::<Result<_>>()?;
    let all: Vec<f32> = per_image.concat();
    let dim = manifest.feature_dim;
    if all.is_empty() {
        return Err(Error::Bank("no patches survived masking".into()));
    }
    let full_size = all.len() / dim;
    let vectors = subsample_rows(all, dim, params.coreset_ratio, params.seed)?;
    let layer_count = normals[0].feature_paths.len();
    let meta = BankMeta {
        format_version: BANK_FORMAT_VERSION,
        dim,
        count: 0,
        source_sample_ids: normals.iter().map(|s| s.id.clone()).collect(),
        coreset_ratio: params.coreset_ratio,
        lambda: params.bpm.lambda,
        kernel_size: params.bpm.kernel_size,
        border: params.bpm.border,
        soft_mask: params.bpm.soft_mask,
        l2_normalize_layers: params.l2_normalize_layers,
        layer_count,
        creation_seed: params.seed,
        full_size,
    };
    MemoryBank::from_parts(dim, vectors, meta)
}

/// Unions several banks and subsamples the result, e.g. for a multi-class bank.
pub fn merge_banks(banks: &[MemoryBank], coreset_ratio: f64, seed: u64) -> Result<MemoryBank> {
    validate_ratio(coreset_ratio)?;
    let first = banks.first().ok_or(Error::Empty("bank list"))?;
    if let Some(b) = banks.iter().find(|b| b.dim != first.dim) {
        return Err(Error::Shape(format!("bank dim {} does not match {}", b.dim, first.dim)));
    }
    let all: Vec<f32> = banks.iter().flat_map(|b| b.vectors.iter().copied()).collect();
    let full_size = all.len() / first.dim;
    let vectors = subsample_rows(all, first.dim, coreset_ratio, seed)?;
    let meta = BankMeta {
        source_sample_ids: banks
            .iter()
            .flat_map(|b| b.meta.source_sample_ids.iter().cloned())
            .collect(),
        coreset_ratio,
        creation_seed: seed,
        full_size,
        ..first.meta.clone()
    };
    MemoryBank::from_parts(first.dim, vectors, meta)
}

/// Writes `dir/vectors.uft1` and `dir/meta.json`, creating `dir` if needed.
pub fn save_bank(bank: &MemoryBank, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tensor = Tensor::new(vec![bank.len(), bank.dim], bank.vectors.clone())?;
    write_tensor(dir.join(VECTORS_FILE), &tensor)?;
    let meta_path = dir.join(META_FILE);
    let text = serde_json::to_string_pretty(&bank.meta).map_err(|e| Error::json(&meta_path, e))?;
    fs::write(&meta_path, text + "\n").map_err(|e| Error::io(&meta_path, e))
}

pub fn load_bank(dir: impl AsRef<Path>) -> Result<MemoryBank> {
    let dir = dir.as_ref();
    let meta_path = dir.join(META_FILE);
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: BankMeta = serde_json::from_str(&text).map_err(|e| Error::json(&meta_path, e))?;
    if meta.format_version != BANK_FORMAT_VERSION {
        return Err(Error::Bank(format!(
            "{}: format version {} (expected {BANK_FORMAT_VERSION})",
            meta_path.display(),
            meta.format_version
        )));
    }
    let tensor = read_tensor(dir.join(VECTORS_FILE))?;
    let &[count, dim] = tensor.dims() else {
        return Err(Error::Bank(format!("vectors tensor has shape {:?}", tensor.dims())));
    };
    if dim != meta.dim || count != meta.count {
        return Err(Error::Bank(format!(
            "{}: sidecar says {}x{}, vectors are {count}x{dim}",
            dir.display(),
            meta.count,
            meta.dim
        )));
    }
    MemoryBank::from_parts(dim, tensor.into_data(), meta)
}
