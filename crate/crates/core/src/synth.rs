//! Seeded synthetic datasets with known ground truth.
//!
//! Each patch vector is a class centroid (foreground or background) plus a
//! per-image offset plus per-patch Gaussian noise. Anomalous test images are
//! fresh normal draws whose anomaly cells are displaced along one of
//! `n_anomaly_types` orthonormal directions. Attention is high on a centered
//! foreground rectangle and low elsewhere. Every sample is written as
//! `n_layers` UFT1 layer files whose average is the drawn feature map.
//!
//! Noise magnitudes are vector norms: a patch's noise has expected squared
//! norm `noise_scale^2`, so `shift_magnitude / noise_scale` is a
//! signal-to-noise ratio independent of `dim`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bpm::{smooth_attention, AttentionMap, Border, DEFAULT_KERNEL_SIZE, DEFAULT_LAMBDA};
use crate::error::{Error, Result};
use crate::tensor_io::{write_tensor, DatasetManifest, Sample, Tensor};

pub const FOREGROUND_ATTENTION: f32 = 0.8;
pub const BACKGROUND_ATTENTION: f32 = 0.02;
const FOREGROUND_JITTER: f32 = 0.05;
const BACKGROUND_JITTER: f32 = 0.01;
const CENTROID_NORM: f64 = 5.0;

/// Where anomalous patches are placed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnomalyRegion {
    #[default]
    Foreground,
    /// Background cells that stay below the default threshold after
    /// default smoothing.
    Background,
}

fn default_patch_size() -> usize {
    16
}
fn default_layers() -> usize {
    8
}
fn default_noise() -> f64 {
    1.0
}
fn default_layer_noise() -> f64 {
    0.5
}
fn default_jitter() -> f64 {
    1.25
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub n_normal_train: usize,
    pub n_normal_test: usize,
    pub n_anomalous_test: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub dim: usize,
    pub n_anomaly_types: usize,
    pub anomaly_patch_fraction: f64,
    pub shift_magnitude: f64,
    pub background_fraction: f64,
    pub seed: u64,
    /// Pixels per patch side; image size is `grid * patch_size`.
    #[serde(default = "default_patch_size")]
    pub patch_size: usize,
    #[serde(default = "default_layers")]
    pub n_layers: usize,
    /// RMS norm of per-patch noise.
    #[serde(default = "default_noise")]
    pub noise_scale: f64,
    /// RMS norm of the zero-mean per-layer perturbation.
    #[serde(default = "default_layer_noise")]
    pub layer_noise: f64,
    /// RMS norm of a per-image offset shared by all its patches.
    #[serde(default = "default_jitter")]
    pub image_jitter: f64,
    #[serde(default)]
    pub anomaly_region: AnomalyRegion,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_normal_train: 50,
            n_normal_test: 20,
            n_anomalous_test: 20,
            grid_h: 14,
            grid_w: 14,
            dim: 32,
            n_anomaly_types: 3,
            anomaly_patch_fraction: 0.15,
            shift_magnitude: 10.0,
            background_fraction: 0.5,
            seed: 0,
            patch_size: default_patch_size(),
            n_layers: default_layers(),
            noise_scale: default_noise(),
            layer_noise: default_layer_noise(),
            image_jitter: default_jitter(),
            anomaly_region: AnomalyRegion::Foreground,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_normal_train", self.n_normal_train),
            ("grid_h", self.grid_h),
            ("grid_w", self.grid_w),
            ("dim", self.dim),
            ("n_anomaly_types", self.n_anomaly_types),
            ("patch_size", self.patch_size),
            ("n_layers", self.n_layers),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Param(format!("{name} must be >= 1")));
            }
        }
        if self.n_normal_test + self.n_anomalous_test == 0 {
            return Err(Error::Param("test set must contain at least one sample".into()));
        }
        if self.n_anomaly_types > self.dim {
            return Err(Error::Param(format!(
                "{} anomaly types need dim >= {0}, got {}",
                self.n_anomaly_types, self.dim
            )));
        }
        if !(self.anomaly_patch_fraction > 0.0 && self.anomaly_patch_fraction <= 1.0) {
            return Err(Error::Param(format!(
                "anomaly_patch_fraction must be in (0, 1], got {}",
                self.anomaly_patch_fraction
            )));
        }
        if !(self.background_fraction >= 0.0 && self.background_fraction < 1.0) {
            return Err(Error::Param(format!(
                "background_fraction must be in [0, 1), got {}",
                self.background_fraction
            )));
        }
        let magnitudes = [
            ("shift_magnitude", self.shift_magnitude),
            ("noise_scale", self.noise_scale),
            ("layer_noise", self.layer_noise),
            ("image_jitter", self.image_jitter),
        ];
        for (name, v) in magnitudes {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Param(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    fn num_patches(&self) -> usize {
        self.grid_h * self.grid_w
    }
}

/// Centered foreground rectangle covering about `1 - background_fraction`
/// of the grid.
pub fn foreground_cells(spec: &SynthSpec) -> Vec<bool> {
    let scale = (1.0 - spec.background_fraction).sqrt();
    let side = |n: usize| ((n as f64 * scale).round() as usize).clamp(1, n);
    let (fh, fw) = (side(spec.grid_h), side(spec.grid_w));
    let (top, left) = ((spec.grid_h - fh) / 2, (spec.grid_w - fw) / 2);
    (0..spec.num_patches())
        .map(|i| {
            let (r, c) = (i / spec.grid_w, i % spec.grid_w);
            (top..top + fh).contains(&r) && (left..left + fw).contains(&c)
        })
        .collect()
}

/// Cells eligible to carry anomalies.
///
/// Background cells qualify only when their smoothed attention stays under
/// the default threshold even with the attention jitter at its maximum.
pub fn anomaly_cells(spec: &SynthSpec) -> Result<Vec<usize>> {
    let fg = foreground_cells(spec);
    let cells: Vec<usize> = match spec.anomaly_region {
        AnomalyRegion::Foreground => (0..fg.len()).filter(|&i| fg[i]).collect(),
        AnomalyRegion::Background => {
            let worst: Vec<f32> = fg
                .iter()
                .map(|&f| {
                    if f {
                        FOREGROUND_ATTENTION + FOREGROUND_JITTER
                    } else {
                        BACKGROUND_ATTENTION + BACKGROUND_JITTER
                    }
                })
                .collect();
            let att = AttentionMap::new(spec.grid_h, spec.grid_w, worst)?;
            let kernel = DEFAULT_KERNEL_SIZE.min(2 * spec.grid_h.min(spec.grid_w) - 1);
            let smoothed = smooth_attention(&att, kernel, Border::Zero)?;
            (0..fg.len())
                .filter(|&i| !fg[i] && smoothed.values()[i] < DEFAULT_LAMBDA)
                .collect()
        }
    };
    if cells.is_empty() {
        return Err(Error::Param(format!(
            "no {:?} cells can hold anomalies for this grid and background_fraction",
            spec.anomaly_region
        )));
    }
    Ok(cells)
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize, norm: f64) -> Vec<f64> {
    let sigma = norm / (dim as f64).sqrt();
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal) * sigma).collect()
}

/// Orthonormal directions from Gram-Schmidt on seeded Gaussian vectors.
fn orthonormal_directions(rng: &mut ChaCha8Rng, count: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v = gaussian(rng, dim, 1.0);
        for b in &basis {
            let proj: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= proj * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    basis
}

struct World {
    fg: Vec<bool>,
    fg_centroid: Vec<f64>,
    bg_centroid: Vec<f64>,
    directions: Vec<Vec<f64>>,
    eligible: Vec<usize>,
}

struct Drawn {
    features: Vec<f64>,
    attention: Vec<f32>,
}

fn draw_normal(spec: &SynthSpec, world: &World, rng: &mut ChaCha8Rng) -> Drawn {
    let dim = spec.dim;
    let offset = gaussian(rng, dim, spec.image_jitter);
    let mut features = Vec::with_capacity(spec.num_patches() * dim);
    let mut attention = Vec::with_capacity(spec.num_patches());
    for &is_fg in &world.fg {
        let centroid = if is_fg { &world.fg_centroid } else { &world.bg_centroid };
        let noise = gaussian(rng, dim, spec.noise_scale);
        features.extend(centroid.iter().zip(&offset).zip(&noise).map(|((c, o), n)| c + o + n));
        let (base, spread) = if is_fg {
            (FOREGROUND_ATTENTION, FOREGROUND_JITTER)
        } else {
            (BACKGROUND_ATTENTION, BACKGROUND_JITTER)
        };
        attention.push(base + rng.random_range(-spread..=spread));
    }
    Drawn { features, attention }
}

/// The `count` eligible cells nearest to a random eligible seed cell.
fn anomaly_blob(spec: &SynthSpec, eligible: &[usize], rng: &mut ChaCha8Rng) -> Vec<usize> {
    let count = ((spec.anomaly_patch_fraction * eligible.len() as f64).round() as usize).clamp(1, eligible.len());
    let seed = eligible[rng.random_range(0..eligible.len())];
    let (sr, sc) = ((seed / spec.grid_w) as i64, (seed % spec.grid_w) as i64);
    let mut ranked: Vec<(i64, usize)> = eligible
        .iter()
        .map(|&i| {
            let (r, c) = ((i / spec.grid_w) as i64, (i % spec.grid_w) as i64);
            ((r - sr).pow(2) + (c - sc).pow(2), i)
        })
        .collect();
    ranked.sort_unstable();
    let mut cells: Vec<usize> = ranked[..count].iter().map(|&(_, i)| i).collect();
    cells.sort_unstable();
    cells
}

fn write_sample(
    spec: &SynthSpec,
    drawn: &Drawn,
    anomaly: Option<(&[usize], usize)>,
    id: String,
    label: u8,
    with_mask: bool,
    out_dir: &Path,
    rng: &mut ChaCha8Rng,
) -> Result<Sample> {
    let n = spec.num_patches();
    let dim = spec.dim;
    let rel = |suffix: &str| PathBuf::from("tensors").join(format!("{id}_{suffix}.uft1"));

    // Zero-sum layer perturbations keep the layer mean at the drawn map.
    let mut perturb: Vec<Vec<f64>> = (0..spec.n_layers)
        .map(|_| gaussian_map(rng, n, dim, spec.layer_noise))
        .collect();
    for j in 0..n * dim {
        let mean = perturb.iter().map(|p| p[j]).sum::<f64>() / spec.n_layers as f64;
        perturb.iter_mut().for_each(|p| p[j] -= mean);
    }
    let mut feature_paths = Vec::with_capacity(spec.n_layers);
    for (l, p) in perturb.iter().enumerate() {
        let data = drawn.features.iter().zip(p).map(|(f, e)| (f + e) as f32).collect();
        let path = rel(&format!("layer{l}"));
        write_tensor(out_dir.join(&path), &Tensor::new(vec![n, dim], data)?)?;
        feature_paths.push(path);
    }
    let attention_path = rel("attn");
    write_tensor(
        out_dir.join(&attention_path),
        &Tensor::new(vec![spec.grid_h, spec.grid_w], drawn.attention.clone())?,
    )?;

    let pixel_mask_path = if with_mask {
        let (h, w) = (spec.grid_h * spec.patch_size, spec.grid_w * spec.patch_size);
        let mut mask = vec![0f32; h * w];
        for &cell in anomaly.map_or(&[][..], |(cells, _)| cells) {
            let (r, c) = (cell / spec.grid_w, cell % spec.grid_w);
            for y in r * spec.patch_size..(r + 1) * spec.patch_size {
                mask[y * w + c * spec.patch_size..y * w + (c + 1) * spec.patch_size].fill(1.0);
            }
        }
        let path = rel("mask");
        write_tensor(out_dir.join(&path), &Tensor::new(vec![h, w], mask)?)?;
        Some(path)
    } else {
        None
    };

    Ok(Sample {
        id,
        feature_paths,
        attention_path,
        label: Some(label),
        pixel_mask_path,
        anomaly_type: anomaly.map(|(_, t)| format!("type_{t}")),
    })
}

fn gaussian_map(rng: &mut ChaCha8Rng, n: usize, dim: usize, norm: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * dim);
    for _ in 0..n {
        out.extend(gaussian(rng, dim, norm));
    }
    out
}

/// Writes `train.json`, `test.json` and their tensors under `out_dir`.
///
/// Returns the two manifest paths. The same spec always produces
/// byte-identical files.
pub fn generate(spec: &SynthSpec, out_dir: impl AsRef<Path>) -> Result<(PathBuf, PathBuf)> {
    spec.validate()?;
    let out_dir = out_dir.as_ref();
    let tensor_dir = out_dir.join("tensors");
    fs::create_dir_all(&tensor_dir).map_err(|e| Error::io(&tensor_dir, e))?;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let world = World {
        fg: foreground_cells(spec),
        fg_centroid: gaussian(&mut rng, spec.dim, CENTROID_NORM),
        bg_centroid: gaussian(&mut rng, spec.dim, CENTROID_NORM),
        directions: orthonormal_directions(&mut rng, spec.n_anomaly_types, spec.dim),
        eligible: if spec.n_anomalous_test > 0 { anomaly_cells(spec)? } else { Vec::new() },
    };
    let manifest = |samples| DatasetManifest {
        grid_h: spec.grid_h,
        grid_w: spec.grid_w,
        feature_dim: spec.dim,
        image_h: spec.grid_h * spec.patch_size,
        image_w: spec.grid_w * spec.patch_size,
        samples,
        base_dir: out_dir.to_path_buf(),
    };

    let mut train = Vec::with_capacity(spec.n_normal_train);
    for i in 0..spec.n_normal_train {
        let drawn = draw_normal(spec, &world, &mut rng);
        train.push(write_sample(spec, &drawn, None, format!("train_{i:04}"), 0, false, out_dir, &mut rng)?);
    }
    let mut test = Vec::with_capacity(spec.n_normal_test + spec.n_anomalous_test);
    for i in 0..spec.n_normal_test {
        let drawn = draw_normal(spec, &world, &mut rng);
        test.push(write_sample(spec, &drawn, None, format!("test_normal_{i:04}"), 0, true, out_dir, &mut rng)?);
    }
    for i in 0..spec.n_anomalous_test {
        let mut drawn = draw_normal(spec, &world, &mut rng);
        let kind = i % spec.n_anomaly_types;
        let cells = anomaly_blob(spec, &world.eligible, &mut rng);
        for &cell in &cells {
            let patch = &mut drawn.features[cell * spec.dim..(cell + 1) * spec.dim];
            patch
                .iter_mut()
                .zip(&world.directions[kind])
                .for_each(|(x, d)| *x += spec.shift_magnitude * d);
        }
        test.push(write_sample(
            spec,
            &drawn,
            Some((&cells, kind)),
            format!("test_anom_{i:04}"),
            1,
            true,
            out_dir,
            &mut rng,
        )?);
    }

    let train_path = out_dir.join("train.json");
    let test_path = out_dir.join("test.json");
    manifest(train).save(&train_path)?;
    manifest(test).save(&test_path)?;
    Ok((train_path, test_path))
}
