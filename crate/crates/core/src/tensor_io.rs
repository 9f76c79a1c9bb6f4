//! `UFT1` tensor container and the JSON dataset manifest.
//!
//! Layout of a `UFT1` file, all integers little-endian:
//!
//! ```text
//! offset 0   magic  "UFT1" (55 46 54 31)
//! offset 4   u8     dtype code (1 = binary32)
//! offset 5   u8     ndim, 1..=4
//! offset 6   u8 x2  zero padding
//! offset 8   u64 x ndim   dims
//! ...        row-major element payload
//! ```

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::aggregation::PatchFeatureMap;
use crate::bpm::AttentionMap;
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"UFT1";
pub const DTYPE_F32: u8 = 1;
pub const MAX_NDIM: usize = 4;
const HEADER_LEN: usize = 8;

/// Dense row-major binary32 tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        validate_dims(&dims)?;
        let expected = dims.iter().product::<usize>();
        if expected != data.len() {
            return Err(Error::Format(format!(
                "size mismatch: dims {dims:?} need {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { dims, data })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    /// Serialize to the `UFT1` byte layout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 8 * self.dims.len() + 4 * self.data.len());
        out.extend_from_slice(&MAGIC);
        out.push(DTYPE_F32);
        out.push(self.dims.len() as u8);
        out.extend_from_slice(&[0, 0]);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || bytes[..4] != MAGIC {
            return Err(Error::Format("not a UFT1 file".into()));
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::Format("size mismatch: truncated header".into()));
        }
        let dtype = bytes[4];
        if dtype != DTYPE_F32 {
            return Err(Error::Format(format!("unsupported dtype code {dtype}")));
        }
        let ndim = bytes[5] as usize;
        if ndim == 0 || ndim > MAX_NDIM {
            return Err(Error::Format(format!("ndim {ndim} outside [1, {MAX_NDIM}]")));
        }
        let dims_end = HEADER_LEN + 8 * ndim;
        if bytes.len() < dims_end {
            return Err(Error::Format("size mismatch: truncated dims".into()));
        }
        let dims = bytes[HEADER_LEN..dims_end]
            .chunks_exact(8)
            .map(|c| {
                let d = u64::from_le_bytes(c.try_into().expect("8-byte chunk"));
                usize::try_from(d).map_err(|_| Error::Format(format!("dim {d} too large")))
            })
            .collect::<Result<Vec<_>>>()?;
        validate_dims(&dims)?;
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format("size mismatch: element count overflows".into()))?;
        let payload = &bytes[dims_end..];
        if count.checked_mul(4) != Some(payload.len()) {
            return Err(Error::Format(format!(
                "size mismatch: dims {dims:?} need {} payload bytes, found {}",
                count.saturating_mul(4),
                payload.len()
            )));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
            .collect();
        Ok(Tensor { dims, data })
    }
}

fn validate_dims(dims: &[usize]) -> Result<()> {
    if dims.is_empty() || dims.len() > MAX_NDIM {
        return Err(Error::Format(format!(
            "ndim {} outside [1, {MAX_NDIM}]",
            dims.len()
        )));
    }
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::Format(format!("zero-sized dimension in {dims:?}")));
    }
    Ok(())
}

pub fn write_tensor(path: impl AsRef<Path>, tensor: &Tensor) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, tensor.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Tensor::from_bytes(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// One image entry of a [`DatasetManifest`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    /// Per-layer feature tensors, in layer order.
    pub feature_paths: Vec<PathBuf>,
    pub attention_path: PathBuf,
    /// 0 = normal, 1 = anomalous. Absent at train time means normal.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pixel_mask_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anomaly_type: Option<String>,
}

impl Sample {
    pub fn is_anomalous(&self) -> bool {
        self.label == Some(1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub grid_h: usize,
    pub grid_w: usize,
    pub feature_dim: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub samples: Vec<Sample>,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn num_patches(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn resolve(&self, rel: &Path) -> PathBuf {
        if rel.is_absolute() {
            rel.to_path_buf()
        } else {
            self.base_dir.join(rel)
        }
    }

    /// Checks structural invariants that need no tensor I/O.
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("grid_h", self.grid_h),
            ("grid_w", self.grid_w),
            ("feature_dim", self.feature_dim),
            ("image_h", self.image_h),
            ("image_w", self.image_w),
        ] {
            if v == 0 {
                return Err(Error::Manifest(format!("{name} must be positive")));
            }
        }
        let mut seen = HashSet::new();
        for s in &self.samples {
            if !seen.insert(s.id.as_str()) {
                return Err(Error::Manifest(format!("duplicate sample id {:?}", s.id)));
            }
            if s.feature_paths.is_empty() {
                return Err(Error::Manifest(format!("sample {:?} has no feature_paths", s.id)));
            }
            if let Some(l) = s.label {
                if l > 1 {
                    return Err(Error::Manifest(format!(
                        "sample {:?} has label {l}; expected 0 or 1",
                        s.id
                    )));
                }
            }
        }
        Ok(())
    }

    /// Loads every referenced tensor and checks its shape.
    pub fn validate_tensors(&self) -> Result<()> {
        for s in &self.samples {
            self.load_layers(s)?;
            self.load_attention(s)?;
            if s.pixel_mask_path.is_some() {
                self.load_pixel_mask(s)?;
            }
        }
        Ok(())
    }

    /// Per-layer feature maps of one sample, normalized to flat `[N, D]`.
    pub fn load_layers(&self, sample: &Sample) -> Result<Vec<PatchFeatureMap>> {
        sample
            .feature_paths
            .iter()
            .map(|p| {
                let path = self.resolve(p);
                let t = read_tensor(&path)?;
                let n = self.num_patches();
                let d = self.feature_dim;
                let flat_ok = t.dims() == [n, d];
                let grid_ok = t.dims() == [self.grid_h, self.grid_w, d];
                if !flat_ok && !grid_ok {
                    return Err(Error::Shape(format!(
                        "{}: feature tensor {:?}, expected [{n}, {d}] or [{}, {}, {d}]",
                        path.display(),
                        t.dims(),
                        self.grid_h,
                        self.grid_w
                    )));
                }
                PatchFeatureMap::new(self.grid_h, self.grid_w, d, t.into_data())
            })
            .collect()
    }

    pub fn load_attention(&self, sample: &Sample) -> Result<AttentionMap> {
        let path = self.resolve(&sample.attention_path);
        let t = read_tensor(&path)?;
        if t.dims() != [self.grid_h, self.grid_w] {
            return Err(Error::Shape(format!(
                "{}: attention tensor {:?}, expected [{}, {}]",
                path.display(),
                t.dims(),
                self.grid_h,
                self.grid_w
            )));
        }
        AttentionMap::new(self.grid_h, self.grid_w, t.into_data())
    }

    /// Ground-truth pixel mask as booleans, `[image_h, image_w]` row-major.
    pub fn load_pixel_mask(&self, sample: &Sample) -> Result<Vec<bool>> {
        let rel = sample.pixel_mask_path.as_ref().ok_or_else(|| {
            Error::Manifest(format!("sample {:?} has no pixel_mask_path", sample.id))
        })?;
        let path = self.resolve(rel);
        let t = read_tensor(&path)?;
        if t.dims() != [self.image_h, self.image_w] {
            return Err(Error::Shape(format!(
                "{}: pixel mask {:?}, expected [{}, {}]",
                path.display(),
                t.dims(),
                self.image_h,
                self.image_w
            )));
        }
        t.data()
            .iter()
            .map(|&v| match v {
                0.0 => Ok(false),
                1.0 => Ok(true),
                _ => Err(Error::Format(format!(
                    "{}: pixel mask value {v} is not binary",
                    path.display()
                ))),
            })
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Parses and validates a manifest. With `strict`, every tensor is loaded and
/// shape-checked up front instead of on first use.
pub fn load_manifest(path: impl AsRef<Path>, strict: bool) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
    manifest.base_dir = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    manifest.validate()?;
    if strict {
        manifest.validate_tensors()?;
    }
    Ok(manifest)
}
