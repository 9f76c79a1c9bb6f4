//! Per-image patch feature maps and layer averaging.

use crate::error::{Error, Result};

/// Grid of `D`-dimensional patch embeddings, stored as a flat `N x D`
/// row-major matrix with patches in row-major grid order.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchFeatureMap {
    grid_h: usize,
    grid_w: usize,
    dim: usize,
    data: Vec<f32>,
}

impl PatchFeatureMap {
    pub fn new(grid_h: usize, grid_w: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if grid_h == 0 || grid_w == 0 || dim == 0 {
            return Err(Error::Shape(format!(
                "feature map dims must be positive, got {grid_h}x{grid_w}x{dim}"
            )));
        }
        if data.len() != grid_h * grid_w * dim {
            return Err(Error::Shape(format!(
                "feature map {grid_h}x{grid_w}x{dim} needs {} values, got {}",
                grid_h * grid_w * dim,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("patch features"));
        }
        Ok(PatchFeatureMap {
            grid_h,
            grid_w,
            dim,
            data,
        })
    }

    pub fn grid_h(&self) -> usize {
        self.grid_h
    }

    pub fn grid_w(&self) -> usize {
        self.grid_w
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_patches(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn patch(&self, index: usize) -> &[f32] {
        &self.data[index * self.dim..(index + 1) * self.dim]
    }

    pub fn patches(&self) -> impl ExactSizeIterator<Item = &[f32]> {
        self.data.chunks_exact(self.dim)
    }

    fn same_shape(&self, other: &Self) -> bool {
        self.grid_h == other.grid_h && self.grid_w == other.grid_w && self.dim == other.dim
    }

    /// Copy with each patch vector scaled to unit L2 norm (zero vectors stay zero).
    pub fn l2_normalized(&self) -> Self {
        let mut data = self.data.clone();
        for row in data.chunks_exact_mut(self.dim) {
            let norm = row.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt();
            if norm > 0.0 {
                for v in row {
                    *v = (f64::from(*v) / norm) as f32;
                }
            }
        }
        PatchFeatureMap { data, ..*self }
    }
}

/// Element-wise mean of per-layer maps.
///
/// Sums in f64 in the given layer order, divides once and rounds to f32.
pub fn aggregate_layers(layer_maps: &[PatchFeatureMap]) -> Result<PatchFeatureMap> {
    let first = layer_maps.first().ok_or(Error::Empty("layer maps"))?;
    if let Some(bad) = layer_maps.iter().find(|m| !first.same_shape(m)) {
        return Err(Error::Shape(format!(
            "layer map {}x{}x{} does not match {}x{}x{}",
            bad.grid_h, bad.grid_w, bad.dim, first.grid_h, first.grid_w, first.dim
        )));
    }
    if layer_maps.len() == 1 {
        return Ok(first.clone());
    }
    let mut acc = vec![0f64; first.data.len()];
    for map in layer_maps {
        for (a, &v) in acc.iter_mut().zip(&map.data) {
            *a += f64::from(v);
        }
    }
    let count = layer_maps.len() as f64;
    let data = acc.into_iter().map(|s| (s / count) as f32).collect();
    PatchFeatureMap::new(first.grid_h, first.grid_w, first.dim, data)
}

/// [`aggregate_layers`], optionally L2-normalizing each layer's patches first.
pub fn aggregate_sample_layers(layers: &[PatchFeatureMap], l2_normalize: bool) -> Result<PatchFeatureMap> {
    if l2_normalize {
        aggregate_layers(&layers.iter().map(PatchFeatureMap::l2_normalized).collect::<Vec<_>>())
    } else {
        aggregate_layers(layers)
    }
}
