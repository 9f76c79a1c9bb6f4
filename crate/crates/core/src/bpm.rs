//! Back patch masking.
//!
//! The CLS attention grid is box-filtered with an `n x n` kernel of weight
//! `1/n^2`, thresholded at `lambda` (inclusive), and the resulting binary mask
//! selects which patch vectors take part in bank construction and scoring.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::aggregation::PatchFeatureMap;
use crate::error::{Error, Result};

pub const DEFAULT_KERNEL_SIZE: usize = 7;
pub const DEFAULT_LAMBDA: f32 = 0.1;

/// Nonnegative attention scores over the patch grid.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    grid_h: usize,
    grid_w: usize,
    values: Vec<f32>,
}

impl AttentionMap {
    pub fn new(grid_h: usize, grid_w: usize, values: Vec<f32>) -> Result<Self> {
        if grid_h == 0 || grid_w == 0 || values.len() != grid_h * grid_w {
            return Err(Error::Shape(format!(
                "attention grid {grid_h}x{grid_w} with {} values",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("attention map"));
        }
        if values.iter().any(|&v| v < 0.0) {
            return Err(Error::Param("attention values must be nonnegative".into()));
        }
        Ok(AttentionMap {
            grid_h,
            grid_w,
            values,
        })
    }

    pub fn grid_h(&self) -> usize {
        self.grid_h
    }

    pub fn grid_w(&self) -> usize {
        self.grid_w
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.grid_w + col]
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    grid_h: usize,
    grid_w: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(grid_h: usize, grid_w: usize, bits: Vec<bool>) -> Result<Self> {
        if grid_h == 0 || grid_w == 0 || bits.len() != grid_h * grid_w {
            return Err(Error::Shape(format!(
                "mask grid {grid_h}x{grid_w} with {} bits",
                bits.len()
            )));
        }
        Ok(BinaryMask {
            grid_h,
            grid_w,
            bits,
        })
    }

    pub fn grid_h(&self) -> usize {
        self.grid_h
    }

    pub fn grid_w(&self) -> usize {
        self.grid_w
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// How the box filter treats taps that fall outside the grid.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Border {
    /// Out-of-range taps contribute 0; the weight stays `1/n^2`.
    #[default]
    Zero,
    /// Average over the in-range taps only.
    Renorm,
}

impl fmt::Display for Border {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Border::Zero => "zero",
            Border::Renorm => "renorm",
        })
    }
}

impl FromStr for Border {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(Border::Zero),
            "renorm" => Ok(Border::Renorm),
            _ => Err(Error::Param(format!("unknown border mode {s:?}"))),
        }
    }
}

/// Parameters of the masking stage, shared by bank construction and scoring.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BpmParams {
    pub kernel_size: usize,
    pub lambda: f32,
    pub border: Border,
    /// Weight patch vectors by the smoothed attention instead of thresholding.
    pub soft_mask: bool,
}

impl Default for BpmParams {
    fn default() -> Self {
        BpmParams {
            kernel_size: DEFAULT_KERNEL_SIZE,
            lambda: DEFAULT_LAMBDA,
            border: Border::Zero,
            soft_mask: false,
        }
    }
}

impl BpmParams {
    pub fn validate(&self) -> Result<()> {
        validate_kernel_size(self.kernel_size)?;
        validate_lambda(self.lambda)
    }
}

fn validate_kernel_size(n: usize) -> Result<()> {
    if n == 0 || n % 2 == 0 {
        return Err(Error::Param(format!("kernel size must be odd and >= 1, got {n}")));
    }
    Ok(())
}

fn validate_lambda(lambda: f32) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Param(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    Ok(())
}

/// Box-filters `att` with an `n x n` window centred on each cell.
///
/// Uses a summed-area table, so the cost is independent of `n`.
pub fn smooth_attention(att: &AttentionMap, n: usize, border: Border) -> Result<AttentionMap> {
    validate_kernel_size(n)?;
    let (h, w) = (att.grid_h, att.grid_w);
    if n > 2 * h.min(w) - 1 {
        return Err(Error::Param(format!(
            "kernel size {n} too large for a {h}x{w} grid"
        )));
    }
    if n == 1 {
        return Ok(att.clone());
    }
    // table[(r, c)] = sum of att over rows < r and cols < c.
    let stride = w + 1;
    let mut table = vec![0f64; (h + 1) * stride];
    for r in 0..h {
        let mut row_sum = 0f64;
        for c in 0..w {
            row_sum += f64::from(att.values[r * w + c]);
            table[(r + 1) * stride + c + 1] = table[r * stride + c + 1] + row_sum;
        }
    }
    let half = n / 2;
    let full = (n * n) as f64;
    let mut values = Vec::with_capacity(h * w);
    for r in 0..h {
        let (r0, r1) = (r.saturating_sub(half), (r + half + 1).min(h));
        for c in 0..w {
            let (c0, c1) = (c.saturating_sub(half), (c + half + 1).min(w));
            let sum = table[r1 * stride + c1] - table[r0 * stride + c1] - table[r1 * stride + c0]
                + table[r0 * stride + c0];
            let weight = match border {
                Border::Zero => full,
                Border::Renorm => ((r1 - r0) * (c1 - c0)) as f64,
            };
            // Cancellation in the table can leave tiny negatives.
            values.push((sum / weight).max(0.0) as f32);
        }
    }
    Ok(AttentionMap {
        grid_h: h,
        grid_w: w,
        values,
    })
}

/// `bit = att >= lambda`.
pub fn binarize(att: &AttentionMap, lambda: f32) -> Result<BinaryMask> {
    validate_lambda(lambda)?;
    Ok(BinaryMask {
        grid_h: att.grid_h,
        grid_w: att.grid_w,
        bits: att.values.iter().map(|&v| v >= lambda).collect(),
    })
}

/// Patch vectors that survived masking, tagged with their grid index.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedPatchSet {
    grid_h: usize,
    grid_w: usize,
    dim: usize,
    indices: Vec<usize>,
    vectors: Vec<f32>,
    fallback: bool,
}

impl MaskedPatchSet {
    /// Builds a set from explicit rows, mainly for callers outside the masking stage.
    pub fn from_rows(grid_h: usize, grid_w: usize, dim: usize, indices: Vec<usize>, vectors: Vec<f32>) -> Result<Self> {
        if dim == 0 || vectors.len() != indices.len() * dim {
            return Err(Error::Shape(format!(
                "{} indices with {} values at dim {dim}",
                indices.len(),
                vectors.len()
            )));
        }
        if let Some(&i) = indices.iter().find(|&&i| i >= grid_h * grid_w) {
            return Err(Error::Shape(format!("grid index {i} outside {grid_h}x{grid_w}")));
        }
        Ok(MaskedPatchSet {
            grid_h,
            grid_w,
            dim,
            indices,
            vectors,
            fallback: false,
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

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Original grid index of every retained row.
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    /// Retained rows, flat `len x dim`.
    pub fn vectors(&self) -> &[f32] {
        &self.vectors
    }

    /// True when the mask was empty and every patch was kept instead.
    pub fn fallback(&self) -> bool {
        self.fallback
    }
}

fn check_grid(feats: &PatchFeatureMap, h: usize, w: usize) -> Result<()> {
    if feats.grid_h() != h || feats.grid_w() != w {
        return Err(Error::Shape(format!(
            "features on a {}x{} grid, mask on {h}x{w}",
            feats.grid_h(),
            feats.grid_w()
        )));
    }
    Ok(())
}

/// Keeps the patches whose mask bit is set. An all-zero mask keeps every
/// patch and raises the `fallback` flag.
pub fn apply_mask(feats: &PatchFeatureMap, mask: &BinaryMask) -> Result<MaskedPatchSet> {
    check_grid(feats, mask.grid_h, mask.grid_w)?;
    let fallback = !mask.bits.iter().any(|&b| b);
    let indices: Vec<usize> = (0..feats.num_patches())
        .filter(|&i| fallback || mask.bits[i])
        .collect();
    let mut vectors = Vec::with_capacity(indices.len() * feats.dim());
    for &i in &indices {
        vectors.extend_from_slice(feats.patch(i));
    }
    Ok(MaskedPatchSet {
        grid_h: feats.grid_h(),
        grid_w: feats.grid_w(),
        dim: feats.dim(),
        indices,
        vectors,
        fallback,
    })
}

/// Soft masking ablation: every patch is kept, scaled by its attention weight.
pub fn apply_soft_mask(feats: &PatchFeatureMap, weights: &AttentionMap) -> Result<MaskedPatchSet> {
    check_grid(feats, weights.grid_h, weights.grid_w)?;
    let mut vectors = Vec::with_capacity(feats.as_slice().len());
    for (row, &w) in feats.patches().zip(&weights.values) {
        vectors.extend(row.iter().map(|&v| v * w));
    }
    Ok(MaskedPatchSet {
        grid_h: feats.grid_h(),
        grid_w: feats.grid_w(),
        dim: feats.dim(),
        indices: (0..feats.num_patches()).collect(),
        vectors,
        fallback: false,
    })
}

/// Full masking stage: smooth, then either threshold and select or weight.
pub fn mask_patches(
    feats: &PatchFeatureMap,
    attention: &AttentionMap,
    params: &BpmParams,
) -> Result<MaskedPatchSet> {
    params.validate()?;
    let smoothed = smooth_attention(attention, params.kernel_size, params.border)?;
    if params.soft_mask {
        apply_soft_mask(feats, &smoothed)
    } else {
        apply_mask(feats, &binarize(&smoothed, params.lambda)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn att(h: usize, w: usize, values: Vec<f32>) -> AttentionMap {
        AttentionMap::new(h, w, values).unwrap()
    }

    /// Direct convolution, one window sum per cell.
    fn direct_smooth(a: &AttentionMap, n: usize, border: Border) -> Vec<f64> {
        let half = (n / 2) as isize;
        let (h, w) = (a.grid_h as isize, a.grid_w as isize);
        let mut out = Vec::new();
        for i in 0..h {
            for j in 0..w {
                let (mut sum, mut taps) = (0f64, 0usize);
                for da in -half..=half {
                    for db in -half..=half {
                        let (r, c) = (i + da, j + db);
                        if (0..h).contains(&r) && (0..w).contains(&c) {
                            sum += f64::from(a.get(r as usize, c as usize));
                            taps += 1;
                        }
                    }
                }
                out.push(match border {
                    Border::Zero => sum / (n * n) as f64,
                    Border::Renorm => sum / taps as f64,
                });
            }
        }
        out
    }

    #[test]
    fn kernel_one_is_identity() {
        let a = att(2, 3, vec![0.1, 0.7, 0.3, 0.0, 0.25, 0.9]);
        assert_eq!(smooth_attention(&a, 1, Border::Zero).unwrap(), a);
    }

    #[test]
    fn constant_interior_preserved() {
        let a = att(9, 9, vec![0.4; 81]);
        let s = smooth_attention(&a, 5, Border::Zero).unwrap();
        for r in 2..7 {
            for c in 2..7 {
                assert!((s.get(r, c) - 0.4).abs() < 1e-7);
            }
        }
        // Corners see 9 of 25 taps under zero padding.
        assert!((s.get(0, 0) - 0.4 * 9.0 / 25.0).abs() < 1e-7);
        let renorm = smooth_attention(&a, 5, Border::Renorm).unwrap();
        assert!(renorm.values().iter().all(|&v| (v - 0.4).abs() < 1e-7));
    }

    #[test]
    fn single_peak_spreads_evenly() {
        let mut v = vec![0.0; 9];
        v[4] = 0.9;
        let s = smooth_attention(&att(3, 3, v), 3, Border::Zero).unwrap();
        for &x in s.values() {
            assert!((x - 0.1).abs() < 1e-6, "{x}");
        }
    }

    #[test]
    fn kernel_size_errors() {
        let a = att(3, 3, vec![0.5; 9]);
        assert!(matches!(smooth_attention(&a, 4, Border::Zero), Err(Error::Param(_))));
        assert!(matches!(smooth_attention(&a, 0, Border::Zero), Err(Error::Param(_))));
        assert!(matches!(smooth_attention(&a, 7, Border::Zero), Err(Error::Param(_))));
        assert!(smooth_attention(&a, 5, Border::Zero).is_ok());
    }

    #[test]
    fn binarize_is_inclusive() {
        let m = binarize(&att(1, 3, vec![0.05, 0.10, 0.20]), 0.1).unwrap();
        assert_eq!(m.bits(), &[false, true, true]);
        let all = binarize(&att(1, 3, vec![0.0, 0.0, 0.3]), 0.0).unwrap();
        assert_eq!(all.count_ones(), 3);
        let none = binarize(&att(1, 3, vec![0.01, 0.02, 0.03]), 0.5).unwrap();
        assert_eq!(none.count_ones(), 0);
        assert!(binarize(&att(1, 1, vec![0.0]), 1.5).is_err());
        assert!(binarize(&att(1, 1, vec![0.0]), -0.1).is_err());
    }

    #[test]
    fn mask_selection_and_fallback() {
        let feats = PatchFeatureMap::new(2, 2, 2, (0..8).map(|v| v as f32).collect()).unwrap();
        let ones = apply_mask(&feats, &BinaryMask::new(2, 2, vec![true; 4]).unwrap()).unwrap();
        assert_eq!((ones.len(), ones.fallback()), (4, false));
        let zeros = apply_mask(&feats, &BinaryMask::new(2, 2, vec![false; 4]).unwrap()).unwrap();
        assert_eq!((zeros.len(), zeros.fallback()), (4, true));
        let checker = BinaryMask::new(2, 2, vec![true, false, false, true]).unwrap();
        let picked = apply_mask(&feats, &checker).unwrap();
        assert_eq!(picked.indices(), &[0, 3]);
        assert_eq!(picked.vectors(), &[0.0, 1.0, 6.0, 7.0]);
        assert!(!picked.fallback());
        let wrong = BinaryMask::new(1, 4, vec![true; 4]).unwrap();
        assert!(matches!(apply_mask(&feats, &wrong), Err(Error::Shape(_))));
    }

    #[test]
    fn soft_mask_scales_rows() {
        let feats = PatchFeatureMap::new(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let s = apply_soft_mask(&feats, &att(1, 2, vec![0.5, 0.0])).unwrap();
        assert_eq!(s.vectors(), &[0.5, 1.0, 0.0, 0.0]);
        assert_eq!(s.indices(), &[0, 1]);
    }

    fn grid() -> impl Strategy<Value = (usize, usize, Vec<f32>)> {
        (1usize..12, 1usize..12).prop_flat_map(|(h, w)| {
            (Just(h), Just(w), prop::collection::vec(0f32..1f32, h * w))
        })
    }

    fn kernel_for(h: usize, w: usize, pick: usize) -> usize {
        let max = 2 * h.min(w) - 1;
        let choices = (max + 1) / 2;
        2 * (pick % choices) + 1
    }

    proptest! {
        #[test]
        fn matches_direct_convolution((h, w, v) in grid(), pick in 0usize..8, renorm in any::<bool>()) {
            let n = kernel_for(h, w, pick);
            let border = if renorm { Border::Renorm } else { Border::Zero };
            let a = att(h, w, v);
            let fast = smooth_attention(&a, n, border).unwrap();
            for (x, y) in fast.values().iter().zip(direct_smooth(&a, n, border)) {
                prop_assert!((f64::from(*x) - y).abs() < 1e-6);
            }
        }

        #[test]
        fn monotone_and_bounded((h, w, v) in grid(), bump in prop::collection::vec(0f32..0.5, 144), pick in 0usize..8) {
            let n = kernel_for(h, w, pick);
            let a = att(h, w, v.clone());
            let b = att(h, w, v.iter().zip(&bump).map(|(x, d)| x + d).collect());
            let sa = smooth_attention(&a, n, Border::Zero).unwrap();
            let sb = smooth_attention(&b, n, Border::Zero).unwrap();
            for (x, y) in sa.values().iter().zip(sb.values()) {
                prop_assert!(x <= y);
            }
            let max_in = v.iter().cloned().fold(0f32, f32::max);
            let max_out = sa.values().iter().cloned().fold(0f32, f32::max);
            prop_assert!(max_out <= max_in);
        }

        #[test]
        fn mask_monotone_in_lambda((h, w, v) in grid(), l1 in 0f32..1.0, l2 in 0f32..1.0, pick in 0usize..8) {
            let n = kernel_for(h, w, pick);
            let s = smooth_attention(&att(h, w, v), n, Border::Zero).unwrap();
            let (lo, hi) = if l1 <= l2 { (l1, l2) } else { (l2, l1) };
            let m_lo = binarize(&s, lo).unwrap();
            let m_hi = binarize(&s, hi).unwrap();
            for (a, b) in m_lo.bits().iter().zip(m_hi.bits()) {
                prop_assert!(*a || !*b);
            }
            prop_assert_eq!(binarize(&s, 0.0).unwrap().count_ones(), h * w);
            let feats = PatchFeatureMap::new(h, w, 1, vec![0.0; h * w]).unwrap();
            let kept = apply_mask(&feats, &m_lo).unwrap();
            if m_lo.count_ones() > 0 {
                prop_assert_eq!(kept.len(), m_lo.count_ones());
            }
        }
    }
}
