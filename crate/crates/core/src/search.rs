//! Exact nearest-neighbour search from query patches to the memory bank.
//!
//! Squared distances use the expanded form `|q|^2 + |b|^2 - 2 q.b` with f64
//! accumulation, evaluated over cache-sized blocks of bank rows. The square
//! root is taken once per query at the end.

use rayon::prelude::*;

use crate::bank::MemoryBank;
use crate::bpm::MaskedPatchSet;
use crate::error::{Error, Result};

/// Nearest bank distance for each query patch.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceVector {
    pub distances: Vec<f32>,
    /// Grid index of each query patch.
    pub grid_indices: Vec<usize>,
    /// Row of the matched bank vector.
    pub bank_indices: Vec<usize>,
}

impl DistanceVector {
    pub fn len(&self) -> usize {
        self.distances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.distances.is_empty()
    }
}

const QUERY_BLOCK: usize = 32;
const BANK_BLOCK_BYTES: usize = 64 * 1024;

pub fn nearest_distances(queries: &MaskedPatchSet, bank: &MemoryBank) -> Result<DistanceVector> {
    check_dims(queries.dim(), queries.len(), bank)?;
    let hits = nearest_rows(queries.vectors(), bank.vectors(), bank.dim());
    Ok(collect(queries, hits))
}

fn check_dims(dim: usize, count: usize, bank: &MemoryBank) -> Result<()> {
    if dim != bank.dim() {
        return Err(Error::Shape(format!("query dim {dim}, bank dim {}", bank.dim())));
    }
    if count == 0 {
        return Err(Error::Empty("query set"));
    }
    if bank.is_empty() {
        return Err(Error::Empty("memory bank"));
    }
    Ok(())
}

fn collect(queries: &MaskedPatchSet, hits: Vec<(f32, usize)>) -> DistanceVector {
    let (distances, bank_indices) = hits.into_iter().unzip();
    DistanceVector {
        distances,
        grid_indices: queries.indices().to_vec(),
        bank_indices,
    }
}

/// `(distance, bank row)` of the nearest bank row for every query row.
///
/// Both inputs are flat row-major matrices of width `dim`; the bank must be
/// nonempty. Ties go to the lowest bank row. Output order follows the queries
/// regardless of how work is split across threads.
pub fn nearest_rows(queries: &[f32], bank: &[f32], dim: usize) -> Vec<(f32, usize)> {
    assert!(dim > 0 && !bank.is_empty(), "nearest_rows needs a nonempty bank");
    let bank_norms: Vec<f64> = bank.chunks_exact(dim).map(|b| dot(b, b)).collect();
    let bank_block = (BANK_BLOCK_BYTES / (4 * dim)).max(8);
    queries
        .par_chunks(QUERY_BLOCK * dim)
        .flat_map_iter(|block| {
            let query_norms: Vec<f64> = block.chunks_exact(dim).map(|q| dot(q, q)).collect();
            let mut best = vec![(f64::INFINITY, 0usize); query_norms.len()];
            for (bi, rows) in bank.chunks(bank_block * dim).enumerate() {
                let base = bi * bank_block;
                for ((q, &qn), slot) in block.chunks_exact(dim).zip(&query_norms).zip(best.iter_mut()) {
                    for (offset, b) in rows.chunks_exact(dim).enumerate() {
                        let d2 = qn + bank_norms[base + offset] - 2.0 * dot(q, b);
                        if d2 < slot.0 {
                            *slot = (d2, base + offset);
                        }
                    }
                }
            }
            best.into_iter().map(|(d2, i)| (d2.max(0.0).sqrt() as f32, i))
        })
        .collect()
}

#[inline]
fn dot(a: &[f32], b: &[f32]) -> f64 {
    let mut acc = [0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for k in 0..4 {
            acc[k] += f64::from(x[k]) * f64::from(y[k]);
        }
    }
    let mut tail = 0f64;
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += f64::from(x) * f64::from(y);
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Plain double-loop search used as a test reference.
pub mod reference {
    use super::*;

    /// Same contract as [`nearest_distances`]: direct `sum (q - b)^2` in f64,
    /// one query and one bank row at a time.
    pub fn nearest_distances_oracle(queries: &MaskedPatchSet, bank: &MemoryBank) -> Result<DistanceVector> {
        check_dims(queries.dim(), queries.len(), bank)?;
        let dim = bank.dim();
        let hits = queries
            .vectors()
            .chunks_exact(dim)
            .map(|q| {
                let mut best = (f64::INFINITY, 0usize);
                for (i, b) in bank.vectors().chunks_exact(dim).enumerate() {
                    let mut d2 = 0f64;
                    for (&x, &y) in q.iter().zip(b) {
                        let diff = f64::from(x) - f64::from(y);
                        d2 += diff * diff;
                    }
                    if d2 < best.0 {
                        best = (d2, i);
                    }
                }
                (best.0.sqrt() as f32, best.1)
            })
            .collect();
        Ok(collect(queries, hits))
    }
}
