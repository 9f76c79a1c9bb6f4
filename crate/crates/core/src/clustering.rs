//! Anomaly-type clustering: pooled patch features and seeded k-means.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::aggregation::PatchFeatureMap;
use crate::error::{Error, Result};

pub const DEFAULT_MAX_ITERS: usize = 300;

/// How one image is reduced to a single feature vector.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Pooling {
    /// Mean of the top-k scored patches.
    #[default]
    TopK,
    /// Mean of every patch.
    All,
    /// The single highest-scored patch.
    Max,
}

impl fmt::Display for Pooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pooling::TopK => "topk",
            Pooling::All => "all",
            Pooling::Max => "max",
        })
    }
}

impl FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "topk" => Ok(Pooling::TopK),
            "all" => Ok(Pooling::All),
            "max" => Ok(Pooling::Max),
            _ => Err(Error::Param(format!("unknown pooling {s:?}"))),
        }
    }
}

fn mean_of(feats: &PatchFeatureMap, indices: impl ExactSizeIterator<Item = usize>) -> Vec<f64> {
    let count = indices.len() as f64;
    let mut acc = vec![0f64; feats.dim()];
    for i in indices {
        for (a, &v) in acc.iter_mut().zip(feats.patch(i)) {
            *a += f64::from(v);
        }
    }
    acc.into_iter().map(|s| s / count).collect()
}

/// Mean of the patch vectors at `topk_indices`.
pub fn pool_topk_features(feats: &PatchFeatureMap, topk_indices: &[usize]) -> Result<Vec<f64>> {
    if topk_indices.is_empty() {
        return Err(Error::Empty("top-k indices"));
    }
    if let Some(&i) = topk_indices.iter().find(|&&i| i >= feats.num_patches()) {
        return Err(Error::Param(format!(
            "patch index {i} outside a grid of {}",
            feats.num_patches()
        )));
    }
    // Summing in index order makes the result independent of the given order.
    let mut sorted = topk_indices.to_vec();
    sorted.sort_unstable();
    Ok(mean_of(feats, sorted.into_iter()))
}

pub fn pool_all(feats: &PatchFeatureMap) -> Vec<f64> {
    mean_of(feats, 0..feats.num_patches())
}

/// Vector of the highest-scoring patch, ties to the lowest index.
pub fn pool_max(feats: &PatchFeatureMap, patch_scores: &[f32]) -> Result<Vec<f64>> {
    if patch_scores.len() != feats.num_patches() {
        return Err(Error::Shape(format!(
            "{} scores for {} patches",
            patch_scores.len(),
            feats.num_patches()
        )));
    }
    let best = (0..patch_scores.len())
        .reduce(|a, b| if patch_scores[b] > patch_scores[a] { b } else { a })
        .ok_or(Error::Empty("patch scores"))?;
    Ok(feats.patch(best).iter().map(|&v| f64::from(v)).collect())
}

pub fn l2_normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Sum of squared distances to the assigned centroids.
    pub inertia: f64,
    /// Inertia after each assignment step, first to last.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means++ seeding followed by Lloyd iterations until the assignment stops
/// changing or `max_iters` is reached. Deterministic for a given seed.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64, max_iters: usize) -> Result<KMeansResult> {
    let first = points.first().ok_or(Error::Empty("k-means points"))?;
    if k == 0 || k > points.len() {
        return Err(Error::Param(format!(
            "cluster count {k} outside [1, {}]",
            points.len()
        )));
    }
    let dim = first.len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::Shape("k-means points differ in dimension".into()));
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("k-means points"));
    }

    let mut centroids = plus_plus_seeds(points, k, seed);
    let mut assignments = vec![usize::MAX; points.len()];
    let mut history: Vec<f64> = Vec::new();
    let mut iterations = 0;
    loop {
        let (next, dists): (Vec<usize>, Vec<f64>) = points
            .par_iter()
            .map(|p| nearest_centroid(p, &centroids))
            .unzip();
        let inertia: f64 = dists.iter().sum();
        if let Some(&prev) = history.last() {
            debug_assert!(
                inertia <= prev + 1e-9 * prev.max(1.0),
                "Lloyd step increased inertia {prev} -> {inertia}"
            );
        }
        history.push(inertia);
        let converged = next == assignments;
        assignments = next;
        if converged || iterations >= max_iters {
            break;
        }
        iterations += 1;
        centroids = update_centroids(points, &assignments, &centroids, &dists);
    }
    Ok(KMeansResult {
        assignments,
        centroids,
        inertia: *history.last().expect("at least one assignment step"),
        inertia_history: history,
        iterations,
    })
}

fn nearest_centroid(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = sq_dist(p, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn plus_plus_seeds(points: &[Vec<f64>], k: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = vec![rng.random_range(0..points.len())];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &points[chosen[0]])).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if d > 0.0 && acc > target {
                    pick = Some(i);
                    break;
                }
            }
            // Rounding can leave `target` just past the final sum.
            pick.unwrap_or_else(|| d2.iter().rposition(|&d| d > 0.0).expect("positive total"))
        } else {
            // Every point coincides with a chosen one; take the first unused index.
            (0..points.len()).find(|i| !chosen.contains(i)).expect("k <= n")
        };
        chosen.push(pick);
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &points[pick]));
        }
    }
    chosen.into_iter().map(|i| points[i].clone()).collect()
}

/// Means of the assigned points. Empty clusters take the point farthest
/// from its current centroid, each such point used at most once.
fn update_centroids(points: &[Vec<f64>], assignments: &[usize], old: &[Vec<f64>], dists: &[f64]) -> Vec<Vec<f64>> {
    let dim = points[0].len();
    let mut sums = vec![vec![0f64; dim]; old.len()];
    let mut counts = vec![0usize; old.len()];
    for (p, &c) in points.iter().zip(assignments) {
        counts[c] += 1;
        for (s, v) in sums[c].iter_mut().zip(p) {
            *s += v;
        }
    }
    let mut taken = vec![false; points.len()];
    sums.into_iter()
        .zip(&counts)
        .map(|(sum, &count)| {
            if count > 0 {
                return sum.into_iter().map(|s| s / count as f64).collect();
            }
            let far = (0..points.len())
                .filter(|&i| !taken[i])
                .reduce(|a, b| if dists[b] > dists[a] { b } else { a })
                .expect("fewer empty clusters than points");
            taken[far] = true;
            points[far].clone()
        })
        .collect()
}
