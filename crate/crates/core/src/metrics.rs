//! Evaluation metrics: image/pixel AUROC, NMI, ARI and Hungarian-matched F1.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::scoring::PixelHeatmap;

/// Pooled pixel counts above which pixel AUROC switches to a histogram.
pub const PIXEL_EXACT_LIMIT: usize = 10_000_000;
pub const PIXEL_HISTOGRAM_BINS: usize = 65_536;

/// Mann-Whitney U of the positives: pairs where a positive outranks a
/// negative, ties counting one half. Also returns `n_pos * n_neg`.
pub fn mann_whitney_u(scores: &[f64], labels: &[bool]) -> Result<(f64, f64)> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("AUROC scores"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let (mut u2, mut neg_below, mut n_pos) = (0u64, 0u64, 0u64);
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut pos, mut neg) = (0u64, 0u64);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] {
                pos += 1;
            } else {
                neg += 1;
            }
            j += 1;
        }
        // Doubled to stay in integers: 2 * (wins + ties / 2).
        u2 += 2 * pos * neg_below + pos * neg;
        neg_below += neg;
        n_pos += pos;
        i = j;
    }
    let pairs = n_pos * neg_below;
    if pairs == 0 {
        return Err(Error::Undefined("AUROC: both classes must be present"));
    }
    Ok((u2 as f64 / 2.0, pairs as f64))
}

/// Probability that a random positive outranks a random negative (ties 1/2).
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (u, pairs) = mann_whitney_u(scores, labels)?;
    Ok(u / pairs)
}

/// AUROC over every pixel of every sample, pooled.
///
/// Exact ranking below [`PIXEL_EXACT_LIMIT`] pooled pixels, a
/// [`PIXEL_HISTOGRAM_BINS`]-bin histogram above it.
pub fn pixel_auroc(samples: &[(&PixelHeatmap, &[bool])]) -> Result<f64> {
    pixel_auroc_with_limit(samples, PIXEL_EXACT_LIMIT)
}

pub fn pixel_auroc_with_limit(samples: &[(&PixelHeatmap, &[bool])], exact_limit: usize) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty("pixel AUROC samples"));
    }
    let mut total = 0usize;
    for (heatmap, mask) in samples {
        if heatmap.values.len() != mask.len() {
            return Err(Error::Shape(format!(
                "heatmap has {} pixels, mask has {}",
                heatmap.values.len(),
                mask.len()
            )));
        }
        if heatmap.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("heatmap"));
        }
        total += mask.len();
    }
    if total <= exact_limit {
        let mut scores = Vec::with_capacity(total);
        let mut labels = Vec::with_capacity(total);
        for (heatmap, mask) in samples {
            scores.extend(heatmap.values.iter().map(|&v| f64::from(v)));
            labels.extend_from_slice(mask);
        }
        return auroc(&scores, &labels);
    }
    histogram_auroc(samples, PIXEL_HISTOGRAM_BINS)
}

fn histogram_auroc(samples: &[(&PixelHeatmap, &[bool])], bins: usize) -> Result<f64> {
    let (lo, hi) = samples
        .iter()
        .flat_map(|(h, _)| h.values.iter())
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let (lo, hi) = (f64::from(lo), f64::from(hi));
    let scale = if hi > lo { bins as f64 / (hi - lo) } else { 0.0 };
    let mut pos = vec![0u64; bins];
    let mut neg = vec![0u64; bins];
    for (heatmap, mask) in samples {
        for (&v, &m) in heatmap.values.iter().zip(mask.iter()) {
            let b = (((f64::from(v) - lo) * scale) as usize).min(bins - 1);
            if m {
                pos[b] += 1;
            } else {
                neg[b] += 1;
            }
        }
    }
    let (mut u2, mut neg_below, mut n_pos) = (0u128, 0u128, 0u128);
    for (&p, &n) in pos.iter().zip(&neg) {
        let (p, n) = (u128::from(p), u128::from(n));
        u2 += 2 * p * neg_below + p * n;
        neg_below += n;
        n_pos += p;
    }
    let pairs = n_pos * neg_below;
    if pairs == 0 {
        return Err(Error::Undefined("AUROC: both classes must be present"));
    }
    Ok(u2 as f64 / 2.0 / pairs as f64)
}

/// Dense contingency table between two labelings.
struct Contingency {
    n: usize,
    table: Vec<Vec<usize>>,
    rows: Vec<usize>,
    cols: Vec<usize>,
}

fn dense_labels(labels: &[usize]) -> (Vec<usize>, usize) {
    let mut map = HashMap::new();
    let dense = labels
        .iter()
        .map(|&l| {
            let next = map.len();
            *map.entry(l).or_insert(next)
        })
        .collect();
    (dense, map.len())
}

impl Contingency {
    fn new(truth: &[usize], pred: &[usize]) -> Result<Self> {
        if truth.len() != pred.len() {
            return Err(Error::Shape(format!(
                "{} truth labels vs {} predicted",
                truth.len(),
                pred.len()
            )));
        }
        if truth.is_empty() {
            return Err(Error::Empty("partition"));
        }
        let (t, nt) = dense_labels(truth);
        let (p, np) = dense_labels(pred);
        let mut table = vec![vec![0usize; np]; nt];
        for (&a, &b) in t.iter().zip(&p) {
            table[a][b] += 1;
        }
        let rows = table.iter().map(|r| r.iter().sum()).collect();
        let cols = (0..np).map(|j| table.iter().map(|r| r[j]).sum()).collect();
        Ok(Contingency {
            n: truth.len(),
            table,
            rows,
            cols,
        })
    }

    /// Both partitions group items identically (up to relabeling).
    fn identical(&self) -> bool {
        self.rows.len() == self.cols.len()
            && self.table.iter().all(|r| r.iter().filter(|&&c| c > 0).count() == 1)
    }
}

fn entropy(counts: &[usize], n: f64) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Normalized mutual information, `I(U;V) / sqrt(H(U) H(V))`, natural log.
///
/// When an entropy is zero the value is 1 for identical partitions and 0 otherwise.
pub fn nmi(truth: &[usize], pred: &[usize]) -> Result<f64> {
    let c = Contingency::new(truth, pred)?;
    let n = c.n as f64;
    let (hu, hv) = (entropy(&c.rows, n), entropy(&c.cols, n));
    if hu == 0.0 || hv == 0.0 {
        return Ok(if c.identical() { 1.0 } else { 0.0 });
    }
    let mut mi = 0.0;
    for (i, row) in c.table.iter().enumerate() {
        for (j, &nij) in row.iter().enumerate() {
            if nij > 0 {
                let nij = nij as f64;
                mi += nij / n * (n * nij / (c.rows[i] as f64 * c.cols[j] as f64)).ln();
            }
        }
    }
    Ok((mi / (hu * hv).sqrt()).clamp(0.0, 1.0))
}

fn comb2(v: usize) -> f64 {
    let v = v as f64;
    v * (v - 1.0) / 2.0
}

/// Adjusted Rand index from pair counts. A zero denominator yields 1 for
/// identical partitions and 0 otherwise.
pub fn ari(truth: &[usize], pred: &[usize]) -> Result<f64> {
    let c = Contingency::new(truth, pred)?;
    let index: f64 = c.table.iter().flatten().map(|&v| comb2(v)).sum();
    let sum_rows: f64 = c.rows.iter().map(|&v| comb2(v)).sum();
    let sum_cols: f64 = c.cols.iter().map(|&v| comb2(v)).sum();
    let total = comb2(c.n);
    let expected = if total > 0.0 { sum_rows * sum_cols / total } else { 0.0 };
    let max_index = 0.5 * (sum_rows + sum_cols);
    let denom = max_index - expected;
    if denom == 0.0 {
        return Ok(if c.identical() { 1.0 } else { 0.0 });
    }
    Ok((index - expected) / denom)
}

/// Minimum-cost assignment on a rectangular matrix.
///
/// Returns, for each row, the assigned column (or `None` when rows outnumber
/// columns). The matrix is padded with zero-cost entries to square.
pub fn linear_assignment(costs: &[Vec<f64>]) -> Vec<Option<usize>> {
    let rows = costs.len();
    let cols = costs.first().map_or(0, Vec::len);
    let n = rows.max(cols);
    if n == 0 {
        return Vec::new();
    }
    let cost = |i: usize, j: usize| if i < rows && j < cols { costs[i][j] } else { 0.0 };
    // Potentials-based O(n^3) Hungarian, 1-based with a virtual column 0.
    let mut u = vec![0f64; n + 1];
    let mut v = vec![0f64; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![None; rows];
    for j in 1..=n {
        let i = owner[j];
        if i > 0 && i <= rows && j <= cols {
            assignment[i - 1] = Some(j - 1);
        }
    }
    assignment
}

/// Macro F1 over truth classes after matching each predicted cluster to at
/// most one class.
///
/// The matching maximizes the number of correctly matched items; among
/// matchings with equal counts the one with the larger F1 sum wins.
/// Clusters left without a class count as wrong predictions.
pub fn hungarian_f1(truth: &[usize], pred: &[usize]) -> Result<f64> {
    let c = Contingency::new(truth, pred)?;
    let classes = c.rows.len();
    let clusters = c.cols.len();
    // Per-pair F1 is additive over a matching, so it can ride along as a
    // tie-break scaled below one matched item.
    let tie_scale = 1.0 / (classes.min(clusters) as f64 + 1.0);
    let costs: Vec<Vec<f64>> = (0..clusters)
        .map(|p| {
            (0..classes)
                .map(|t| {
                    let nij = c.table[t][p];
                    let f1 = 2.0 * nij as f64 / (c.rows[t] + c.cols[p]) as f64;
                    -(nij as f64 + tie_scale * f1)
                })
                .collect()
        })
        .collect();
    let matching = linear_assignment(&costs);
    Ok(macro_f1(&c, &matching))
}

fn macro_f1(c: &Contingency, cluster_to_class: &[Option<usize>]) -> f64 {
    let mut per_class: Vec<f64> = c
        .rows
        .iter()
        .enumerate()
        .map(|(t, &class_size)| match cluster_to_class.iter().position(|&m| m == Some(t)) {
            Some(p) => 2.0 * c.table[t][p] as f64 / (c.cols[p] + class_size) as f64,
            None => 0.0,
        })
        .collect();
    // Summing in sorted order makes the result independent of label numbering.
    per_class.sort_by(f64::total_cmp);
    per_class.iter().sum::<f64>() / c.rows.len() as f64
}
