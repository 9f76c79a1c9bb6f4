//! Acceptance suite: one line per criterion, nonzero exit if any fails.
//!
//! Every check compares the library against an independent reference written
//! here, or runs the full pipeline on seeded synthetic data.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use patchbank_cli::{run, EXIT_OK};
use patchbank_core::bank::{coreset_size, BankParams};
use patchbank_core::bpm::{smooth_attention, AttentionMap, Border, BpmParams};
use patchbank_core::clustering::DEFAULT_MAX_ITERS;
use patchbank_core::pipeline::{self, ClusterParams};
use patchbank_core::scoring::{topk_count, ScoreParams};
use patchbank_core::search::reference::nearest_distances_oracle;
use patchbank_core::synth::{AnomalyRegion, SynthSpec};
use patchbank_core::{
    ari, auroc, build_bank, coreset_subsample, generate, hungarian_f1, load_manifest, nearest_distances, nmi,
    topk_score, DatasetManifest, MaskedPatchSet, MemoryBank, Pooling, ScoreResult,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------- search

fn oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let mut r = rng(1);
    let mut worst = 0f64;
    for case in 0..500 {
        let dim = r.random_range(1..=64);
        let bank_rows = r.random_range(1..=5000);
        let queries = r.random_range(1..=64);
        let scale = [0.01f32, 1.0, 100.0][case % 3];
        let mut gen = |n: usize| -> Vec<f32> { (0..n * dim).map(|_| r.random_range(-scale..scale)).collect() };
        let bank = MemoryBank::from_vectors(dim, gen(bank_rows)).map_err(|e| e.to_string())?;
        let q = MaskedPatchSet::from_rows(1, queries, dim, (0..queries).collect(), gen(queries))
            .map_err(|e| e.to_string())?;
        let fast = nearest_distances(&q, &bank).map_err(|e| e.to_string())?;
        let slow = nearest_distances_oracle(&q, &bank).map_err(|e| e.to_string())?;
        for (a, b) in fast.distances.iter().zip(&slow.distances) {
            let rel = (f64::from(*a) - f64::from(*b)).abs() / f64::from(*b).max(1e-12);
            worst = worst.max(rel);
            ensure(rel <= 1e-5, || format!("case {case}: {a} vs {b} (rel {rel:.2e})"))?;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 60.0, || format!("took {secs:.1}s"))?;
    Ok(format!("500 instances, worst rel err {worst:.2e}, {secs:.1}s"))
}

// ---------------------------------------------------------------- top-k

/// Sort everything, take `ceil(tenths * n / 1000)` by integer arithmetic.
fn topk_reference(scores: &[f32], k_tenths: usize) -> (f64, Vec<usize>) {
    let n = scores.len();
    let k = (k_tenths * n).div_ceil(1000).max(1);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    order.truncate(k);
    let sum: f64 = order.iter().map(|&i| f64::from(scores[i])).sum();
    (sum / k as f64, order)
}

fn topk_exact() -> Outcome {
    ensure(topk_count(20, 5.0) == 1, || "N=20,k=5 should give K=1".into())?;
    ensure(topk_count(10, 20.0) == 2, || "N=10,k=20 should give K=2".into())?;
    let mut r = rng(2);
    let mut tied = 0;
    for case in 0..1000 {
        let n = r.random_range(1..=800);
        let k_tenths = r.random_range(1..=1000);
        let levels = [2u32, 5, 1000][case % 3];
        let scores: Vec<f32> = (0..n).map(|_| r.random_range(0..levels) as f32 * 0.37).collect();
        if levels < 1000 {
            tied += 1;
        }
        let got = topk_score(&scores, k_tenths as f64 / 10.0).map_err(|e| e.to_string())?;
        let (want, idx) = topk_reference(&scores, k_tenths);
        ensure(got.score == want && got.indices == idx, || {
            format!("case {case}: n={n} k={} got {} want {want}", k_tenths as f64 / 10.0, got.score)
        })?;
    }
    Ok(format!("1000 vectors ({tied} with heavy ties) exact; hand cases K=1, K=2"))
}

// ---------------------------------------------------------------- coreset

fn dist_matrix(points: &[f32], dim: usize) -> Vec<Vec<f64>> {
    let n = points.len() / dim;
    (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    let s: f64 = (0..dim)
                        .map(|d| (f64::from(points[i * dim + d]) - f64::from(points[j * dim + d])).powi(2))
                        .sum();
                    s.sqrt()
                })
                .collect()
        })
        .collect()
}

fn radius(dm: &[Vec<f64>], centers: &[usize]) -> f64 {
    dm.iter()
        .map(|row| centers.iter().map(|&c| row[c]).fold(f64::INFINITY, f64::min))
        .fold(0.0, f64::max)
}

fn optimal_radius(dm: &[Vec<f64>], m: usize) -> f64 {
    let n = dm.len();
    let mut best = f64::INFINITY;
    let mut subset = (0..m).collect::<Vec<_>>();
    loop {
        let mut worst = 0f64;
        for row in dm {
            let d = subset.iter().map(|&c| row[c]).fold(f64::INFINITY, f64::min);
            worst = worst.max(d);
            if worst >= best {
                break;
            }
        }
        best = best.min(worst);
        // Next combination in lexicographic order.
        let mut i = m;
        while i > 0 && subset[i - 1] == n - m + i - 1 {
            i -= 1;
        }
        if i == 0 {
            return best;
        }
        subset[i - 1] += 1;
        for j in i..m {
            subset[j] = subset[j - 1] + 1;
        }
    }
}

fn coreset_quality() -> Outcome {
    let mut r = rng(3);
    let mut worst_ratio = 0f64;
    for case in 0..200 {
        let m = r.random_range(1..=3);
        let n = r.random_range(m..=200);
        let dim = r.random_range(1..=4);
        let points: Vec<f32> = (0..n * dim).map(|_| r.random_range(-10.0f32..10.0)).collect();
        let dm = dist_matrix(&points, dim);
        let chosen = coreset_subsample(&points, dim, m, case).map_err(|e| e.to_string())?;
        let (greedy, opt) = (radius(&dm, &chosen), optimal_radius(&dm, m));
        if opt > 0.0 {
            worst_ratio = worst_ratio.max(greedy / opt);
        }
        ensure(greedy <= 2.0 * opt + 1e-9, || format!("case {case}: greedy {greedy} > 2 x {opt}"))?;
    }
    for sweep in 0..50u64 {
        let n = r.random_range(2..=150);
        let dim = r.random_range(1..=8);
        let points: Vec<f32> = (0..n * dim).map(|_| r.random_range(-5.0f32..5.0)).collect();
        let dm = dist_matrix(&points, dim);
        let mut prev = f64::INFINITY;
        for m in 1..=n.min(40) {
            let chosen = coreset_subsample(&points, dim, m, sweep).map_err(|e| e.to_string())?;
            let rad = radius(&dm, &chosen);
            ensure(rad <= prev, || format!("sweep {sweep}: radius grew at m={m}"))?;
            prev = rad;
        }
    }
    ensure(coreset_size(200, 0.5) == 100, || "ceil(0.5 * 200) != 100".into())?;
    Ok(format!("200 instances within 2x optimum (worst ratio {worst_ratio:.3}); 50 monotone sweeps"))
}

// ---------------------------------------------------------------- metrics

fn auroc_pairs(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut wins, mut ties, mut pairs) = (0u64, 0u64, 0u64);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] && !labels[j] {
                pairs += 1;
                if si > sj {
                    wins += 1;
                } else if si == sj {
                    ties += 1;
                }
            }
        }
    }
    (wins as f64 + 0.5 * ties as f64) / pairs as f64
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

/// Best one-to-one cluster-to-class map by exhaustive search: most matched
/// items first, then largest summed per-pair F1. Reports macro F1.
fn f1_bruteforce(truth: &[usize], pred: &[usize]) -> f64 {
    let classes: Vec<usize> = {
        let mut v = truth.to_vec();
        v.sort_unstable();
        v.dedup();
        v
    };
    let clusters: Vec<usize> = {
        let mut v = pred.to_vec();
        v.sort_unstable();
        v.dedup();
        v
    };
    let count = |t: usize, p: usize| truth.iter().zip(pred).filter(|&(&a, &b)| a == t && b == p).count();
    let size_t = |t: usize| truth.iter().filter(|&&a| a == t).count();
    let size_p = |p: usize| pred.iter().filter(|&&b| b == p).count();
    let pair_f1 = |t: usize, p: usize| 2.0 * count(t, p) as f64 / (size_t(t) + size_p(p)) as f64;
    let n = classes.len().max(clusters.len());
    let mut best: Option<(usize, f64, Vec<f64>)> = None;
    for perm in permutations(n) {
        // Cluster slot j maps to class slot perm[j]; out-of-range slots are unmatched.
        let mut matched = 0;
        let mut f1_sum = 0.0;
        let mut per_class = vec![0.0; classes.len()];
        for (j, &ti) in perm.iter().enumerate() {
            if j < clusters.len() && ti < classes.len() {
                matched += count(classes[ti], clusters[j]);
                let f = pair_f1(classes[ti], clusters[j]);
                f1_sum += f;
                per_class[ti] = f;
            }
        }
        let better = match &best {
            None => true,
            Some((bm, bf, _)) => matched > *bm || (matched == *bm && f1_sum > *bf),
        };
        if better {
            best = Some((matched, f1_sum, per_class));
        }
    }
    let mut per_class = best.unwrap().2;
    per_class.sort_by(f64::total_cmp);
    per_class.iter().sum::<f64>() / classes.len() as f64
}

/// NMI straight from the definition over distinct label values.
fn nmi_reference(truth: &[usize], pred: &[usize]) -> f64 {
    let n = truth.len() as f64;
    let mut joint: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    let mut pu: BTreeMap<usize, f64> = BTreeMap::new();
    let mut pv: BTreeMap<usize, f64> = BTreeMap::new();
    for (&a, &b) in truth.iter().zip(pred) {
        *joint.entry((a, b)).or_default() += 1.0 / n;
        *pu.entry(a).or_default() += 1.0 / n;
        *pv.entry(b).or_default() += 1.0 / n;
    }
    let h = |m: &BTreeMap<usize, f64>| -m.values().map(|p| p * p.ln()).sum::<f64>();
    let (hu, hv) = (h(&pu), h(&pv));
    let same = (0..truth.len())
        .all(|i| (0..truth.len()).all(|j| (truth[i] == truth[j]) == (pred[i] == pred[j])));
    if pu.len() == 1 || pv.len() == 1 {
        return if same { 1.0 } else { 0.0 };
    }
    let mi: f64 = joint.iter().map(|(&(a, b), &p)| p * (p / (pu[&a] * pv[&b])).ln()).sum();
    mi / (hu * hv).sqrt()
}

/// ARI from explicit pair agreement counts.
fn ari_reference(truth: &[usize], pred: &[usize]) -> f64 {
    let n = truth.len();
    let (mut a, mut b, mut c, mut d) = (0f64, 0f64, 0f64, 0f64);
    for i in 0..n {
        for j in i + 1..n {
            match (truth[i] == truth[j], pred[i] == pred[j]) {
                (true, true) => a += 1.0,
                (true, false) => b += 1.0,
                (false, true) => c += 1.0,
                (false, false) => d += 1.0,
            }
        }
    }
    let total = a + b + c + d;
    let expected = (a + b) * (a + c) + (c + d) * (b + d);
    let denom = total * total - expected;
    if denom == 0.0 {
        return if b == 0.0 && c == 0.0 { 1.0 } else { 0.0 };
    }
    (total * (a + d) - expected) / denom
}

fn metric_oracles() -> Outcome {
    let mut r = rng(4);
    for case in 0..1000 {
        let n = r.random_range(2..=50);
        let levels = r.random_range(1..=20);
        let scores: Vec<f64> = (0..n).map(|_| r.random_range(0..levels) as f64).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| r.random_bool(0.5)).collect();
        labels[0] = true;
        labels[1] = false;
        let got = auroc(&scores, &labels).map_err(|e| e.to_string())?;
        let want = auroc_pairs(&scores, &labels);
        ensure(got == want, || format!("auroc case {case}: {got} vs {want}"))?;
    }
    for case in 0..200 {
        let n = r.random_range(1..=40);
        let (kt, kp) = (r.random_range(1..=6), r.random_range(1..=6));
        let truth: Vec<usize> = (0..n).map(|_| r.random_range(0..kt) * 3).collect();
        let pred: Vec<usize> = (0..n).map(|_| r.random_range(0..kp) + 10).collect();
        let got = hungarian_f1(&truth, &pred).map_err(|e| e.to_string())?;
        let want = f1_bruteforce(&truth, &pred);
        ensure(got == want, || format!("f1 case {case}: {got} vs {want}"))?;
    }
    let mut worst = 0f64;
    for case in 0..200 {
        let n = r.random_range(1..=60);
        let (kt, kp) = (r.random_range(1..=5), r.random_range(1..=5));
        let truth: Vec<usize> = (0..n).map(|_| r.random_range(0..kt)).collect();
        let pred: Vec<usize> = (0..n).map(|_| r.random_range(0..kp)).collect();
        let dn = (nmi(&truth, &pred).map_err(|e| e.to_string())? - nmi_reference(&truth, &pred)).abs();
        let da = (ari(&truth, &pred).map_err(|e| e.to_string())? - ari_reference(&truth, &pred)).abs();
        worst = worst.max(dn).max(da);
        ensure(dn <= 1e-9 && da <= 1e-9, || format!("nmi/ari case {case}: diffs {dn:.2e} {da:.2e}"))?;
    }
    Ok(format!("auroc 1000/1000 exact, f1 200/200 exact, nmi/ari 200 within {worst:.1e}"))
}

// ---------------------------------------------------------------- smoothing

fn direct_smooth(values: &[f32], h: usize, w: usize, n: usize) -> Vec<f64> {
    let half = (n / 2) as i64;
    let mut out = vec![0f64; h * w];
    for r in 0..h as i64 {
        for c in 0..w as i64 {
            let mut s = 0f64;
            for dr in -half..=half {
                for dc in -half..=half {
                    let (rr, cc) = (r + dr, c + dc);
                    if rr >= 0 && cc >= 0 && rr < h as i64 && cc < w as i64 {
                        s += f64::from(values[(rr * w as i64 + cc) as usize]);
                    }
                }
            }
            out[(r * w as i64 + c) as usize] = s / (n * n) as f64;
        }
    }
    out
}

fn smoothing() -> Outcome {
    let mut r = rng(5);
    let mut worst = 0f64;
    for case in 0..300 {
        let (h, w) = (r.random_range(1..=20), r.random_range(1..=20));
        let max_n = 2 * h.min(w) - 1;
        let n = 2 * r.random_range(0..=max_n / 2) + 1;
        let values: Vec<f32> = (0..h * w).map(|_| r.random_range(0.0f32..1.0)).collect();
        let att = AttentionMap::new(h, w, values.clone()).map_err(|e| e.to_string())?;
        let got = smooth_attention(&att, n, Border::Zero).map_err(|e| e.to_string())?;
        for (g, want) in got.values().iter().zip(direct_smooth(&values, h, w, n)) {
            let d = (f64::from(*g) - want).abs();
            worst = worst.max(d);
            ensure(d <= 1e-6, || format!("case {case}: {h}x{w} n={n} diff {d:.2e}"))?;
        }
        let same = smooth_attention(&att, 1, Border::Zero).map_err(|e| e.to_string())?;
        ensure(same.values() == values.as_slice(), || format!("case {case}: n=1 not identity"))?;
    }
    let mut center = vec![0f32; 9];
    center[4] = 0.9;
    let att = AttentionMap::new(3, 3, center).map_err(|e| e.to_string())?;
    let out = smooth_attention(&att, 3, Border::Zero).map_err(|e| e.to_string())?;
    let off = out.values().iter().map(|v| (f64::from(*v) - 0.1).abs()).fold(0.0, f64::max);
    ensure(off <= 1e-6, || format!("3x3 case off by {off:.2e}"))?;
    Ok(format!("300 random maps within {worst:.1e}; n=1 identity; 3x3 case within {off:.1e} of 0.1"))
}

// ---------------------------------------------------------------- pipeline helpers

struct Run {
    test: DatasetManifest,
    results: Vec<ScoreResult>,
}

fn synth_and_score(spec: &SynthSpec, dir: &Path, bpm: BpmParams) -> Result<Run, String> {
    let (train, test) = generate(spec, dir).map_err(|e| e.to_string())?;
    let train = load_manifest(&train, true).map_err(|e| e.to_string())?;
    let test = load_manifest(&test, true).map_err(|e| e.to_string())?;
    let bank = build_bank(&train, &BankParams { bpm, ..BankParams::default() }).map_err(|e| e.to_string())?;
    let params = ScoreParams {
        bpm,
        ..ScoreParams::default()
    };
    let results = pipeline::score_manifest(&test, &bank, &params).map_err(|e| e.to_string())?;
    Ok(Run { test, results })
}

fn class_means(run: &Run) -> (f64, f64) {
    let mean = |anom: bool| {
        let v: Vec<f64> = run
            .test
            .samples
            .iter()
            .zip(&run.results)
            .filter(|(s, _)| s.is_anomalous() == anom)
            .map(|(_, r)| r.image_score)
            .collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    (mean(true), mean(false))
}

fn single_thread<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(f)
}

fn end_to_end() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let start = Instant::now();
    let (image, pixel) = single_thread(|| -> Result<(f64, f64), String> {
        let run = synth_and_score(&SynthSpec::default(), dir.path(), BpmParams::default())?;
        let image = pipeline::image_auroc(&run.test, &run.results).map_err(|e| e.to_string())?;
        let maps = pipeline::heatmaps(&run.test, &run.results, 4.0).map_err(|e| e.to_string())?;
        let pixel = pipeline::manifest_pixel_auroc(&run.test, &maps).map_err(|e| e.to_string())?;
        Ok((image, pixel))
    })?;
    let secs = start.elapsed().as_secs_f64();
    ensure(image == 1.0 && pixel >= 0.99 && secs < 30.0, || {
        format!("image {image:.6}, pixel {pixel:.6}, {secs:.1}s")
    })?;
    Ok(format!("image AUROC {image:.6}, pixel AUROC {pixel:.6}, {secs:.1}s on one thread"))
}

fn bpm_mechanism() -> Outcome {
    let mut hard_ok = 0;
    let mut soft_wins = 0;
    let mut worst_hard = 0f64;
    let mut details = Vec::new();
    for seed in 0..20 {
        let spec = SynthSpec {
            anomaly_region: AnomalyRegion::Background,
            background_fraction: 0.85,
            seed,
            ..SynthSpec::default()
        };
        let hard_dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let soft_dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let hard = synth_and_score(&spec, hard_dir.path(), BpmParams::default())?;
        let soft = synth_and_score(
            &spec,
            soft_dir.path(),
            BpmParams {
                soft_mask: true,
                ..BpmParams::default()
            },
        )?;
        let (ha, hn) = class_means(&hard);
        let (sa, sn) = class_means(&soft);
        // Relative separation, since soft weighting rescales every distance.
        let (hard_sep, soft_sep) = ((ha - hn) / hn, (sa - sn) / sn);
        worst_hard = worst_hard.max(hard_sep.abs());
        if hard_sep.abs() <= 0.1 {
            hard_ok += 1;
        }
        if soft_sep > hard_sep {
            soft_wins += 1;
        }
        details.push(format!("{seed}:{hard_sep:+.3}/{soft_sep:+.3}"));
    }
    let summary = format!(
        "hard within 10% in {hard_ok}/20 (worst {worst_hard:.3}); soft separation larger in {soft_wins}/20 [seed:hard/soft {}]",
        details.join(" ")
    );
    ensure(hard_ok == 20 && soft_wins >= 18, || summary.clone())?;
    Ok(summary)
}

// ---------------------------------------------------------------- CLI driven

fn cli(args: &[&str]) -> Result<String, String> {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let code = run(std::iter::once("patchbank").chain(args.iter().copied()), &mut out, &mut err);
    if code != EXIT_OK {
        return Err(format!("{args:?} exited {code}: {}", String::from_utf8_lossy(&err)));
    }
    Ok(String::from_utf8(out).unwrap())
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_spec(dir: &Path, spec: &SynthSpec) -> PathBuf {
    let path = dir.join("spec.json");
    fs::write(&path, serde_json::to_string(spec).unwrap()).unwrap();
    path
}

fn k_sweep() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let spec = write_spec(dir.path(), &SynthSpec::default());
    let data = dir.path().join("data");
    cli(&["synth", "--spec", p(&spec), "--out", p(&data)])?;
    let bank = dir.path().join("bank.uftb");
    cli(&["build-bank", "--manifest", p(&data.join("train.json")), "--out", p(&bank)])?;
    let csv = cli(&[
        "sweep", "--param", "k-ratio", "--values", "0.1,1,5,20,100", "--manifest", p(&data.join("test.json")),
        "--bank", p(&bank),
    ])?;
    let rows: BTreeMap<String, f64> = csv
        .lines()
        .skip(1)
        .map(|l| {
            let (k, a) = l.split_once(',').unwrap();
            (k.to_string(), a.parse().unwrap())
        })
        .collect();
    let (at5, at01) = (rows["5"], rows["0.1"]);
    let line = csv.lines().skip(1).collect::<Vec<_>>().join(" ");
    ensure(at5 >= at01 && at5 >= 0.99, || format!("k=5 {at5}, k=0.1 {at01}: {line}"))?;
    Ok(format!("value,auroc rows: {line}"))
}

fn type_ids(m: &DatasetManifest) -> Vec<usize> {
    m.samples
        .iter()
        .map(|s| s.anomaly_type.as_deref().map_or(usize::MAX, |t| t["type_".len()..].parse().unwrap()))
        .collect()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn clustering() -> Outcome {
    let (mut nmis, mut f1s, mut all_nmis) = (Vec::new(), Vec::new(), Vec::new());
    let mut all_lower = 0;
    for seed in 0..10 {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let spec = SynthSpec {
            n_normal_test: 0,
            n_anomalous_test: 30,
            n_anomaly_types: 3,
            seed: 100 + seed,
            ..SynthSpec::default()
        };
        let run = synth_and_score(&spec, dir.path(), BpmParams::default())?;
        let truth = type_ids(&run.test);
        let fit = |pooling| {
            let params = ClusterParams {
                pooling,
                num_clusters: 3,
                seed,
                normalize: false,
                l2_normalize_layers: false,
                max_iters: DEFAULT_MAX_ITERS,
            };
            pipeline::cluster_samples(&run.test, &run.results, &params).map_err(|e| e.to_string())
        };
        let topk = fit(Pooling::TopK)?.assignments;
        let all = fit(Pooling::All)?.assignments;
        let (n_top, n_all) = (nmi(&truth, &topk).unwrap(), nmi(&truth, &all).unwrap());
        nmis.push(n_top);
        all_nmis.push(n_all);
        f1s.push(hungarian_f1(&truth, &topk).unwrap());
        if n_all < n_top {
            all_lower += 1;
        }
    }
    let (mn, mf, ma) = (median(nmis), median(f1s), median(all_nmis));
    let summary = format!("median top-k NMI {mn:.3}, F1 {mf:.3}; median all-pool NMI {ma:.3}, lower in {all_lower}/10");
    ensure(mn >= 0.9 && mf >= 0.9 && all_lower >= 8, || summary.clone())?;
    Ok(summary)
}

fn snapshot(paths: &[PathBuf]) -> Vec<(PathBuf, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack: Vec<PathBuf> = paths.to_vec();
    while let Some(path) = stack.pop() {
        if path.is_dir() {
            for entry in fs::read_dir(&path).unwrap() {
                stack.push(entry.unwrap().path());
            }
        } else if path.exists() {
            files.push((path.clone(), fs::read(&path).unwrap()));
        }
    }
    files.sort();
    files
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    let spec = write_spec(
        d,
        &SynthSpec {
            n_normal_train: 8,
            n_normal_test: 6,
            n_anomalous_test: 6,
            ..SynthSpec::default()
        },
    );
    let data = d.join("data");
    let (train, test) = (data.join("train.json"), data.join("test.json"));
    let (bank, bank2, merged) = (d.join("bank.uftb"), d.join("bank2.uftb"), d.join("merged.uftb"));
    let (scores, heat, assign) = (d.join("scores.json"), d.join("heat"), d.join("assign.json"));
    let steps: Vec<(Vec<String>, Vec<PathBuf>)> = vec![
        (vec!["synth", "--spec", p(&spec), "--out", p(&data)], vec![data.clone()]),
        (vec!["build-bank", "--manifest", p(&train), "--out", p(&bank), "--coreset-ratio", "0.1"], vec![bank.clone()]),
        (vec!["build-bank", "--manifest", p(&train), "--out", p(&bank2), "--seed", "7"], vec![bank2.clone()]),
        (
            vec!["merge-banks", "--bank", p(&bank), p(&bank2), "--out", p(&merged), "--coreset-ratio", "0.5"],
            vec![merged.clone()],
        ),
        (
            vec!["score", "--bank", p(&bank), "--manifest", p(&test), "--out", p(&scores), "--heatmaps", p(&heat)],
            vec![scores.clone(), heat.clone()],
        ),
        (
            vec!["cluster", "--bank", p(&bank), "--manifest", p(&test), "--num-clusters", "3", "--out", p(&assign)],
            vec![assign.clone()],
        ),
        (
            vec!["eval", "--scores", p(&scores), "--manifest", p(&test), "--metrics", "auroc,pixel-auroc", "--heatmaps", p(&heat)],
            vec![],
        ),
        (vec!["eval-cluster", "--assignments", p(&assign), "--manifest", p(&test)], vec![]),
        (
            vec!["sweep", "--param", "lambda", "--values", "0.05,0.1", "--manifest", p(&test), "--train", p(&train), "--pixel"],
            vec![],
        ),
        (
            vec!["sweep", "--param", "kernel-size", "--values", "3,7", "--manifest", p(&test), "--train", p(&train)],
            vec![],
        ),
        (vec!["sweep", "--param", "k-ratio", "--values", "1,5", "--manifest", p(&test), "--bank", p(&bank)], vec![]),
    ]
    .into_iter()
    .map(|(a, o)| (a.into_iter().map(String::from).collect(), o))
    .collect();
    let mut names = Vec::new();
    for (args, outputs) in &steps {
        let argv: Vec<&str> = args.iter().map(String::as_str).collect();
        let first = (cli(&argv)?, snapshot(outputs));
        let second = (cli(&argv)?, snapshot(outputs));
        ensure(first == second, || format!("{} output changed between runs", args[0]))?;
        names.push(args[0].clone());
    }
    names.dedup();
    Ok(format!("byte-identical reruns: {}", names.join(", ")))
}

fn low_shot() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let spec = write_spec(
        dir.path(),
        &SynthSpec {
            n_normal_train: 1,
            ..SynthSpec::default()
        },
    );
    let data = dir.path().join("data");
    cli(&["synth", "--spec", p(&spec), "--out", p(&data)])?;
    let bank = dir.path().join("bank.uftb");
    let summary = cli(&["build-bank", "--manifest", p(&data.join("train.json")), "--out", p(&bank)])?;
    let scores = cli(&["score", "--bank", p(&bank), "--manifest", p(&data.join("test.json"))])?;
    let parsed: serde_json::Value = serde_json::from_str(&scores).map_err(|e| e.to_string())?;
    let n = parsed.as_array().map_or(0, Vec::len);
    ensure(n == 40, || format!("expected 40 scored samples, got {n}"))?;
    let count: serde_json::Value = serde_json::from_str(&summary).unwrap();
    Ok(format!("1 training image -> bank of {} vectors; 40 test samples scored", count["count"]))
}

fn main() {
    let criteria: Vec<(&str, fn() -> Outcome)> = vec![
        ("oracle equivalence (nearest distances)", oracle_equivalence),
        ("top-k score exactness", topk_exact),
        ("coreset quality", coreset_quality),
        ("metric oracles", metric_oracles),
        ("attention smoothing", smoothing),
        ("end-to-end synthetic detection", end_to_end),
        ("masking mechanism", bpm_mechanism),
        ("k-sweep shape", k_sweep),
        ("clustering", clustering),
        ("determinism", determinism),
        ("low-shot path", low_shot),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("[PASS] {name} ({secs:.1}s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("[FAIL] {name} ({secs:.1}s): {detail}");
            }
        }
    }
    println!("acceptance: {} failed", failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
