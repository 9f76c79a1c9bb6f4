use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use patchbank_core::bank::BankParams;
use patchbank_core::pipeline::{self, ClusterParams};
use patchbank_core::scoring::validate_k_ratio;
use patchbank_core::synth::SynthSpec;
use patchbank_core::{
    ari, auroc, build_bank, hungarian_f1, load_bank, load_manifest, merge_banks, nmi, read_tensor, save_bank,
    topk_score, write_tensor, BpmParams, DatasetManifest, MemoryBank, PixelHeatmap, ScoreParams, ScoreResult, Tensor,
};

use crate::args::{
    BuildBankArgs, ClusterArgs, ClusterMetric, Command, DetectionMetric, EvalArgs, EvalClusterArgs, MaskArgs,
    ScoreArgs, SweepArgs, SweepParam,
};
use crate::output::{fixed6, to_json, Fixed6};
use crate::{CliError, CliResult};

pub(crate) fn dispatch(command: Command, out: &mut dyn Write) -> CliResult<()> {
    match command {
        Command::Synth { spec, out: dir } => synth(&spec, &dir, out),
        Command::BuildBank(a) => build(&a, out),
        Command::MergeBanks {
            banks,
            out: dir,
            coreset_ratio,
            seed,
        } => merge(&banks, &dir, coreset_ratio, seed, out),
        Command::Score(a) => score(&a, out),
        Command::Cluster(a) => cluster(&a, out),
        Command::Eval(a) => eval(&a, out),
        Command::EvalCluster(a) => eval_cluster(&a, out),
        Command::Sweep(a) => sweep(&a, out),
    }
}

fn emit(path: Option<&Path>, text: &str, out: &mut dyn Write) -> CliResult<()> {
    match path {
        Some(p) => fs::write(p, text).map_err(|e| CliError::io(p, e)),
        None => out
            .write_all(text.as_bytes())
            .map_err(|e| CliError::io(Path::new("<stdout>"), e)),
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| CliError::Json {
        path: path.to_path_buf(),
        source,
    })
}

fn check_mask_flags(mask: &MaskArgs) -> CliResult<()> {
    mask.resolve(BpmParams::default()).validate()?;
    Ok(())
}

fn check_sigma(sigma: f64) -> CliResult<()> {
    if sigma >= 0.0 && sigma.is_finite() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("--heatmap-sigma must be >= 0, got {sigma}")))
    }
}

/// Scores as they appear in a scores file, so in-memory evaluations agree
/// with `score` followed by `eval`.
fn reported(score: f64) -> f64 {
    fixed6(score).parse().expect("formatted float parses")
}

#[derive(Serialize)]
struct SynthOut {
    train: String,
    test: String,
}

fn synth(spec_path: &Path, dir: &Path, out: &mut dyn Write) -> CliResult<()> {
    let spec: SynthSpec = read_json(spec_path)?;
    let (train, test) = patchbank_core::generate(&spec, dir)?;
    let text = to_json(&SynthOut {
        train: train.display().to_string(),
        test: test.display().to_string(),
    });
    emit(None, &text, out)
}

#[derive(Serialize)]
struct BankSummary {
    count: usize,
    dim: usize,
    full_size: usize,
    source_samples: usize,
}

impl BankSummary {
    fn of(bank: &MemoryBank) -> Self {
        BankSummary {
            count: bank.len(),
            dim: bank.dim(),
            full_size: bank.meta().full_size,
            source_samples: bank.meta().source_sample_ids.len(),
        }
    }
}

fn bank_params(mask: &MaskArgs, coreset_ratio: f64, seed: u64, l2: bool) -> BankParams {
    BankParams {
        bpm: mask.resolve(BpmParams::default()),
        coreset_ratio,
        seed,
        l2_normalize_layers: l2,
    }
}

fn build(a: &BuildBankArgs, out: &mut dyn Write) -> CliResult<()> {
    let params = bank_params(&a.mask, a.coreset_ratio, a.seed, a.l2_normalize_layers);
    params.validate()?;
    let manifest = load_manifest(&a.manifest, a.strict)?;
    let bank = build_bank(&manifest, &params)?;
    save_bank(&bank, &a.out)?;
    emit(None, &to_json(&BankSummary::of(&bank)), out)
}

fn merge(paths: &[PathBuf], dir: &Path, ratio: f64, seed: u64, out: &mut dyn Write) -> CliResult<()> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(CliError::Usage(format!("--coreset-ratio must be in (0, 1], got {ratio}")));
    }
    let banks = paths.iter().map(load_bank).collect::<Result<Vec<_>, _>>()?;
    let merged = merge_banks(&banks, ratio, seed)?;
    save_bank(&merged, dir)?;
    emit(None, &to_json(&BankSummary::of(&merged)), out)
}

/// Scoring settings: flags override what the bank was built with.
fn score_params(bank: &MemoryBank, mask: &MaskArgs, k_ratio: f64) -> ScoreParams {
    ScoreParams {
        bpm: mask.resolve(bank.meta().bpm_params()),
        k_ratio,
        l2_normalize_layers: bank.meta().l2_normalize_layers,
    }
}

#[derive(Serialize)]
struct ScoreRecord {
    id: String,
    image_score: Fixed6,
    fallback_used: bool,
    topk_indices: Vec<usize>,
}

#[derive(Deserialize)]
struct ScoreRecordIn {
    id: String,
    image_score: f64,
}

fn heatmap_path(dir: &Path, id: &str) -> CliResult<PathBuf> {
    if id.is_empty() || id.contains(['/', '\\']) || id == "." || id == ".." {
        return Err(CliError::Input(format!("sample id {id:?} cannot be used as a file name")));
    }
    Ok(dir.join(format!("{id}.uft1")))
}

fn score(a: &ScoreArgs, out: &mut dyn Write) -> CliResult<()> {
    validate_k_ratio(a.k_ratio)?;
    check_mask_flags(&a.mask)?;
    check_sigma(a.heatmap_sigma)?;
    let bank = load_bank(&a.bank)?;
    let manifest = load_manifest(&a.manifest, a.strict)?;
    let results = pipeline::score_manifest(&manifest, &bank, &score_params(&bank, &a.mask, a.k_ratio))?;
    if let Some(dir) = &a.heatmaps {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let maps = pipeline::heatmaps(&manifest, &results, a.heatmap_sigma)?;
        for (sample, map) in manifest.samples.iter().zip(maps) {
            let tensor = Tensor::new(vec![map.height, map.width], map.values)?;
            write_tensor(heatmap_path(dir, &sample.id)?, &tensor)?;
        }
    }
    let records: Vec<ScoreRecord> = manifest
        .samples
        .iter()
        .zip(results)
        .map(|(s, r)| ScoreRecord {
            id: s.id.clone(),
            image_score: Fixed6(r.image_score),
            fallback_used: r.fallback_used,
            topk_indices: r.topk_indices,
        })
        .collect();
    emit(a.out.as_deref(), &to_json(&records), out)
}

#[derive(Serialize, Deserialize)]
struct Assignment {
    id: String,
    cluster: usize,
}

fn cluster(a: &ClusterArgs, out: &mut dyn Write) -> CliResult<()> {
    validate_k_ratio(a.k_ratio)?;
    check_mask_flags(&a.mask)?;
    if a.num_clusters == 0 || a.max_iters == 0 {
        return Err(CliError::Usage("--num-clusters and --max-iters must be >= 1".into()));
    }
    let bank = load_bank(&a.bank)?;
    let manifest = load_manifest(&a.manifest, a.strict)?;
    let params = score_params(&bank, &a.mask, a.k_ratio);
    let results = pipeline::score_manifest(&manifest, &bank, &params)?;
    let fit = pipeline::cluster_samples(
        &manifest,
        &results,
        &ClusterParams {
            pooling: a.pooling,
            num_clusters: a.num_clusters,
            seed: a.seed,
            normalize: a.normalize,
            l2_normalize_layers: params.l2_normalize_layers,
            max_iters: a.max_iters,
        },
    )?;
    let rows: Vec<Assignment> = manifest
        .samples
        .iter()
        .zip(fit.assignments)
        .map(|(s, cluster)| Assignment {
            id: s.id.clone(),
            cluster,
        })
        .collect();
    emit(a.out.as_deref(), &to_json(&rows), out)
}

#[derive(Serialize, Default)]
struct DetectionOut {
    #[serde(skip_serializing_if = "Option::is_none")]
    auroc: Option<Fixed6>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pixel_auroc: Option<Fixed6>,
}

/// Values keyed by id, reordered to follow the manifest.
fn by_manifest<T: Copy>(manifest: &DatasetManifest, rows: Vec<(String, T)>, what: &str) -> CliResult<Vec<T>> {
    let mut map: HashMap<String, T> = HashMap::with_capacity(rows.len());
    for (id, v) in rows {
        if map.insert(id.clone(), v).is_some() {
            return Err(CliError::Input(format!("{what}: duplicate id {id:?}")));
        }
    }
    let ordered = manifest
        .samples
        .iter()
        .map(|s| {
            map.remove(&s.id)
                .ok_or_else(|| CliError::Input(format!("{what}: no entry for sample {:?}", s.id)))
        })
        .collect::<CliResult<Vec<T>>>()?;
    if let Some(extra) = map.keys().min() {
        return Err(CliError::Input(format!("{what}: id {extra:?} is not in the manifest")));
    }
    Ok(ordered)
}

fn load_heatmaps(manifest: &DatasetManifest, dir: &Path) -> CliResult<Vec<PixelHeatmap>> {
    manifest
        .samples
        .iter()
        .map(|s| {
            let path = heatmap_path(dir, &s.id)?;
            let t = read_tensor(&path)?;
            if t.dims() != [manifest.image_h, manifest.image_w] {
                return Err(CliError::Input(format!(
                    "{}: heatmap {:?}, expected [{}, {}]",
                    path.display(),
                    t.dims(),
                    manifest.image_h,
                    manifest.image_w
                )));
            }
            Ok(PixelHeatmap {
                height: manifest.image_h,
                width: manifest.image_w,
                values: t.into_data(),
            })
        })
        .collect()
}

fn eval(a: &EvalArgs, out: &mut dyn Write) -> CliResult<()> {
    if a.metrics.contains(&DetectionMetric::PixelAuroc) && a.heatmaps.is_none() {
        return Err(CliError::Usage("pixel-auroc needs --heatmaps".into()));
    }
    let records: Vec<ScoreRecordIn> = read_json(&a.scores)?;
    let manifest = load_manifest(&a.manifest, false)?;
    let mut result = DetectionOut::default();
    if a.metrics.contains(&DetectionMetric::Auroc) {
        let rows = records.into_iter().map(|r| (r.id, r.image_score)).collect();
        let scores = by_manifest(&manifest, rows, &a.scores.display().to_string())?;
        result.auroc = Some(Fixed6(auroc(&scores, &pipeline::labels(&manifest)?)?));
    }
    if let (true, Some(dir)) = (a.metrics.contains(&DetectionMetric::PixelAuroc), &a.heatmaps) {
        let maps = load_heatmaps(&manifest, dir)?;
        result.pixel_auroc = Some(Fixed6(pipeline::manifest_pixel_auroc(&manifest, &maps)?));
    }
    emit(None, &to_json(&result), out)
}

#[derive(Serialize, Default)]
struct ClusterOut {
    #[serde(skip_serializing_if = "Option::is_none")]
    nmi: Option<Fixed6>,
    #[serde(skip_serializing_if = "Option::is_none")]
    ari: Option<Fixed6>,
    #[serde(skip_serializing_if = "Option::is_none")]
    f1: Option<Fixed6>,
}

/// Label of samples without an anomaly type.
pub const NORMAL_TYPE: &str = "good";

fn eval_cluster(a: &EvalClusterArgs, out: &mut dyn Write) -> CliResult<()> {
    let rows: Vec<Assignment> = read_json(&a.assignments)?;
    let manifest = load_manifest(&a.manifest, false)?;
    let types: HashMap<&str, &str> = manifest
        .samples
        .iter()
        .map(|s| (s.id.as_str(), s.anomaly_type.as_deref().unwrap_or(NORMAL_TYPE)))
        .collect();
    let mut type_ids: BTreeMap<&str, usize> = BTreeMap::new();
    for t in types.values() {
        type_ids.insert(t, 0);
    }
    for (i, v) in type_ids.values_mut().enumerate() {
        *v = i;
    }
    let mut truth = Vec::with_capacity(rows.len());
    let mut pred = Vec::with_capacity(rows.len());
    for row in &rows {
        let t = types.get(row.id.as_str()).ok_or_else(|| {
            CliError::Input(format!("{}: id {:?} is not in the manifest", a.assignments.display(), row.id))
        })?;
        truth.push(type_ids[t]);
        pred.push(row.cluster);
    }
    let mut result = ClusterOut::default();
    for metric in &a.metrics {
        match metric {
            ClusterMetric::Nmi => result.nmi = Some(Fixed6(nmi(&truth, &pred)?)),
            ClusterMetric::Ari => result.ari = Some(Fixed6(ari(&truth, &pred)?)),
            ClusterMetric::F1 => result.f1 = Some(Fixed6(hungarian_f1(&truth, &pred)?)),
        }
    }
    emit(None, &to_json(&result), out)
}

fn check_sweep_values(a: &SweepArgs) -> CliResult<()> {
    for &v in &a.values {
        let ok = match a.param {
            SweepParam::KRatio => validate_k_ratio(v).is_ok(),
            SweepParam::Lambda => (0.0..=1.0).contains(&v),
            SweepParam::KernelSize => v >= 1.0 && v.fract() == 0.0 && (v as usize) % 2 == 1,
        };
        if !ok {
            return Err(CliError::Usage(format!("invalid {:?} value {v}", a.param)));
        }
    }
    Ok(())
}

fn sweep(a: &SweepArgs, out: &mut dyn Write) -> CliResult<()> {
    check_sweep_values(a)?;
    validate_k_ratio(a.k_ratio)?;
    check_mask_flags(&a.mask)?;
    check_sigma(a.heatmap_sigma)?;
    let base_bank = bank_params(&a.mask, a.coreset_ratio, a.seed, a.l2_normalize_layers);
    base_bank.validate()?;
    let needs_train = a.param != SweepParam::KRatio || a.bank.is_none();
    if needs_train && a.train.is_none() {
        return Err(CliError::Usage(format!(
            "sweeping {:?} needs --train{}",
            a.param,
            if a.param == SweepParam::KRatio { " or --bank" } else { "" }
        )));
    }
    let manifest = load_manifest(&a.manifest, false)?;
    let train = match (&a.train, needs_train) {
        (Some(path), true) => Some(load_manifest(path, false)?),
        _ => None,
    };
    let labels = pipeline::labels(&manifest)?;

    let mut csv = String::from(if a.pixel { "value,auroc,pixel_auroc\n" } else { "value,auroc\n" });
    let mut row = |value: f64, results: &[ScoreResult], image_scores: &[f64]| -> CliResult<()> {
        let reported: Vec<f64> = image_scores.iter().map(|&s| reported(s)).collect();
        csv.push_str(&format!("{value},{}", fixed6(auroc(&reported, &labels)?)));
        if a.pixel {
            let maps = pipeline::heatmaps(&manifest, results, a.heatmap_sigma)?;
            csv.push_str(&format!(",{}", fixed6(pipeline::manifest_pixel_auroc(&manifest, &maps)?)));
        }
        csv.push('\n');
        Ok(())
    };

    match a.param {
        SweepParam::KRatio => {
            // Nearest-neighbour distances do not depend on k: score once and
            // re-aggregate. An existing bank is only read.
            let bank = match (&a.bank, &train) {
                (Some(path), _) => load_bank(path)?,
                (None, Some(train)) => build_bank(train, &base_bank)?,
                (None, None) => unreachable!("checked above"),
            };
            let params = score_params(&bank, &a.mask, a.k_ratio);
            let results = pipeline::score_manifest(&manifest, &bank, &params)?;
            for &k in &a.values {
                let scores = results
                    .iter()
                    .map(|r| topk_score(&r.patch_scores, k).map(|t| t.score))
                    .collect::<Result<Vec<f64>, _>>()?;
                row(k, &results, &scores)?;
            }
        }
        SweepParam::Lambda | SweepParam::KernelSize => {
            let train = train.as_ref().expect("checked above");
            for &v in &a.values {
                let mut params = base_bank.clone();
                match a.param {
                    SweepParam::Lambda => params.bpm.lambda = v as f32,
                    _ => params.bpm.kernel_size = v as usize,
                }
                let bank = build_bank(train, &params)?;
                let score = ScoreParams {
                    bpm: params.bpm,
                    k_ratio: a.k_ratio,
                    l2_normalize_layers: a.l2_normalize_layers,
                };
                let results = pipeline::score_manifest(&manifest, &bank, &score)?;
                let scores: Vec<f64> = results.iter().map(|r| r.image_score).collect();
                row(v, &results, &scores)?;
            }
        }
    }
    emit(a.out.as_deref(), &csv, out)
}
