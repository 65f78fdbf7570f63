//! Metrics, patient-grouped stratified folds and cross-validation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bag_store::CohortManifest;
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::rng;
use crate::trainer::{predict, train, EpochLog, PreparedSlide, RunOutput};

/// Probability threshold for hard predictions.
pub const THRESHOLD: f64 = 0.5;

pub const METRICS: [&str; 6] = ["auc", "accuracy", "sensitivity", "specificity", "precision", "f1"];

/// Area under the ROC curve as the Mann–Whitney statistic; tied
/// positive/negative pairs count ½.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::LengthMismatch(scores.len(), labels.len()));
    }
    if let Some(&l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::InvalidLabel(l as i64));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidArgument("NaN score".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count() as u64;
    let n_neg = labels.len() as u64 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass);
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the win count, so ties stay integral
    let (mut twice_wins, mut neg_below) = (0u64, 0u64);
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            j += 1;
        }
        let pos = idx[i..j].iter().filter(|&&k| labels[k] == 1).count() as u64;
        let neg = (j - i) as u64 - pos;
        twice_wins += 2 * pos * neg_below + pos * neg;
        neg_below += neg;
        i = j;
    }
    Ok(twice_wins as f64 / (2 * n_pos * n_neg) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

/// Confusion-matrix ratios; `None` where the denominator is zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMetrics {
    pub accuracy: f64,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub precision: Option<f64>,
    pub f1: Option<f64>,
    pub counts: Confusion,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn confusion_metrics(pred: &[u8], labels: &[u8]) -> Result<ConfusionMetrics> {
    if pred.len() != labels.len() {
        return Err(Error::LengthMismatch(pred.len(), labels.len()));
    }
    if pred.is_empty() {
        return Err(Error::InvalidArgument("confusion metrics need at least one item".into()));
    }
    if let Some(&l) = pred.iter().chain(labels).find(|&&l| l > 1) {
        return Err(Error::InvalidLabel(l as i64));
    }
    let mut c = Confusion { tp: 0, fp: 0, tn: 0, fn_: 0 };
    for (&p, &l) in pred.iter().zip(labels) {
        match (p, l) {
            (1, 1) => c.tp += 1,
            (1, 0) => c.fp += 1,
            (0, 0) => c.tn += 1,
            _ => c.fn_ += 1,
        }
    }
    let sensitivity = ratio(c.tp, c.tp + c.fn_);
    let precision = ratio(c.tp, c.tp + c.fp);
    // equals the harmonic mean of precision and sensitivity (0 if either is 0)
    let f1 = match (precision, sensitivity) {
        (Some(_), Some(_)) => ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
        _ => None,
    };
    Ok(ConfusionMetrics {
        accuracy: (c.tp + c.tn) as f64 / pred.len() as f64,
        sensitivity,
        specificity: ratio(c.tn, c.tn + c.fp),
        precision,
        f1,
        counts: c,
    })
}

/// Patient ids per fold; fold i is the validation set of split i.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub folds: Vec<Vec<String>>,
}

impl FoldSplit {
    pub fn k(&self) -> usize {
        self.folds.len()
    }

    pub fn val_patients(&self, fold: usize) -> BTreeSet<&str> {
        self.folds[fold].iter().map(String::as_str).collect()
    }

    pub fn train_patients(&self, fold: usize) -> BTreeSet<&str> {
        self.folds
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != fold)
            .flat_map(|(_, f)| f.iter().map(String::as_str))
            .collect()
    }

    /// Folds taken from the manifest's `fold_id` column, when every row has one.
    pub fn from_manifest(manifest: &CohortManifest) -> Result<Option<Self>> {
        if manifest.is_empty() || manifest.rows().iter().any(|r| r.fold_id.is_none()) {
            return Ok(None);
        }
        let mut by_patient: BTreeMap<&str, usize> = BTreeMap::new();
        for r in manifest.rows() {
            let f = r.fold_id.expect("checked above");
            if let Some(&prev) = by_patient.get(r.patient_id.as_str()) {
                if prev != f {
                    return Err(Error::ManifestParse(format!("patient {} spans folds {prev} and {f}", r.patient_id)));
                }
            }
            by_patient.insert(&r.patient_id, f);
        }
        let ids: BTreeSet<usize> = by_patient.values().copied().collect();
        let k = ids.len();
        if ids.iter().copied().ne(0..k) {
            return Err(Error::ManifestParse("fold_id values must be 0..k-1 without gaps".into()));
        }
        let mut folds = vec![Vec::new(); k];
        for (p, f) in by_patient {
            folds[f].push(p.to_string());
        }
        Ok(Some(Self { folds }))
    }
}

/// Stratified patient-level k-fold split. Each class is shuffled with its own
/// seeded stream and dealt round-robin from a shared random starting fold, so
/// the folds that receive an extra patient of one class also receive the
/// extra patients of the other class first.
pub fn kfold_split_patients(patients: &BTreeMap<String, u8>, k: usize, seed: u64) -> Result<FoldSplit> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("k must be >= 2, got {k}")));
    }
    let mut folds = vec![Vec::new(); k];
    let start = rand::Rng::random_range(&mut rng::derived_rng(seed, &[u64::MAX]), 0..k);
    for class in [0u8, 1] {
        let mut ids: Vec<&String> = patients.iter().filter(|(_, &t)| t == class).map(|(p, _)| p).collect();
        if ids.len() < k {
            return Err(Error::TooFewPatients {
                k,
                detail: format!("class {class} has {} patients", ids.len()),
            });
        }
        ids.shuffle(&mut rng::derived_rng(seed, &[class as u64]));
        for (i, p) in ids.into_iter().enumerate() {
            folds[(start + i) % k].push(p.clone());
        }
    }
    for f in &mut folds {
        f.sort();
    }
    Ok(FoldSplit { folds })
}

pub fn kfold_split(manifest: &CohortManifest, k: usize, seed: u64) -> Result<FoldSplit> {
    kfold_split_patients(&manifest.patient_targets(), k, seed)
}

/// Patient label = majority of its slides' hard predictions; ties go to 1.
pub fn majority_vote<'a>(slide_preds: impl IntoIterator<Item = (&'a str, u8)>) -> BTreeMap<String, u8> {
    let mut votes: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for (patient, pred) in slide_preds {
        let v = votes.entry(patient.to_string()).or_default();
        if pred == 1 {
            v.0 += 1;
        } else {
            v.1 += 1;
        }
    }
    votes
        .into_iter()
        .map(|(p, (pos, neg))| (p, u8::from(pos >= neg)))
        .collect()
}

/// Metrics on one evaluation set. AUC is absent when only one class is present.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub auc: Option<f64>,
    pub accuracy: f64,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub precision: Option<f64>,
    pub f1: Option<f64>,
    pub n: usize,
}

impl FoldMetrics {
    pub fn from_scores(scores: &[f64], labels: &[u8]) -> Result<Self> {
        let pred: Vec<u8> = scores.iter().map(|&s| u8::from(s >= THRESHOLD)).collect();
        let auc = match roc_auc(scores, labels) {
            Ok(a) => Some(a),
            Err(Error::SingleClass) => None,
            Err(e) => return Err(e),
        };
        Ok(Self::from_parts(auc, &confusion_metrics(&pred, labels)?, scores.len()))
    }

    fn from_parts(auc: Option<f64>, c: &ConfusionMetrics, n: usize) -> Self {
        Self {
            auc,
            accuracy: c.accuracy,
            sensitivity: c.sensitivity,
            specificity: c.specificity,
            precision: c.precision,
            f1: c.f1,
            n,
        }
    }

    pub fn get(&self, metric: &str) -> Option<f64> {
        match metric {
            "auc" => self.auc,
            "accuracy" => Some(self.accuracy),
            "sensitivity" => self.sensitivity,
            "specificity" => self.specificity,
            "precision" => self.precision,
            "f1" => self.f1,
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: Option<f64>,
    /// Sample standard deviation (n − 1); absent with fewer than two values.
    pub std: Option<f64>,
    /// Number of folds where the metric was defined.
    pub n: usize,
}

pub fn summarize(values: &[f64]) -> Summary {
    let n = values.len();
    if n == 0 {
        return Summary { mean: None, std: None, n };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = (n >= 2).then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt());
    Summary { mean: Some(mean), std, n }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub folds: Vec<FoldMetrics>,
    pub summary: BTreeMap<String, Summary>,
}

impl MetricsReport {
    pub fn from_folds(folds: Vec<FoldMetrics>) -> Self {
        let summary = METRICS
            .iter()
            .map(|&m| {
                let vals: Vec<f64> = folds.iter().filter_map(|f| f.get(m)).collect();
                (m.to_string(), summarize(&vals))
            })
            .collect();
        Self { folds, summary }
    }

    pub fn mean(&self, metric: &str) -> Option<f64> {
        self.summary.get(metric).and_then(|s| s.mean)
    }

    /// One row per fold plus `mean` and `std` rows.
    pub fn to_csv(&self) -> String {
        let fmt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        let mut out = format!("fold,{},n\n", METRICS.join(","));
        for (i, f) in self.folds.iter().enumerate() {
            let cells: Vec<String> = METRICS.iter().map(|m| fmt(f.get(m))).collect();
            let _ = writeln!(out, "{i},{},{}", cells.join(","), f.n);
        }
        for (label, pick) in [("mean", 0), ("std", 1)] {
            let cells: Vec<String> = METRICS
                .iter()
                .map(|m| {
                    let s = self.summary[*m];
                    fmt(if pick == 0 { s.mean } else { s.std })
                })
                .collect();
            let _ = writeln!(out, "{label},{},", cells.join(","));
        }
        out
    }
}

/// Rows of `mean±std` in percent, one line per named report.
pub fn format_table(rows: &[(&str, &MetricsReport)]) -> String {
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(6).max(6);
    let mut out = format!("{:<width$}", "Method");
    for h in ["AUC", "ACC", "SENS", "SPEC", "PREC", "F1"] {
        let _ = write!(out, " | {h:>13}");
    }
    out.push('\n');
    out.push_str(&"-".repeat(width + 6 * 16));
    out.push('\n');
    for (name, report) in rows {
        let _ = write!(out, "{name:<width$}");
        for m in METRICS {
            let s = report.summary[m];
            let cell = match (s.mean, s.std) {
                (Some(mu), Some(sd)) => format!("{:.2}±{:.2}", 100.0 * mu, 100.0 * sd),
                (Some(mu), None) => format!("{:.2}", 100.0 * mu),
                _ => "n/a".to_string(),
            };
            let _ = write!(out, " | {cell:>13}");
        }
        out.push('\n');
    }
    out
}

/// Out-of-fold prediction for one slide.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlidePrediction {
    pub fold: usize,
    pub slide_id: String,
    pub patient_id: String,
    pub target: u8,
    pub probability: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub slide: MetricsReport,
    pub patient: MetricsReport,
    pub predictions: Vec<SlidePrediction>,
    #[serde(skip)]
    pub logs: Vec<Vec<EpochLog>>,
}

/// Slide-level and majority-vote patient-level metrics for a set of predictions.
pub fn evaluate_predictions(preds: &[SlidePrediction]) -> Result<(FoldMetrics, FoldMetrics)> {
    let scores: Vec<f64> = preds.iter().map(|p| p.probability).collect();
    let labels: Vec<u8> = preds.iter().map(|p| p.target).collect();
    let slide = FoldMetrics::from_scores(&scores, &labels)?;

    let votes = majority_vote(preds.iter().map(|p| (p.patient_id.as_str(), u8::from(p.probability >= THRESHOLD))));
    let mut patient_score: BTreeMap<&str, (f64, usize, u8)> = BTreeMap::new();
    for p in preds {
        let e = patient_score.entry(&p.patient_id).or_insert((0.0, 0, p.target));
        e.0 += p.probability;
        e.1 += 1;
    }
    let mut pp = Vec::new();
    let mut pl = Vec::new();
    let mut ps = Vec::new();
    for (patient, (sum, n, target)) in &patient_score {
        pp.push(votes[*patient]);
        pl.push(*target);
        ps.push(sum / *n as f64);
    }
    // patient AUC ranks by mean slide probability
    let auc = match roc_auc(&ps, &pl) {
        Ok(a) => Some(a),
        Err(Error::SingleClass) => None,
        Err(e) => return Err(e),
    };
    let patient = FoldMetrics::from_parts(auc, &confusion_metrics(&pp, &pl)?, pp.len());
    Ok((slide, patient))
}

/// Trains one model per fold on the other folds' patients and evaluates it on
/// the held-out patients. Folds run in parallel.
pub fn cross_validate(
    slides: &[PreparedSlide],
    split: &FoldSplit,
    cfg: &ExperimentConfig,
    out_dir: Option<&Path>,
) -> Result<CvReport> {
    let per_fold: Vec<(Vec<SlidePrediction>, Vec<EpochLog>)> = (0..split.k())
        .into_par_iter()
        .map(|fold| {
            let val = split.val_patients(fold);
            let (val_slides, train_slides): (Vec<_>, Vec<_>) =
                slides.iter().cloned().partition(|s| val.contains(s.patient_id()));
            if val_slides.is_empty() {
                return Err(Error::InvalidArgument(format!("fold {fold} has no slides")));
            }
            let out = match out_dir {
                Some(dir) => {
                    let fdir = dir.join(format!("fold_{fold}"));
                    std::fs::create_dir_all(&fdir).map_err(|e| Error::io(&fdir, e))?;
                    RunOutput {
                        log_path: Some(fdir.join("train_log.jsonl")),
                        checkpoint_dir: Some(fdir.join("checkpoints")),
                    }
                }
                None => RunOutput::default(),
            };
            let result = train(&train_slides, cfg, &out)?;
            let probs = predict(&result.state.model, &val_slides, cfg)?;
            let preds = val_slides
                .iter()
                .zip(probs)
                .map(|(s, p)| SlidePrediction {
                    fold,
                    slide_id: s.slide_id().to_string(),
                    patient_id: s.patient_id().to_string(),
                    target: s.target(),
                    probability: p,
                })
                .collect();
            Ok((preds, result.log))
        })
        .collect::<Result<_>>()?;

    let mut slide_folds = Vec::new();
    let mut patient_folds = Vec::new();
    let mut predictions = Vec::new();
    let mut logs = Vec::new();
    for (preds, log) in per_fold {
        let (s, p) = evaluate_predictions(&preds)?;
        slide_folds.push(s);
        patient_folds.push(p);
        predictions.extend(preds);
        logs.push(log);
    }
    Ok(CvReport {
        slide: MetricsReport::from_folds(slide_folds),
        patient: MetricsReport::from_folds(patient_folds),
        predictions,
        logs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_auc(scores: &[f64], labels: &[u8]) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for (i, &si) in scores.iter().enumerate() {
            for (j, &sj) in scores.iter().enumerate() {
                if labels[i] == 1 && labels[j] == 0 {
                    den += 1.0;
                    if si > sj {
                        num += 1.0;
                    } else if si == sj {
                        num += 0.5;
                    }
                }
            }
        }
        num / den
    }

    #[test]
    fn auc_examples() {
        assert_eq!(roc_auc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.3; 6], &[0, 1, 0, 1, 1, 0]).unwrap(), 0.5);
        assert_eq!(roc_auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap(), 0.75);
        assert!(matches!(roc_auc(&[0.1, 0.2], &[1, 1]), Err(Error::SingleClass)));
        assert!(matches!(roc_auc(&[0.1], &[1, 0]), Err(Error::LengthMismatch(1, 2))));
    }

    #[test]
    fn auc_matches_pair_counting() {
        let mut r = rng::rng_from(5);
        for _ in 0..200 {
            let n = rand::Rng::random_range(&mut r, 2..60);
            let scores: Vec<f64> = (0..n).map(|_| (rand::Rng::random_range(&mut r, 0..10) as f64) / 10.0).collect();
            let mut labels: Vec<u8> = (0..n).map(|_| rand::Rng::random_range(&mut r, 0..2)).collect();
            labels[0] = 0;
            labels[1] = 1;
            assert_eq!(roc_auc(&scores, &labels).unwrap(), brute_auc(&scores, &labels));
        }
    }

    proptest! {
        #[test]
        fn auc_is_rank_invariant(scores in proptest::collection::vec(-5.0f64..5.0, 4..40), seed in 0u64..1000) {
            let mut r = rng::rng_from(seed);
            let mut labels: Vec<u8> = scores.iter().map(|_| rand::Rng::random_range(&mut r, 0..2)).collect();
            labels[0] = 0;
            labels[1] = 1;
            let base = roc_auc(&scores, &labels).unwrap();
            let mapped: Vec<f64> = scores.iter().map(|s| s.exp() * 3.0 + 1.0).collect();
            prop_assert_eq!(base, roc_auc(&mapped, &labels).unwrap());
            let mut sorted = scores.clone();
            sorted.sort_by(f64::total_cmp);
            if sorted.windows(2).all(|w| w[0] != w[1]) {
                let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
                prop_assert!((base + roc_auc(&neg, &labels).unwrap() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn confusion_examples() {
        let m = confusion_metrics(&[1, 0, 1, 0], &[1, 0, 1, 0]).unwrap();
        assert_eq!(
            (m.accuracy, m.sensitivity, m.specificity, m.precision, m.f1),
            (1.0, Some(1.0), Some(1.0), Some(1.0), Some(1.0))
        );
        // TP=1, FN=1, TN=2, FP=0
        let m = confusion_metrics(&[1, 0, 0, 0], &[1, 1, 0, 0]).unwrap();
        assert_eq!(m.sensitivity, Some(0.5));
        assert_eq!(m.specificity, Some(1.0));
        assert_eq!(m.precision, Some(1.0));
        assert_eq!(m.accuracy, 0.75);
        assert!((m.f1.unwrap() - 2.0 / 3.0).abs() < 1e-15);
        let m = confusion_metrics(&[0, 0, 0], &[1, 0, 1]).unwrap();
        assert_eq!(m.precision, None);
        assert_eq!(m.f1, None);
        assert!(matches!(confusion_metrics(&[0], &[0, 1]), Err(Error::LengthMismatch(1, 2))));
    }

    #[test]
    fn f1_is_harmonic_mean() {
        let mut r = rng::rng_from(8);
        for _ in 0..500 {
            let n = rand::Rng::random_range(&mut r, 1..30);
            let p: Vec<u8> = (0..n).map(|_| rand::Rng::random_range(&mut r, 0..2)).collect();
            let l: Vec<u8> = (0..n).map(|_| rand::Rng::random_range(&mut r, 0..2)).collect();
            let m = confusion_metrics(&p, &l).unwrap();
            if let (Some(pr), Some(se)) = (m.precision, m.sensitivity) {
                let h = if pr + se > 0.0 { 2.0 * pr * se / (pr + se) } else { 0.0 };
                assert!((m.f1.unwrap() - h).abs() < 1e-12);
            }
        }
    }

    fn patients(n_pos: usize, n_neg: usize) -> BTreeMap<String, u8> {
        (0..n_pos)
            .map(|i| (format!("pos{i}"), 1))
            .chain((0..n_neg).map(|i| (format!("neg{i}"), 0)))
            .collect()
    }

    #[test]
    fn exact_stratification() {
        let p = patients(5, 5);
        let split = kfold_split_patients(&p, 5, 3).unwrap();
        for f in &split.folds {
            assert_eq!(f.len(), 2);
            assert_eq!(f.iter().filter(|id| p[*id] == 1).count(), 1);
        }
        assert_eq!(split, kfold_split_patients(&p, 5, 3).unwrap());
        assert!(matches!(kfold_split_patients(&patients(4, 9), 5, 0), Err(Error::TooFewPatients { .. })));
    }

    #[test]
    fn majority_votes() {
        let v = majority_vote([("a", 1), ("a", 1), ("a", 0), ("b", 0), ("c", 1), ("c", 0)]);
        assert_eq!(v["a"], 1);
        assert_eq!(v["b"], 0);
        assert_eq!(v["c"], 1);
    }

    #[test]
    fn summary_statistics() {
        let s = summarize(&[0.5, 0.5, 0.5]);
        assert_eq!((s.mean, s.std), (Some(0.5), Some(0.0)));
        let s = summarize(&[1.0, 3.0]);
        assert_eq!((s.mean, s.std), (Some(2.0), Some(2f64.sqrt())));
        assert_eq!(summarize(&[]).mean, None);
    }

    #[test]
    fn report_csv_has_fold_and_aggregate_rows() {
        let f = FoldMetrics::from_scores(&[0.9, 0.2, 0.6, 0.4], &[1, 0, 0, 1]).unwrap();
        let r = MetricsReport::from_folds(vec![f.clone(), f]);
        let csv = r.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 5);
        assert!(lines[0].starts_with("fold,auc"));
        assert!(lines[3].starts_with("mean,"));
        assert_eq!(r.summary["auc"].std, Some(0.0));
        assert!(format_table(&[("ACMIL", &r)]).contains("ACMIL"));
    }
}
