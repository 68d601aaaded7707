//! Evaluation mathematics: ranking metrics (AUROC / AUPR, binary and
//! macro one-vs-rest), VQA text metrics, BLEU, multi-seed aggregation
//! with normal-approximation confidence intervals, and two-sided t-tests.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Area under the ROC curve via the rank statistic (tie-corrected
/// Mann-Whitney): equals P(score⁺ > score⁻) + ½·P(tie).
pub fn roc_auc_binary(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_binary_inputs(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Metric("AUROC undefined: only one class present".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    // Average ranks across tied groups (1-based ranks).
    let mut rank = vec![0.0f64; scores.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg = (i + 1 + j + 1) as f64 / 2.0;
        for &k in &idx[i..=j] {
            rank[k] = avg;
        }
        i = j + 1;
    }
    let rank_sum_pos: f64 =
        labels.iter().zip(&rank).filter(|(&l, _)| l == 1).map(|(_, &r)| r).sum();
    let auc = (rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0) / (n_pos * n_neg) as f64;
    Ok(auc)
}

/// Area under the precision-recall curve by a descending-score sweep with
/// step-wise (right-continuous) interpolation; tied scores move as one
/// threshold step.
pub fn pr_auc_binary(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_binary_inputs(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    if n_pos == 0 {
        return Err(Error::Metric("AUPR undefined: no positive samples".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut prev_recall = 0.0;
    let mut area = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        for &k in &idx[i..=j] {
            if labels[k] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        let recall = tp as f64 / n_pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j + 1;
    }
    Ok(area)
}

fn check_binary_inputs(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::Invalid(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::Invalid("scores must be finite".into()));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::Invalid("binary labels must be 0 or 1".into()));
    }
    Ok(())
}

/// Ground-truth layout for a prediction set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Labels {
    /// One class index per sample.
    Single(Vec<usize>),
    /// One multi-hot row (0/1 per class) per sample.
    MultiHot(Vec<Vec<u8>>),
}

/// Per-sample class scores plus ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    /// `[num_samples][num_classes]` scores.
    pub scores: Vec<Vec<f64>>,
    pub labels: Labels,
    pub class_names: Vec<String>,
}

impl PredictionSet {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.num_classes();
        if k == 0 {
            return Err(Error::Invalid("prediction set needs at least one class".into()));
        }
        for row in &self.scores {
            if row.len() != k {
                return Err(Error::Invalid(format!(
                    "score row length {} != {k} classes",
                    row.len()
                )));
            }
        }
        match &self.labels {
            Labels::Single(ls) => {
                if ls.len() != self.scores.len() {
                    return Err(Error::Invalid("label/score count mismatch".into()));
                }
                if ls.iter().any(|&l| l >= k) {
                    return Err(Error::Invalid("label index out of range".into()));
                }
            }
            Labels::MultiHot(rows) => {
                if rows.len() != self.scores.len() {
                    return Err(Error::Invalid("label/score count mismatch".into()));
                }
                for r in rows {
                    if r.len() != k || r.iter().any(|&v| v > 1) {
                        return Err(Error::Invalid("multi-hot rows must be 0/1 of class count".into()));
                    }
                }
            }
        }
        Ok(())
    }

    /// One-vs-rest binarized labels for class `k`.
    pub fn binary_labels_for(&self, k: usize) -> Vec<u8> {
        match &self.labels {
            Labels::Single(ls) => ls.iter().map(|&l| u8::from(l == k)).collect(),
            Labels::MultiHot(rows) => rows.iter().map(|r| r[k]).collect(),
        }
    }

    pub fn class_scores(&self, k: usize) -> Vec<f64> {
        self.scores.iter().map(|r| r[k]).collect()
    }
}

/// Macro average of a per-class metric: unweighted mean over evaluable
/// classes; classes where the metric is undefined are reported as skipped.
pub struct MacroResult {
    pub value: f64,
    pub per_class: Vec<Option<f64>>,
    pub skipped: Vec<usize>,
}

pub fn macro_metric(
    set: &PredictionSet,
    metric: impl Fn(&[f64], &[u8]) -> Result<f64>,
) -> Result<MacroResult> {
    set.validate()?;
    let mut per_class = Vec::with_capacity(set.num_classes());
    let mut skipped = Vec::new();
    for k in 0..set.num_classes() {
        let scores = set.class_scores(k);
        let labels = set.binary_labels_for(k);
        match metric(&scores, &labels) {
            Ok(v) => per_class.push(Some(v)),
            Err(_) => {
                per_class.push(None);
                skipped.push(k);
            }
        }
    }
    let vals: Vec<f64> = per_class.iter().flatten().copied().collect();
    if vals.is_empty() {
        return Err(Error::Metric("no class is evaluable".into()));
    }
    Ok(MacroResult {
        value: vals.iter().sum::<f64>() / vals.len() as f64,
        per_class,
        skipped,
    })
}

pub fn macro_auroc(set: &PredictionSet) -> Result<MacroResult> {
    macro_metric(set, roc_auc_binary)
}

pub fn macro_aupr(set: &PredictionSet) -> Result<MacroResult> {
    macro_metric(set, pr_auc_binary)
}

/// Lowercase, strip punctuation (non-alphanumeric → space), collapse
/// whitespace; returns the token list.
pub fn normalize_tokens(s: &str) -> Vec<String> {
    let cleaned: String = s
        .to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect();
    cleaned.split_whitespace().map(str::to_string).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VqaTextMetrics {
    pub exact_match: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Exact match plus token-multiset precision/recall/F1 on normalized text.
/// Empty vs empty counts as a perfect answer; empty vs non-empty scores 0.
pub fn vqa_text_metrics(prediction: &str, reference: &str) -> VqaTextMetrics {
    let p = normalize_tokens(prediction);
    let r = normalize_tokens(reference);
    let exact_match = f64::from(p == r);
    if p.is_empty() && r.is_empty() {
        return VqaTextMetrics { exact_match: 1.0, precision: 1.0, recall: 1.0, f1: 1.0 };
    }
    let mut ref_counts: BTreeMap<&str, usize> = BTreeMap::new();
    for t in &r {
        *ref_counts.entry(t).or_insert(0) += 1;
    }
    let mut overlap = 0usize;
    for t in &p {
        if let Some(c) = ref_counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    let precision = if p.is_empty() { 0.0 } else { overlap as f64 / p.len() as f64 };
    let recall = if r.is_empty() { 0.0 } else { overlap as f64 / r.len() as f64 };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    VqaTextMetrics { exact_match, precision, recall, f1 }
}

fn ngram_counts<'a>(tokens: &[&'a str], n: usize) -> BTreeMap<Vec<&'a str>, usize> {
    let mut counts = BTreeMap::new();
    if tokens.len() >= n {
        for window in tokens.windows(n) {
            *counts.entry(window.to_vec()).or_insert(0) += 1;
        }
    }
    counts
}

/// BLEU-1..max_n with clipped modified n-gram precisions, geometric mean,
/// and brevity penalty `min(1, exp(1 − ref_len/pred_len))`. No smoothing:
/// a zero n-gram precision zeroes every order that includes it. The
/// effective reference length is the closest to the prediction length
/// (ties resolved toward the shorter reference). Tokens are whitespace
/// separated; no case folding is applied.
pub fn bleu(prediction: &str, references: &[&str], max_n: usize) -> Result<Vec<f64>> {
    if !(1..=4).contains(&max_n) {
        return Err(Error::Invalid(format!("bleu: max_n {max_n} must be in 1..=4")));
    }
    if references.is_empty() {
        return Err(Error::Invalid("bleu: need at least one reference".into()));
    }
    let pred: Vec<&str> = prediction.split_whitespace().collect();
    if pred.is_empty() {
        return Ok(vec![0.0; max_n]);
    }
    let refs: Vec<Vec<&str>> = references.iter().map(|r| r.split_whitespace().collect()).collect();
    let pred_len = pred.len();
    let ref_len = refs
        .iter()
        .map(|r| r.len())
        .min_by_key(|&l| (l.abs_diff(pred_len), l))
        .expect("non-empty references");

    let mut precisions = Vec::with_capacity(max_n);
    for n in 1..=max_n {
        let pred_counts = ngram_counts(&pred, n);
        let total: usize = pred_counts.values().sum();
        if total == 0 {
            precisions.push(0.0);
            continue;
        }
        let mut clipped = 0usize;
        for (gram, &count) in &pred_counts {
            let best_ref = refs
                .iter()
                .map(|r| ngram_counts(r, n).get(gram).copied().unwrap_or(0))
                .max()
                .unwrap_or(0);
            clipped += count.min(best_ref);
        }
        precisions.push(clipped as f64 / total as f64);
    }

    let bp = (1.0 - ref_len as f64 / pred_len as f64).exp().min(1.0);
    let mut out = Vec::with_capacity(max_n);
    for n in 1..=max_n {
        if precisions[..n].iter().any(|&p| p == 0.0) {
            out.push(0.0);
        } else {
            let log_mean = precisions[..n].iter().map(|p| p.ln()).sum::<f64>() / n as f64;
            out.push(bp * log_mean.exp());
        }
    }
    Ok(out)
}

/// Mean and 95% confidence half-width (1.96 × standard error, sample
/// standard deviation with the n−1 denominator) over per-seed values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub ci_half_width: f64,
    pub std_err: f64,
    pub n: usize,
}

pub fn aggregate_runs(values: &[f64]) -> Result<Aggregate> {
    if values.is_empty() {
        return Err(Error::Metric("aggregate: empty value list".into()));
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let std_err = if n > 1 {
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt()
    } else {
        0.0
    };
    Ok(Aggregate { mean, ci_half_width: 1.96 * std_err, std_err, n })
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Two-sided p-value for a t statistic with `df` degrees of freedom,
/// through the regularized incomplete beta function.
fn t_two_sided_p(t: f64, df: f64) -> f64 {
    let x = df / (df + t * t);
    statrs::function::beta::beta_reg(df / 2.0, 0.5, x).clamp(0.0, 1.0)
}

/// Welch's unpaired two-sample t-test (unequal variances,
/// Welch–Satterthwaite degrees of freedom); returns the two-sided p-value.
/// Degenerate zero-variance inputs use the documented conventions:
/// identical constants → p = 1, unequal constants → p = 0.
pub fn t_test_welch(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Metric("t-test: each sample needs n >= 2".into()));
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let na = a.len() as f64;
    let nb = b.len() as f64;
    let se2 = va / na + vb / nb;
    if se2 == 0.0 {
        return Ok(if ma == mb { 1.0 } else { 0.0 });
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2
        / ((va / na) * (va / na) / (na - 1.0) + (vb / nb) * (vb / nb) / (nb - 1.0));
    Ok(t_two_sided_p(t, df))
}

/// Paired two-sided t-test on per-seed differences (optional variant; the
/// unpaired Welch test is the default elsewhere). Same zero-variance
/// conventions as [`t_test_welch`].
pub fn t_test_paired(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Metric("paired t-test: samples must align".into()));
    }
    if a.len() < 2 {
        return Err(Error::Metric("t-test: each sample needs n >= 2".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let (md, vd) = mean_var(&d);
    if vd == 0.0 {
        return Ok(if md == 0.0 { 1.0 } else { 0.0 });
    }
    let n = d.len() as f64;
    let t = md / (vd / n).sqrt();
    Ok(t_two_sided_p(t, n - 1.0))
}

/// Per-class metric pair inside a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub name: String,
    pub auroc: Option<f64>,
    pub aupr: Option<f64>,
}

/// One evaluated prediction set (single seed).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetEval {
    pub per_class_auroc: Vec<Option<f64>>,
    pub per_class_aupr: Vec<Option<f64>>,
    pub macro_auroc: f64,
    pub macro_aupr: f64,
    pub skipped: Vec<usize>,
}

/// Evaluate one prediction set (macro one-vs-rest AUROC and AUPR).
pub fn evaluate_set(set: &PredictionSet) -> Result<SetEval> {
    let roc = macro_auroc(set)?;
    let pr = macro_aupr(set)?;
    let mut skipped: Vec<usize> = roc.skipped.clone();
    for k in &pr.skipped {
        if !skipped.contains(k) {
            skipped.push(*k);
        }
    }
    skipped.sort_unstable();
    Ok(SetEval {
        per_class_auroc: roc.per_class,
        per_class_aupr: pr.per_class,
        macro_auroc: roc.value,
        macro_aupr: pr.value,
        skipped,
    })
}

/// Aggregated multi-seed evaluation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    /// Per-class values, averaged over the seeds where the class was
    /// evaluable; `None` when it never was.
    pub per_class: Vec<ClassMetrics>,
    pub skipped_classes: Vec<String>,
    pub seed_auroc: Vec<f64>,
    pub seed_aupr: Vec<f64>,
    pub auroc: Aggregate,
    pub aupr: Aggregate,
    /// Two-sided p-value of seed AUROCs against a comparison system.
    pub p_value: Option<f64>,
}

impl EvalReport {
    /// Build a report from per-seed evaluations; `baseline_auroc`
    /// (per-seed values of a comparison system) enables the p-value.
    pub fn from_evals(
        dataset: &str,
        class_names: &[String],
        evals: &[SetEval],
        baseline_auroc: Option<&[f64]>,
    ) -> Result<EvalReport> {
        if evals.is_empty() {
            return Err(Error::Metric("report: no evaluations".into()));
        }
        let k = class_names.len();
        let mean_over = |per: &dyn Fn(&SetEval) -> &Vec<Option<f64>>, class: usize| {
            let vals: Vec<f64> = evals.iter().filter_map(|e| per(e)[class]).collect();
            if vals.is_empty() {
                None
            } else {
                Some(vals.iter().sum::<f64>() / vals.len() as f64)
            }
        };
        let mut per_class = Vec::with_capacity(k);
        let mut skipped_classes = Vec::new();
        for c in 0..k {
            let auroc = mean_over(&|e: &SetEval| &e.per_class_auroc, c);
            let aupr = mean_over(&|e: &SetEval| &e.per_class_aupr, c);
            if auroc.is_none() && aupr.is_none() {
                skipped_classes.push(class_names[c].clone());
            }
            per_class.push(ClassMetrics { name: class_names[c].clone(), auroc, aupr });
        }
        let seed_auroc: Vec<f64> = evals.iter().map(|e| e.macro_auroc).collect();
        let seed_aupr: Vec<f64> = evals.iter().map(|e| e.macro_aupr).collect();
        let p_value = match baseline_auroc {
            Some(base) => Some(t_test_welch(&seed_auroc, base)?),
            None => None,
        };
        Ok(EvalReport {
            dataset: dataset.to_string(),
            per_class,
            skipped_classes,
            auroc: aggregate_runs(&seed_auroc)?,
            aupr: aggregate_runs(&seed_aupr)?,
            seed_auroc,
            seed_aupr,
            p_value,
        })
    }

    /// One results-table row: `AUROC m [lo, hi]  AUPR m [lo, hi]  P value p`.
    pub fn table_row(&self) -> String {
        let fmt = |a: &Aggregate| {
            format!(
                "{:.3} [{:.3}, {:.3}]",
                a.mean,
                a.mean - a.ci_half_width,
                a.mean + a.ci_half_width
            )
        };
        let p = match self.p_value {
            Some(p) => format!("{p:.4}"),
            None => "-".to_string(),
        };
        format!(
            "{}  AUROC {}  AUPR {}  P value {}",
            self.dataset,
            fmt(&self.auroc),
            fmt(&self.aupr),
            p
        )
    }

    /// Multi-line plain-text rendering: the table row plus per-class lines.
    pub fn to_text(&self) -> String {
        let mut out = self.table_row();
        out.push('\n');
        for c in &self.per_class {
            let v = |x: Option<f64>| x.map_or("skipped".to_string(), |v| format!("{v:.3}"));
            out.push_str(&format!(
                "  {}: AUROC {} AUPR {}\n",
                c.name,
                v(c.auroc),
                v(c.aupr)
            ));
        }
        out
    }
}
