//! Classification metrics (per-class and macro F1 / AUC) and a
//! finding-agreement proxy for generated reports.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::alignment::{AlignError, AlignModel, FindingSet};
use crate::datagen::Example;

/// F1 decision threshold on class scores.
pub const F1_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricError {
    #[error("metric undefined: {0}")]
    Undefined(String),
    #[error("{scores} scores but {labels} labels")]
    Length { scores: usize, labels: usize },
    #[error(transparent)]
    Model(#[from] AlignError),
}

/// Mann-Whitney AUC: the fraction of (positive, negative) pairs ranked
/// correctly, ties counting one half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64, MetricError> {
    if scores.len() != labels.len() {
        return Err(MetricError::Length { scores: scores.len(), labels: labels.len() });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(MetricError::Undefined("NaN score".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricError::Undefined("AUC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of 1-based mid-ranks of the positives.
    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid_rank = (i + j) as f64 / 2.0 + 1.0;
        let pos_in_group = order[i..=j].iter().filter(|&&k| labels[k]).count();
        pos_rank_sum += mid_rank * pos_in_group as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((pos_rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// F1 of the predictions `score >= threshold`; 0 when precision + recall is 0.
pub fn f1(scores: &[f64], labels: &[bool], threshold: f64) -> Result<f64, MetricError> {
    if scores.len() != labels.len() {
        return Err(MetricError::Length { scores: scores.len(), labels: labels.len() });
    }
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => {}
        }
    }
    // 2PR/(P+R) simplifies to 2tp/(2tp+fp+fn).
    let denom = 2 * tp + fp + fneg;
    Ok(if tp == 0 { 0.0 } else { 2.0 * tp as f64 / denom as f64 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: String,
    pub name: String,
    pub n_positive: usize,
    pub f1: f64,
    /// Missing when the class has no positives or no negatives.
    pub auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub per_class: Vec<ClassMetrics>,
    pub macro_f1: f64,
    /// Mean over classes with a defined AUC.
    pub macro_auc: Option<f64>,
    pub n_examples: usize,
    pub warnings: Vec<String>,
}

impl EvalResult {
    /// Per-class grid with a macro row.
    pub fn table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "   n/a".to_string(), |v| format!("{v:>6.3}"));
        let mut out = format!("{:<8}{:>6}{:>8}{:>8}\n", "class", "n_pos", "F1", "AUC");
        for c in &self.per_class {
            writeln!(out, "{:<8}{:>6}{:>8}{:>8}", c.label, c.n_positive, fmt(Some(c.f1)), fmt(c.auc)).unwrap();
        }
        writeln!(out, "{:<8}{:>6}{:>8}{:>8}", "macro", "", fmt(Some(self.macro_f1)), fmt(self.macro_auc)).unwrap();
        out
    }
}

/// Class scores of `model` on every example, as `(n_examples, n_labels)` rows.
pub fn predict_scores(model: &AlignModel, dataset: &[Example]) -> Result<Vec<Vec<f64>>, MetricError> {
    dataset
        .iter()
        .map(|e| Ok(model.forward(e.image.view())?.classification.scores.to_vec()))
        .collect()
}

/// Per-class and macro metrics from precomputed scores.
pub fn evaluate_scores(
    model_labels: &[(String, String)],
    scores: &[Vec<f64>],
    dataset: &[Example],
) -> Result<EvalResult, MetricError> {
    if scores.len() != dataset.len() {
        return Err(MetricError::Length { scores: scores.len(), labels: dataset.len() });
    }
    let mut per_class = Vec::with_capacity(model_labels.len());
    let mut warnings = Vec::new();
    for (c, (code, name)) in model_labels.iter().enumerate() {
        let s: Vec<f64> = scores.iter().map(|row| row[c]).collect();
        let y: Vec<bool> = dataset.iter().map(|e| e.labels.contains(&c)).collect();
        let n_positive = y.iter().filter(|&&v| v).count();
        let auc = match auc(&s, &y) {
            Ok(v) => Some(v),
            Err(MetricError::Undefined(why)) => {
                let w = format!("class {code}: AUC missing ({why}); excluded from macro AUC");
                tracing::warn!("{w}");
                warnings.push(w);
                None
            }
            Err(e) => return Err(e),
        };
        per_class.push(ClassMetrics {
            label: code.clone(),
            name: name.clone(),
            n_positive,
            f1: f1(&s, &y, F1_THRESHOLD)?,
            auc,
        });
    }
    let macro_f1 = per_class.iter().map(|c| c.f1).sum::<f64>() / per_class.len().max(1) as f64;
    let aucs: Vec<f64> = per_class.iter().filter_map(|c| c.auc).collect();
    let macro_auc = (!aucs.is_empty()).then(|| aucs.iter().sum::<f64>() / aucs.len() as f64);
    Ok(EvalResult { per_class, macro_f1, macro_auc, n_examples: dataset.len(), warnings })
}

pub fn evaluate(model: &AlignModel, dataset: &[Example]) -> Result<EvalResult, MetricError> {
    let labels: Vec<(String, String)> =
        model.criteria().labels.iter().map(|l| (l.code.clone(), l.name.clone())).collect();
    evaluate_scores(&labels, &predict_scores(model, dataset)?, dataset)
}

/// Fraction of findings whose text occurs in `draft`, case-insensitively.
/// Not equivalent to an LLM-judged report-quality score.
pub fn finding_agreement(draft: &str, reference: &FindingSet) -> f64 {
    if reference.is_empty() {
        return 0.0;
    }
    let draft = draft.to_lowercase();
    let hits = reference.iter().filter(|f| draft.contains(&f.text.to_lowercase())).count();
    hits as f64 / reference.len() as f64
}
