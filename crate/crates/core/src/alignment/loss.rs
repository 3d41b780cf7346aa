//! Anchor contrastive loss, classification loss, and their combination.

use std::collections::BTreeSet;

use ndarray::{Array1, ArrayView1, ArrayView2};

use super::classifier::{sigmoid, softmax};
use super::{AlignError, TaskMode};
use crate::knowledge::LabelId;

fn log_sum_exp(x: &Array1<f64>) -> f64 {
    let max = x.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    max + x.mapv(|v| (v - max).exp()).sum().ln()
}

/// `log(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Anchor loss on a criterion's similarity block, and its gradient w.r.t. the
/// block. Averaged over the positives.
pub(crate) fn anchor_loss_from_sims(
    sims: &Array1<f64>,
    positives: &[usize],
    tau: f64,
) -> Result<(f64, Array1<f64>), AlignError> {
    if positives.is_empty() {
        return Err(AlignError::Precondition("anchor loss needs at least one positive".into()));
    }
    if tau.is_nan() || tau <= 0.0 {
        return Err(AlignError::Precondition(format!("temperature must be positive, got {tau}")));
    }
    if let Some(&p) = positives.iter().find(|&&p| p >= sims.len()) {
        return Err(AlignError::Precondition(format!(
            "positive index {p} out of range for {} descriptions",
            sims.len()
        )));
    }
    let logits = sims / tau;
    let lse = log_sum_exp(&logits);
    let n_pos = positives.len() as f64;
    let loss = positives.iter().map(|&p| lse - logits[p]).sum::<f64>() / n_pos;
    let mut grad = softmax(&logits);
    for &p in positives {
        grad[p] -= 1.0 / n_pos;
    }
    grad /= tau;
    Ok((loss, grad))
}

/// Contrastive loss pulling the attended token of one criterion towards its
/// positive description anchors: the mean over positives of
/// `-log softmax(e_i z_hat_i / tau)[p]`, with dot-product similarity.
pub fn anchor_loss(
    z_hat_i: ArrayView1<f64>,
    anchors_i: ArrayView2<f64>,
    positives: &[usize],
    tau: f64,
) -> Result<f64, AlignError> {
    if anchors_i.ncols() != z_hat_i.len() {
        return Err(AlignError::Shape(format!(
            "anchor width {} differs from token width {}",
            anchors_i.ncols(),
            z_hat_i.len()
        )));
    }
    let sims = anchors_i.dot(&z_hat_i);
    anchor_loss_from_sims(&sims, positives, tau).map(|(l, _)| l)
}

/// Target vector for the classification loss. Single-label mode spreads
/// probability mass evenly over the active labels.
pub(crate) fn targets(labels: &BTreeSet<LabelId>, n: usize, mode: TaskMode) -> Result<Array1<f64>, AlignError> {
    if let Some(&bad) = labels.iter().find(|&&l| l >= n) {
        return Err(AlignError::Precondition(format!("label id {bad} out of range for {n} classes")));
    }
    let mut y = Array1::zeros(n);
    for &l in labels {
        y[l] = 1.0;
    }
    if mode == TaskMode::SingleLabel {
        if labels.is_empty() {
            return Err(AlignError::Precondition("single-label mode needs at least one label per example".into()));
        }
        y /= labels.len() as f64;
    }
    Ok(y)
}

/// Classification loss and its gradient w.r.t. the logits. Multi-label:
/// binary cross-entropy averaged over classes. Single-label: softmax
/// cross-entropy against `targets`.
pub(crate) fn classification_loss(logits: &Array1<f64>, y: &Array1<f64>, mode: TaskMode) -> (f64, Array1<f64>) {
    match mode {
        TaskMode::MultiLabel => {
            let n = logits.len() as f64;
            let loss = logits.iter().zip(y).map(|(&l, &t)| softplus(l) - t * l).sum::<f64>() / n;
            let grad = logits.iter().zip(y).map(|(&l, &t)| (sigmoid(l) - t) / n).collect();
            (loss, grad)
        }
        TaskMode::SingleLabel => {
            let lse = log_sum_exp(logits);
            let loss = lse - logits.dot(y);
            (loss, softmax(logits) - y)
        }
    }
}

/// Components of the training objective.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub ce: f64,
    /// Mean of the per-criterion anchor losses.
    pub anchor: f64,
    pub total: f64,
}

/// Classification loss plus the mean of the per-criterion anchor losses.
pub fn total_loss(
    logits: &Array1<f64>,
    labels: &BTreeSet<LabelId>,
    anchor_losses: &[f64],
    mode: TaskMode,
) -> Result<LossBreakdown, AlignError> {
    if anchor_losses.is_empty() {
        return Err(AlignError::Precondition("one anchor loss per criterion is required".into()));
    }
    let y = targets(labels, logits.len(), mode)?;
    let (ce, _) = classification_loss(logits, &y, mode);
    let anchor = anchor_losses.iter().sum::<f64>() / anchor_losses.len() as f64;
    Ok(LossBreakdown { ce, anchor, total: ce + anchor })
}
