use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::LossBreakdown;
use super::optim::AdamW;
use super::{AlignError, AlignModel};
use crate::datagen::Example;

/// Optimization settings. Defaults: 40 epochs, learning rate 1e-3 dropping
/// to 1e-4 at epoch 20, AdamW with weight decay 0.01.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr_initial: f64,
    pub lr_final: f64,
    /// First (0-based) epoch trained at `lr_final`.
    pub lr_switch_epoch: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Seed of the per-epoch shuffle.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            lr_initial: 1e-3,
            lr_final: 1e-4,
            lr_switch_epoch: 20,
            batch_size: 4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch < self.lr_switch_epoch {
            self.lr_initial
        } else {
            self.lr_final
        }
    }

    fn check(&self) -> Result<(), AlignError> {
        if !(self.lr_initial > 0.0 && self.lr_final > 0.0) {
            return Err(AlignError::Precondition("learning rates must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(AlignError::Precondition("batch_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub ce_loss: f64,
    pub anchor_loss: f64,
    pub total: f64,
}

/// Per-epoch losses. Row 0 is the full-dataset loss before any update; row
/// `e >= 1` is the mean of the batch losses seen during epoch `e`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTrace(pub Vec<EpochLoss>);

impl LossTrace {
    pub fn initial(&self) -> Option<&EpochLoss> {
        self.0.first()
    }

    pub fn last(&self) -> Option<&EpochLoss> {
        self.0.last()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,ce_loss,anchor_loss,total\n");
        for e in &self.0 {
            writeln!(out, "{},{},{},{}", e.epoch, e.ce_loss, e.anchor_loss, e.total).unwrap();
        }
        out
    }
}

pub struct TrainedRun {
    pub model: AlignModel,
    pub trace: LossTrace,
    pub optimizer_steps: u64,
}

fn row(epoch: usize, l: LossBreakdown) -> EpochLoss {
    EpochLoss { epoch, ce_loss: l.ce, anchor_loss: l.anchor, total: l.total }
}

/// Trains the vision encoder, concept tokens, attention projections and the
/// classifier head. The anchors stay as computed at model construction.
pub fn train(mut model: AlignModel, dataset: &[Example], config: &TrainConfig) -> Result<TrainedRun, AlignError> {
    config.check()?;
    if dataset.is_empty() {
        return Err(AlignError::Precondition("training set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = AdamW::new(&model.params, config.beta1, config.beta2, config.eps, config.weight_decay);
    let all: Vec<&Example> = dataset.iter().collect();
    let mut trace = LossTrace(Vec::with_capacity(config.epochs + 1));
    trace.0.push(row(0, model.mean_loss(&all)?));

    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let lr = config.lr_at(epoch);
        let mut sum = LossBreakdown::default();
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &dataset[i]).collect();
            let (loss, grads) = model.loss_and_grad(&batch)?;
            if !loss.total.is_finite() {
                return Err(AlignError::NonFinite {
                    epoch: epoch + 1,
                    batch: b,
                    example_ids: batch.iter().map(|e| e.id.clone()).collect(),
                    ce: loss.ce,
                    anchor: loss.anchor,
                });
            }
            let w = batch.len() as f64;
            sum.ce += loss.ce * w;
            sum.anchor += loss.anchor * w;
            sum.total += loss.total * w;
            opt.step(&mut model.params, &grads, lr);
        }
        let n = dataset.len() as f64;
        let mean = LossBreakdown { ce: sum.ce / n, anchor: sum.anchor / n, total: sum.total / n };
        tracing::debug!(epoch = epoch + 1, lr, total = mean.total, "epoch done");
        trace.0.push(row(epoch + 1, mean));
    }
    Ok(TrainedRun { model, trace, optimizer_steps: opt.steps() })
}
