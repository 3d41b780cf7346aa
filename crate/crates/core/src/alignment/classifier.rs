//! Concept-criterion similarities and the linear classifier over them.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{AlignError, AttendedTokens};
use crate::encoders::TextEmbedding;

/// Per-criterion similarity blocks, in criterion order.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityVector {
    pub blocks: Vec<Array1<f64>>,
}

impl SimilarityVector {
    pub fn concat(&self) -> Array1<f64> {
        Array1::from_iter(self.blocks.iter().flat_map(|b| b.iter().copied()))
    }

    pub fn len(&self) -> usize {
        self.blocks.iter().map(|b| b.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Splits a flat vector back into blocks shaped like `self`.
    pub(crate) fn split_like(&self, flat: &Array1<f64>) -> Vec<Array1<f64>> {
        let mut offset = 0;
        self.blocks
            .iter()
            .map(|b| {
                let part = flat.slice(ndarray::s![offset..offset + b.len()]).to_owned();
                offset += b.len();
                part
            })
            .collect()
    }
}

/// Block `i` is `e_i . z_hat_i`, the dot product of every anchor row of
/// criterion `i` with that criterion's attended token.
pub fn similarities(attended: &AttendedTokens, anchors: &[TextEmbedding]) -> Result<SimilarityVector, AlignError> {
    let z_hat = &attended.z_hat;
    if anchors.len() != z_hat.nrows() {
        return Err(AlignError::Shape(format!(
            "{} anchor blocks for {} concept tokens",
            anchors.len(),
            z_hat.nrows()
        )));
    }
    let blocks = anchors
        .iter()
        .enumerate()
        .map(|(i, e)| {
            if e.matrix.ncols() != z_hat.ncols() {
                return Err(AlignError::Shape(format!(
                    "anchor block {i} has width {}, tokens have width {}",
                    e.matrix.ncols(),
                    z_hat.ncols()
                )));
            }
            Ok(e.matrix.dot(&z_hat.row(i)))
        })
        .collect::<Result<_, _>>()?;
    Ok(SimilarityVector { blocks })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TaskMode {
    SingleLabel,
    #[default]
    MultiLabel,
}

/// Linear head over the concatenated similarity vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    /// `(N, sum n_i)`
    pub w: Array2<f64>,
    pub b: Option<Array1<f64>>,
}

impl ClassifierHead {
    pub fn zeros(n_labels: usize, width: usize, with_bias: bool) -> Self {
        Self { w: Array2::zeros((n_labels, width)), b: with_bias.then(|| Array1::zeros(n_labels)) }
    }

    pub fn init<R: Rng>(n_labels: usize, width: usize, with_bias: bool, rng: &mut R) -> Self {
        let mut head = Self::zeros(n_labels, width, with_bias);
        let normal = Normal::new(0.0, 1.0 / (width as f64).sqrt()).unwrap();
        head.w.mapv_inplace(|_| normal.sample(rng));
        head
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    pub logits: Array1<f64>,
    /// Sigmoid of the logits in multi-label mode, softmax in single-label mode.
    pub scores: Array1<f64>,
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax(x: &Array1<f64>) -> Array1<f64> {
    let max = x.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let e = x.mapv(|v| (v - max).exp());
    let sum = e.sum();
    e / sum
}

pub fn classify(s: &SimilarityVector, head: &ClassifierHead, mode: TaskMode) -> Result<Classification, AlignError> {
    let flat = s.concat();
    if head.w.ncols() != flat.len() {
        return Err(AlignError::Shape(format!(
            "classifier expects {} similarities, got {}",
            head.w.ncols(),
            flat.len()
        )));
    }
    let mut logits = head.w.dot(&flat);
    if let Some(b) = &head.b {
        logits += b;
    }
    let scores = match mode {
        TaskMode::MultiLabel => logits.mapv(sigmoid),
        TaskMode::SingleLabel => softmax(&logits),
    };
    Ok(Classification { logits, scores })
}
