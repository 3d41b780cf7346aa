//! Cross-attention with the concept tokens as queries over the image
//! feature grid.

use ndarray::{s, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::AlignError;
use crate::encoders::VisionFeatures;

/// Learnable concept tokens and the attention projections.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptTokens {
    /// `(K, d)` queries, one per criterion.
    pub z: Array2<f64>,
    /// `(d, d)`
    pub w_q: Array2<f64>,
    /// `(d_v, d)`
    pub w_k: Array2<f64>,
    /// `(d_v, d)`
    pub w_v: Array2<f64>,
    pub heads: usize,
}

/// Attended tokens `z_hat` and the (head-averaged) attention weights.
#[derive(Debug, Clone, PartialEq)]
pub struct AttendedTokens {
    /// `(K, d)`
    pub z_hat: Array2<f64>,
    /// `(K, M)`; each row is a probability distribution over positions.
    pub attn_weights: Array2<f64>,
}

/// Intermediates kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct AttentionCache {
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    head_attn: Vec<Array2<f64>>,
}

pub(crate) struct AttentionGrads {
    pub z: Array2<f64>,
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
    pub w_v: Array2<f64>,
    pub feats: Array2<f64>,
}

impl ConceptTokens {
    pub fn zeros(k: usize, d: usize, d_v: usize, heads: usize) -> Self {
        Self {
            z: Array2::zeros((k, d)),
            w_q: Array2::zeros((d, d)),
            w_k: Array2::zeros((d_v, d)),
            w_v: Array2::zeros((d_v, d)),
            heads,
        }
    }

    /// Unit-variance tokens; projections scaled by `1/sqrt(fan_in)`.
    pub fn init<R: Rng>(k: usize, d: usize, d_v: usize, heads: usize, rng: &mut R) -> Self {
        let mut t = Self::zeros(k, d, d_v, heads);
        let unit = Normal::new(0.0, 1.0).unwrap();
        t.z.mapv_inplace(|_| unit.sample(rng));
        let qd = Normal::new(0.0, 1.0 / (d as f64).sqrt()).unwrap();
        t.w_q.mapv_inplace(|_| qd.sample(rng));
        let kv = Normal::new(0.0, 1.0 / (d_v as f64).sqrt()).unwrap();
        t.w_k.mapv_inplace(|_| kv.sample(rng));
        t.w_v.mapv_inplace(|_| kv.sample(rng));
        t
    }

    pub fn num_tokens(&self) -> usize {
        self.z.nrows()
    }

    pub fn dim(&self) -> usize {
        self.z.ncols()
    }

    fn check(&self, feats: &Array2<f64>) -> Result<(), AlignError> {
        let d = self.dim();
        let d_v = feats.ncols();
        let shape_err = |what: &str, got: (usize, usize), want: (usize, usize)| {
            Err(AlignError::Shape(format!("{what} has shape {got:?}, expected {want:?}")))
        };
        if self.w_q.dim() != (d, d) {
            return shape_err("w_q", self.w_q.dim(), (d, d));
        }
        if self.w_k.dim() != (d_v, d) {
            return shape_err("w_k", self.w_k.dim(), (d_v, d));
        }
        if self.w_v.dim() != (d_v, d) {
            return shape_err("w_v", self.w_v.dim(), (d_v, d));
        }
        if feats.nrows() == 0 {
            return Err(AlignError::Shape("feature grid has no positions".into()));
        }
        if self.heads == 0 || !d.is_multiple_of(self.heads) {
            return Err(AlignError::Shape(format!("d = {d} is not divisible into {} heads", self.heads)));
        }
        Ok(())
    }
}

/// Row-wise numerically stable softmax.
pub(crate) fn softmax_rows(scores: &Array2<f64>) -> Array2<f64> {
    let mut out = scores.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}

pub(crate) fn attend(tokens: &ConceptTokens, feats: &Array2<f64>) -> Result<(AttendedTokens, AttentionCache), AlignError> {
    tokens.check(feats)?;
    let q = tokens.z.dot(&tokens.w_q);
    let k = feats.dot(&tokens.w_k);
    let v = feats.dot(&tokens.w_v);
    let (n_tok, d) = q.dim();
    let dh = d / tokens.heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let mut z_hat = Array2::zeros((n_tok, d));
    let mut mean_attn = Array2::zeros((n_tok, feats.nrows()));
    let mut head_attn = Vec::with_capacity(tokens.heads);
    for h in 0..tokens.heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
        let attn = softmax_rows(&scores);
        z_hat.slice_mut(cols).assign(&attn.dot(&v.slice(cols)));
        mean_attn += &attn;
        head_attn.push(attn);
    }
    mean_attn /= tokens.heads as f64;
    Ok((
        AttendedTokens { z_hat, attn_weights: mean_attn },
        AttentionCache { q, k, v, head_attn },
    ))
}

pub(crate) fn attend_backward(
    tokens: &ConceptTokens,
    feats: &Array2<f64>,
    cache: &AttentionCache,
    d_zhat: &Array2<f64>,
) -> AttentionGrads {
    let d = tokens.dim();
    let dh = d / tokens.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = Array2::zeros(cache.q.dim());
    let mut dk = Array2::zeros(cache.k.dim());
    let mut dv = Array2::zeros(cache.v.dim());
    for (h, attn) in cache.head_attn.iter().enumerate() {
        let cols = s![.., h * dh..(h + 1) * dh];
        let dz = d_zhat.slice(cols);
        let d_attn = dz.dot(&cache.v.slice(cols).t());
        dv.slice_mut(cols).assign(&attn.t().dot(&dz));
        // softmax backward: dS = A * (dA - rowsum(A * dA))
        let inner = (attn * &d_attn).sum_axis(Axis(1)).insert_axis(Axis(1));
        let d_scores = attn * &(&d_attn - &inner);
        dq.slice_mut(cols).assign(&(d_scores.dot(&cache.k.slice(cols)) * scale));
        dk.slice_mut(cols).assign(&(d_scores.t().dot(&cache.q.slice(cols)) * scale));
    }
    AttentionGrads {
        z: dq.dot(&tokens.w_q.t()),
        w_q: tokens.z.t().dot(&dq),
        w_k: feats.t().dot(&dk),
        w_v: feats.t().dot(&dv),
        feats: dk.dot(&tokens.w_k.t()) + dv.dot(&tokens.w_v.t()),
    }
}

/// `z_hat = softmax(Q K^T / sqrt(d_head)) V` with `Q = z W_q`, `K = F W_k`,
/// `V = F W_v`. With more than one head the attention weights returned are
/// the mean over heads.
pub fn cross_attend(tokens: &ConceptTokens, feats: &VisionFeatures) -> Result<AttendedTokens, AlignError> {
    attend(tokens, &feats.grid).map(|(a, _)| a)
}
