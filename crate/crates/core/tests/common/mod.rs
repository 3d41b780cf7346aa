//! Brute-force loop oracles and random instance builders shared by the
//! integration and acceptance tests. Nothing here calls into the library's
//! math; everything is written with plain nested loops over `Vec`s.

#![allow(dead_code)]

use std::collections::BTreeSet;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub mod suites;

pub type Mat = Vec<Vec<f64>>;

pub fn to_mat(a: &Array2<f64>) -> Mat {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

pub fn from_mat(m: &Mat) -> Array2<f64> {
    let cols = m.first().map_or(0, Vec::len);
    Array2::from_shape_fn((m.len(), cols), |(i, j)| m[i][j])
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k) = (a.len(), b.len());
    let m = b.first().map_or(0, Vec::len);
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i][t] * b[t][j];
            }
            out[i][j] = s;
        }
    }
    out
}

fn exp_normalize(row: &[f64]) -> Vec<f64> {
    let mut max = f64::NEG_INFINITY;
    for &v in row {
        if v > max {
            max = v;
        }
    }
    let mut e = Vec::with_capacity(row.len());
    let mut sum = 0.0;
    for &v in row {
        let x = (v - max).exp();
        e.push(x);
        sum += x;
    }
    e.iter().map(|x| x / sum).collect()
}

/// Multi-head cross-attention by loops. Returns `(z_hat, mean attention)`.
pub fn cross_attend(z: &Mat, w_q: &Mat, w_k: &Mat, w_v: &Mat, heads: usize, feats: &Mat) -> (Mat, Mat) {
    let q = matmul(z, w_q);
    let k = matmul(feats, w_k);
    let v = matmul(feats, w_v);
    let (n_tok, d, m) = (q.len(), q[0].len(), feats.len());
    let dh = d / heads;
    let mut z_hat = vec![vec![0.0; d]; n_tok];
    let mut attn_mean = vec![vec![0.0; m]; n_tok];
    for h in 0..heads {
        for i in 0..n_tok {
            let mut scores = vec![0.0; m];
            for (j, s) in scores.iter_mut().enumerate() {
                for c in h * dh..(h + 1) * dh {
                    *s += q[i][c] * k[j][c];
                }
                *s /= (dh as f64).sqrt();
            }
            let a = exp_normalize(&scores);
            for j in 0..m {
                attn_mean[i][j] += a[j] / heads as f64;
                for c in h * dh..(h + 1) * dh {
                    z_hat[i][c] += a[j] * v[j][c];
                }
            }
        }
    }
    (z_hat, attn_mean)
}

/// `s_i[j] = anchors_i[j] . z_hat[i]`.
pub fn similarities(z_hat: &Mat, anchors: &[Mat]) -> Vec<Vec<f64>> {
    anchors
        .iter()
        .enumerate()
        .map(|(i, block)| {
            block
                .iter()
                .map(|e| {
                    let mut s = 0.0;
                    for c in 0..e.len() {
                        s += e[c] * z_hat[i][c];
                    }
                    s
                })
                .collect()
        })
        .collect()
}

/// Logits and scores; sigmoid when `multi_label`, softmax otherwise.
pub fn classify(w: &Mat, b: Option<&[f64]>, flat: &[f64], multi_label: bool) -> (Vec<f64>, Vec<f64>) {
    let mut logits = vec![0.0; w.len()];
    for (r, row) in w.iter().enumerate() {
        for (c, &x) in flat.iter().enumerate() {
            logits[r] += row[c] * x;
        }
        if let Some(b) = b {
            logits[r] += b[r];
        }
    }
    let scores = if multi_label {
        logits.iter().map(|&l| 1.0 / (1.0 + (-l).exp())).collect()
    } else {
        exp_normalize(&logits)
    };
    (logits, scores)
}

/// Classification loss from first principles plus the mean anchor loss.
pub fn total_loss(logits: &[f64], labels: &BTreeSet<usize>, anchor_losses: &[f64], multi_label: bool) -> f64 {
    let n = logits.len();
    let ce = if multi_label {
        let mut s = 0.0;
        for (c, &l) in logits.iter().enumerate() {
            let p = 1.0 / (1.0 + (-l).exp());
            let y = if labels.contains(&c) { 1.0 } else { 0.0 };
            s -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
        }
        s / n as f64
    } else {
        let p = exp_normalize(logits);
        let mut s = 0.0;
        for &c in labels {
            s -= p[c].ln() / labels.len() as f64;
        }
        s
    };
    ce + anchor_losses.iter().sum::<f64>() / anchor_losses.len() as f64
}

/// Mean over positives of `-log(exp(s_p/tau) / sum_j exp(s_j/tau))`.
pub fn anchor_loss(sims: &[f64], positives: &[usize], tau: f64) -> f64 {
    let p = exp_normalize(&sims.iter().map(|s| s / tau).collect::<Vec<_>>());
    positives.iter().map(|&i| -p[i].ln()).sum::<f64>() / positives.len() as f64
}

pub fn frobenius(a: &Mat, b: &Mat) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        for j in 0..a[i].len() {
            s += a[i][j] * b[i][j];
        }
    }
    s
}

/// Scores every entry, sorts all of them, keeps the first `k`.
pub fn topk(entries: &[Mat], query: &Mat, k: usize) -> Vec<(usize, f64)> {
    let mut all: Vec<(usize, f64)> = entries.iter().enumerate().map(|(i, e)| (i, frobenius(query, e))).collect();
    all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

/// AUC by counting every (positive, negative) pair.
pub fn auc_pairs(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] && !labels[j] {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

pub fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    let mut m: f64 = 0.0;
    for i in 0..a.len() {
        assert_eq!(a[i].len(), b[i].len());
        for j in 0..a[i].len() {
            m = m.max((a[i][j] - b[i][j]).abs());
        }
    }
    m
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| rng.random_range(-scale..scale))
}

pub fn rand_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Array1<f64> {
    Array1::from_shape_fn(n, |_| rng.random_range(-scale..scale))
}

/// Random small alignment instance: `(K, M, d, d_v, heads)` within the
/// acceptance bounds (K <= 5, M <= 16, d <= 8).
pub struct Instance {
    pub k: usize,
    pub m: usize,
    pub d: usize,
    pub d_v: usize,
    pub heads: usize,
    pub z: Array2<f64>,
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
    pub w_v: Array2<f64>,
    pub feats: Array2<f64>,
    pub anchors: Vec<Array2<f64>>,
    pub n_labels: usize,
    pub head_w: Array2<f64>,
    pub head_b: Option<Array1<f64>>,
    pub labels: BTreeSet<usize>,
}

pub fn instance(seed: u64) -> Instance {
    let mut r = rng(seed);
    let k = r.random_range(1..=5);
    let m = r.random_range(1..=16);
    let d = r.random_range(1..=8);
    let divisors: Vec<usize> = (1..=d).filter(|h| d % h == 0).collect();
    let heads = divisors[r.random_range(0..divisors.len())];
    let d_v = r.random_range(1..=8);
    let z = rand_mat(&mut r, k, d, 1.0);
    let w_q = rand_mat(&mut r, d, d, 1.0);
    let w_k = rand_mat(&mut r, d_v, d, 1.0);
    let w_v = rand_mat(&mut r, d_v, d, 1.0);
    let feats = rand_mat(&mut r, m, d_v, 1.0);
    let anchors: Vec<Array2<f64>> = (0..k)
        .map(|_| {
            let n = r.random_range(1..=4);
            rand_mat(&mut r, n, d, 1.0)
        })
        .collect();
    let width: usize = anchors.iter().map(|a| a.nrows()).sum();
    let n_labels = r.random_range(1..=5);
    let head_w = rand_mat(&mut r, n_labels, width, 1.0);
    let head_b = r.random_bool(0.5).then(|| rand_vec(&mut r, n_labels, 1.0));
    let mut labels: BTreeSet<usize> = (0..n_labels).filter(|_| r.random_bool(0.4)).collect();
    if labels.is_empty() {
        labels.insert(r.random_range(0..n_labels));
    }
    Instance { k, m, d, d_v, heads, z, w_q, w_k, w_v, feats, anchors, n_labels, head_w, head_b, labels }
}

/// `|a - n| <= rel * max(|a|, |n|) + floor`.
pub fn grad_close(analytic: f64, numeric: f64, rel: f64, floor: f64) -> bool {
    (analytic - numeric).abs() <= rel * analytic.abs().max(numeric.abs()) + floor
}
