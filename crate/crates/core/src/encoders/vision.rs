use ndarray::{Array1, Array2, ArrayView3, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{EncoderError, EncoderSpec};

/// Feature grid for one image: `M` rows of width `d_v`, row-major over the
/// `(grid_h, grid_w)` patch grid.
#[derive(Debug, Clone, PartialEq)]
pub struct VisionFeatures {
    pub image_id: String,
    pub grid: Array2<f64>,
    pub grid_shape: (usize, usize),
}

/// Trainable patch encoder: every non-overlapping `p x p` patch is flattened
/// and passed through one shared affine map followed by `tanh`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchEncoder {
    pub weight: Array2<f64>,
    pub bias: Option<Array1<f64>>,
    pub patch_size: usize,
    pub channels: usize,
}

/// Patch matrix plus the activations it produced, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct PatchActivations {
    pub patches: Array2<f64>,
    pub features: Array2<f64>,
    pub grid_shape: (usize, usize),
}

impl PatchEncoder {
    pub fn zeros(spec: &EncoderSpec, with_bias: bool) -> Self {
        Self {
            weight: Array2::zeros((spec.patch_len(), spec.d_v)),
            bias: with_bias.then(|| Array1::zeros(spec.d_v)),
            patch_size: spec.patch_size,
            channels: spec.channels,
        }
    }

    /// Gaussian weights with variance `1 / patch_len`, zero bias.
    pub fn init<R: Rng>(spec: &EncoderSpec, with_bias: bool, rng: &mut R) -> Self {
        let mut enc = Self::zeros(spec, with_bias);
        let normal = Normal::new(0.0, 1.0 / (spec.patch_len() as f64).sqrt()).unwrap();
        enc.weight.mapv_inplace(|_| normal.sample(rng));
        enc
    }

    pub fn patch_len(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    /// Flattens non-overlapping patches, row-major over the grid; within a
    /// patch the order is (row, column, channel). Trailing pixels that do not
    /// fill a whole patch are dropped.
    pub fn patches(&self, image: ArrayView3<f64>) -> Result<(Array2<f64>, (usize, usize)), EncoderError> {
        let (h, w, c) = image.dim();
        let p = self.patch_size;
        if c != self.channels {
            return Err(EncoderError::Precondition(format!(
                "image has {c} channels, encoder expects {}",
                self.channels
            )));
        }
        if h < p || w < p {
            return Err(EncoderError::Precondition(format!("image {h}x{w} is smaller than patch size {p}")));
        }
        let (gh, gw) = (h / p, w / p);
        let mut out = Array2::zeros((gh * gw, self.patch_len()));
        for gy in 0..gh {
            for gx in 0..gw {
                let mut row = out.row_mut(gy * gw + gx);
                let mut k = 0;
                for py in 0..p {
                    for px in 0..p {
                        for ch in 0..c {
                            row[k] = image[[gy * p + py, gx * p + px, ch]];
                            k += 1;
                        }
                    }
                }
            }
        }
        Ok((out, (gh, gw)))
    }

    pub fn forward(&self, image: ArrayView3<f64>) -> Result<PatchActivations, EncoderError> {
        let (patches, grid_shape) = self.patches(image)?;
        let mut pre = patches.dot(&self.weight);
        if let Some(b) = &self.bias {
            pre += b;
        }
        let features = pre.mapv(f64::tanh);
        Ok(PatchActivations { patches, features, grid_shape })
    }

    /// Gradients of the weight and bias given the gradient w.r.t. the features.
    pub fn backward(&self, acts: &PatchActivations, d_features: &Array2<f64>) -> (Array2<f64>, Option<Array1<f64>>) {
        let d_pre = d_features * &acts.features.mapv(|f| 1.0 - f * f);
        let d_weight = acts.patches.t().dot(&d_pre);
        let d_bias = self.bias.as_ref().map(|_| d_pre.sum_axis(Axis(0)));
        (d_weight, d_bias)
    }
}

/// Runs the vision encoder on one `(H, W, C)` image.
pub fn encode_image(
    image: ArrayView3<f64>,
    encoder: &PatchEncoder,
    spec: &EncoderSpec,
    image_id: impl Into<String>,
) -> Result<VisionFeatures, EncoderError> {
    if encoder.weight.dim() != (spec.patch_len(), spec.d_v) {
        return Err(EncoderError::Precondition(format!(
            "encoder weight shape {:?} does not match spec ({}, {})",
            encoder.weight.dim(),
            spec.patch_len(),
            spec.d_v
        )));
    }
    let acts = encoder.forward(image)?;
    if acts.features.nrows() != spec.positions {
        return Err(EncoderError::Precondition(format!(
            "image yields {} positions, spec expects {}",
            acts.features.nrows(),
            spec.positions
        )));
    }
    Ok(VisionFeatures { image_id: image_id.into(), grid: acts.features, grid_shape: acts.grid_shape })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_image(seed: u64, h: usize, w: usize) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn((h, w, 1), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn zero_image_zero_encoder_gives_zero_grid() {
        let spec = EncoderSpec::default();
        let enc = PatchEncoder::zeros(&spec, false);
        let img = Array3::zeros((32, 32, 1));
        let f = encode_image(img.view(), &enc, &spec, "z").unwrap();
        assert!(f.grid.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn thirty_two_by_four_gives_sixty_four_rows() {
        let spec = EncoderSpec::default();
        let enc = PatchEncoder::init(&spec, true, &mut ChaCha8Rng::seed_from_u64(1));
        let f = encode_image(random_image(2, 32, 32).view(), &enc, &spec, "x").unwrap();
        assert_eq!(f.grid.dim(), (64, spec.d_v));
        assert_eq!(f.grid_shape, (8, 8));
    }

    #[test]
    fn deterministic() {
        let spec = EncoderSpec::default();
        let enc = PatchEncoder::init(&spec, true, &mut ChaCha8Rng::seed_from_u64(1));
        let img = random_image(3, 32, 32);
        let a = encode_image(img.view(), &enc, &spec, "a").unwrap();
        let b = encode_image(img.view(), &enc, &spec, "a").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn shape_mismatches_rejected() {
        let spec = EncoderSpec::default();
        let enc = PatchEncoder::zeros(&spec, true);
        assert!(encode_image(random_image(0, 3, 3).view(), &enc, &spec, "s").is_err());
        assert!(encode_image(random_image(0, 16, 16).view(), &enc, &spec, "s").is_err());
        let rgb = Array3::<f64>::zeros((32, 32, 3));
        assert!(encode_image(rgb.view(), &enc, &spec, "s").is_err());
    }

    #[test]
    fn patch_layout_is_row_major() {
        let spec = EncoderSpec { patch_size: 2, positions: 4, ..EncoderSpec::default() };
        let enc = PatchEncoder::zeros(&spec, false);
        let img = Array3::from_shape_fn((4, 4, 1), |(y, x, _)| (y * 4 + x) as f64);
        let (p, grid) = enc.patches(img.view()).unwrap();
        assert_eq!(grid, (2, 2));
        assert_eq!(p.row(0).to_vec(), vec![0.0, 1.0, 4.0, 5.0]);
        assert_eq!(p.row(1).to_vec(), vec![2.0, 3.0, 6.0, 7.0]);
        assert_eq!(p.row(3).to_vec(), vec![10.0, 11.0, 14.0, 15.0]);
    }

    /// Jacobian of a fixed linear functional of the grid against central
    /// differences, on a 3-coordinate slice of the weights and bias.
    #[test]
    fn jacobian_matches_finite_differences() {
        let spec = EncoderSpec { d_v: 6, ..EncoderSpec::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut enc = PatchEncoder::init(&spec, true, &mut rng);
        enc.bias = Some(Array1::from_shape_fn(spec.d_v, |_| rng.random_range(-0.5..0.5)));
        let img = random_image(12, 32, 32);
        let probe = Array2::from_shape_fn((64, spec.d_v), |_| rng.random_range(-1.0..1.0));
        let f = |e: &PatchEncoder| (&e.forward(img.view()).unwrap().features * &probe).sum();

        let acts = enc.forward(img.view()).unwrap();
        let (dw, db) = enc.backward(&acts, &probe);
        let db = db.unwrap();
        let h = 1e-5;
        let check = |analytic: f64, numeric: f64| {
            let tol = 1e-3 * analytic.abs().max(numeric.abs()) + 1e-9;
            assert!((analytic - numeric).abs() <= tol, "analytic {analytic} numeric {numeric}");
        };
        for &(i, j) in &[(0usize, 0usize), (7, 3), (15, 5)] {
            let mut plus = enc.clone();
            plus.weight[[i, j]] += h;
            let mut minus = enc.clone();
            minus.weight[[i, j]] -= h;
            check(dw[[i, j]], (f(&plus) - f(&minus)) / (2.0 * h));
        }
        for j in [0usize, 2, 4] {
            let mut plus = enc.clone();
            plus.bias.as_mut().unwrap()[j] += h;
            let mut minus = enc.clone();
            minus.bias.as_mut().unwrap()[j] -= h;
            check(db[j], (f(&plus) - f(&minus)) / (2.0 * h));
        }
    }
}
