//! Planted-concept synthetic data: every disease owns a fixed spatial
//! signature, and an image is Gaussian noise plus the signatures of its
//! labels. Reports quote the criteria descriptions mapped to each label, so
//! label and retrieval ground truth are both known.

mod format;

use std::collections::BTreeSet;

use ndarray::{s, Array2, Array3};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use format::{image_from_bytes, image_to_bytes, load_dataset, read_image, save_dataset, write_image, DatasetError, MANIFEST};

use crate::knowledge::{is_valid, validate_criteria, CriterionSet, LabelId};

/// One `(image, labels, report)` triple.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: String,
    /// `(H, W, C)`
    pub image: Array3<f64>,
    pub labels: BTreeSet<LabelId>,
    pub report: String,
}

/// Class prevalence: one value for every class, or one per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Prevalence {
    Uniform(f64),
    PerClass(Vec<f64>),
}

impl Prevalence {
    fn for_class(&self, c: usize) -> Option<f64> {
        match self {
            Prevalence::Uniform(p) => Some(*p),
            Prevalence::PerClass(v) => v.get(c).copied(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub n_examples: usize,
    pub height: usize,
    pub width: usize,
    pub noise_std: f64,
    /// Seed for labels, noise and report wording.
    pub seed: u64,
    /// Seed for signature placement and pattern; datasets sharing it share
    /// signatures (e.g. separately generated train and test sets).
    pub signature_seed: u64,
    pub prevalence: Prevalence,
    /// Probability that an example which drew several labels keeps all of
    /// them; otherwise one of them is kept at random.
    pub co_occurrence: f64,
    /// Side of the square signature block; must divide height and width.
    pub signature_size: usize,
    pub signature_amplitude: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_examples: 200,
            height: 32,
            width: 32,
            noise_std: 0.3,
            seed: 0,
            signature_seed: 0,
            prevalence: Prevalence::Uniform(0.4),
            co_occurrence: 1.0,
            signature_size: 8,
            signature_amplitude: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GenerateError {
    #[error("invalid synthetic spec: {0}")]
    Spec(String),
    #[error("criteria failed validation: {0}")]
    Criteria(String),
}

/// Placement and pattern of one disease's signature.
#[derive(Debug, Clone, PartialEq)]
pub struct Signature {
    pub label: LabelId,
    pub top: usize,
    pub left: usize,
    pub pattern: Array2<f64>,
}

impl Signature {
    pub fn size(&self) -> usize {
        self.pattern.nrows()
    }

    /// The signature alone, on a zero `(H, W, 1)` canvas.
    pub fn render(&self, height: usize, width: usize) -> Array3<f64> {
        let mut img = Array3::zeros((height, width, 1));
        self.stamp(&mut img);
        img
    }

    fn stamp(&self, img: &mut Array3<f64>) {
        let n = self.size();
        let mut region = img.slice_mut(s![self.top..self.top + n, self.left..self.left + n, 0]);
        region += &self.pattern;
    }

    /// Whether pixel `(y, x)` lies inside the signature block.
    pub fn contains(&self, y: usize, x: usize) -> bool {
        let n = self.size();
        (self.top..self.top + n).contains(&y) && (self.left..self.left + n).contains(&x)
    }
}

impl SynthSpec {
    fn check(&self, n_labels: usize) -> Result<(), GenerateError> {
        let err = |m: String| Err(GenerateError::Spec(m));
        if self.height == 0 || self.width == 0 {
            return err("image dimensions must be positive".into());
        }
        if self.signature_size == 0 || !self.height.is_multiple_of(self.signature_size) || !self.width.is_multiple_of(self.signature_size) {
            return err(format!(
                "signature_size {} must divide the {}x{} image",
                self.signature_size, self.height, self.width
            ));
        }
        let blocks = (self.height / self.signature_size) * (self.width / self.signature_size);
        if blocks < n_labels {
            return err(format!("{blocks} signature blocks cannot hold {n_labels} disjoint signatures"));
        }
        if self.noise_std.is_nan() || self.noise_std < 0.0 {
            return err("noise_std must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.co_occurrence) {
            return err("co_occurrence must lie in [0, 1]".into());
        }
        for c in 0..n_labels {
            match self.prevalence.for_class(c) {
                Some(p) if p > 0.0 && p < 1.0 => {}
                Some(p) => return err(format!("prevalence of class {c} is {p}, must lie in (0, 1)")),
                None => return err(format!("no prevalence given for class {c}")),
            }
        }
        Ok(())
    }

    /// Disjoint, block-aligned signatures, one per label.
    pub fn signatures(&self, n_labels: usize) -> Result<Vec<Signature>, GenerateError> {
        self.check(n_labels)?;
        let n = self.signature_size;
        let mut rng = ChaCha8Rng::seed_from_u64(self.signature_seed ^ 0x5167_0a7e_5eed_0001);
        let mut blocks: Vec<(usize, usize)> = (0..self.height / n)
            .flat_map(|by| (0..self.width / n).map(move |bx| (by * n, bx * n)))
            .collect();
        blocks.shuffle(&mut rng);
        Ok((0..n_labels)
            .map(|label| {
                let (top, left) = blocks[label];
                let pattern = Array2::from_shape_fn((n, n), |_| {
                    let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                    sign * self.signature_amplitude * rng.random_range(0.5..1.0)
                });
                Signature { label, top, left, pattern }
            })
            .collect())
    }
}

/// Generates `spec.n_examples` planted-concept examples over the labels of
/// `criteria`.
pub fn generate(spec: &SynthSpec, criteria: &CriterionSet) -> Result<Vec<Example>, GenerateError> {
    let violations = validate_criteria(criteria);
    if !is_valid(&violations) {
        return Err(GenerateError::Criteria(
            violations.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "),
        ));
    }
    let n_labels = criteria.num_labels();
    let signatures = spec.signatures(n_labels)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| GenerateError::Spec(e.to_string()))?;

    let normal_texts: Vec<&str> = criteria
        .criteria
        .iter()
        .flat_map(|c| c.descriptions.iter())
        .filter(|d| d.is_normal())
        .map(|d| d.text.as_str())
        .collect();

    let mut out = Vec::with_capacity(spec.n_examples);
    for i in 0..spec.n_examples {
        let mut labels: Vec<LabelId> = (0..n_labels)
            .filter(|&c| rng.random_bool(spec.prevalence.for_class(c).unwrap()))
            .collect();
        if labels.len() > 1 && !rng.random_bool(spec.co_occurrence) {
            let keep = labels[rng.random_range(0..labels.len())];
            labels = vec![keep];
        }

        let mut image = Array3::zeros((spec.height, spec.width, 1));
        if spec.noise_std > 0.0 {
            image.mapv_inplace(|_| noise.sample(&mut rng));
        }
        for &l in &labels {
            signatures[l].stamp(&mut image);
        }

        let report = if labels.is_empty() {
            let text = normal_texts
                .choose(&mut rng)
                .copied()
                .unwrap_or("no acute cardiopulmonary process");
            format!("Findings: {text}. No acute cardiopulmonary process.")
        } else {
            let sentences: Vec<String> = labels
                .iter()
                .map(|&l| {
                    let options = criteria.descriptions_for(l);
                    let name = &criteria.labels[l].name;
                    match options.choose(&mut rng) {
                        Some(d) => format!("{}, consistent with {name}.", d.text),
                        None => format!("Findings consistent with {name}."),
                    }
                })
                .collect();
            format!("Findings: {}", sentences.join(" "))
        };

        out.push(Example {
            id: format!("synth-{}-{i:05}", spec.seed),
            image,
            labels: labels.into_iter().collect(),
            report,
        });
    }
    Ok(out)
}
