use std::collections::BTreeSet;

use ndarray::{Array1, Array2, ArrayView3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::attention::{attend, attend_backward, AttentionCache};
use super::classifier::{classify, similarities, Classification, ClassifierHead, SimilarityVector, TaskMode};
use super::loss::{anchor_loss_from_sims, classification_loss, targets, LossBreakdown};
use super::{AlignError, AttendedTokens, ConceptTokens};
use crate::datagen::Example;
use crate::encoders::{encode_text, EncoderSpec, PatchEncoder, TextEmbedding};
use crate::encoders::PatchActivations;
use crate::knowledge::{is_valid, positives_for, validate_criteria, CriterionSet, LabelId};

/// Architecture and objective settings. Stored inside checkpoints so a
/// loaded model is self-describing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderSpec,
    pub heads: usize,
    /// Temperature of the anchor loss.
    pub tau: f64,
    pub task_mode: TaskMode,
    pub classifier_bias: bool,
    pub encoder_bias: bool,
    /// Seed for parameter initialization.
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderSpec::default(),
            heads: 1,
            tau: 0.07,
            task_mode: TaskMode::MultiLabel,
            classifier_bias: true,
            encoder_bias: true,
            init_seed: 0,
        }
    }
}

/// Every trainable tensor. Gradients use the same structure.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignParams {
    pub encoder: PatchEncoder,
    pub tokens: ConceptTokens,
    pub head: ClassifierHead,
}

/// Borrowed view of one named parameter tensor.
pub struct ParamTensor<'a> {
    pub name: &'static str,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

impl AlignParams {
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for (_, data) in out.tensors_mut() {
            data.fill(0.0);
        }
        out
    }

    /// Named tensors in a fixed order. Optional biases are skipped when absent.
    pub fn tensors(&self) -> Vec<ParamTensor<'_>> {
        fn t2<'a>(name: &'static str, a: &'a Array2<f64>) -> ParamTensor<'a> {
            ParamTensor { name, shape: a.shape().to_vec(), data: a.as_slice().expect("standard layout") }
        }
        fn t1<'a>(name: &'static str, a: &'a Array1<f64>) -> ParamTensor<'a> {
            ParamTensor { name, shape: a.shape().to_vec(), data: a.as_slice().expect("standard layout") }
        }
        let mut out = vec![t2("encoder.weight", &self.encoder.weight)];
        if let Some(b) = &self.encoder.bias {
            out.push(t1("encoder.bias", b));
        }
        out.push(t2("tokens.z", &self.tokens.z));
        out.push(t2("tokens.w_q", &self.tokens.w_q));
        out.push(t2("tokens.w_k", &self.tokens.w_k));
        out.push(t2("tokens.w_v", &self.tokens.w_v));
        out.push(t2("head.w", &self.head.w));
        if let Some(b) = &self.head.b {
            out.push(t1("head.b", b));
        }
        out
    }

    /// Mutable counterpart of [`tensors`](Self::tensors), same order.
    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        let mut out: Vec<(&'static str, &mut [f64])> = Vec::with_capacity(8);
        out.push(("encoder.weight", self.encoder.weight.as_slice_mut().unwrap()));
        if let Some(b) = &mut self.encoder.bias {
            out.push(("encoder.bias", b.as_slice_mut().unwrap()));
        }
        out.push(("tokens.z", self.tokens.z.as_slice_mut().unwrap()));
        out.push(("tokens.w_q", self.tokens.w_q.as_slice_mut().unwrap()));
        out.push(("tokens.w_k", self.tokens.w_k.as_slice_mut().unwrap()));
        out.push(("tokens.w_v", self.tokens.w_v.as_slice_mut().unwrap()));
        out.push(("head.w", self.head.w.as_slice_mut().unwrap()));
        if let Some(b) = &mut self.head.b {
            out.push(("head.b", b.as_slice_mut().unwrap()));
        }
        out
    }

    fn accumulate(&mut self, other: &Self) {
        let other: Vec<_> = other.tensors().into_iter().map(|t| t.data.to_vec()).collect();
        for ((_, dst), src) in self.tensors_mut().into_iter().zip(other) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }

    fn scale(&mut self, factor: f64) {
        for (_, data) in self.tensors_mut() {
            data.iter_mut().for_each(|v| *v *= factor);
        }
    }
}

/// The per-criterion argmax description chosen at inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Finding {
    pub criterion_id: usize,
    pub criterion: String,
    pub description_index: usize,
    pub text: String,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct FindingSet(pub Vec<Finding>);

impl FindingSet {
    pub fn iter(&self) -> std::slice::Iter<'_, Finding> {
        self.0.iter()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Argmax description per block; ties go to the lowest index.
pub fn select_findings(criteria: &CriterionSet, sims: &SimilarityVector) -> FindingSet {
    FindingSet(
        criteria
            .criteria
            .iter()
            .zip(&sims.blocks)
            .map(|(c, block)| {
                let mut best = 0;
                for (j, &v) in block.iter().enumerate() {
                    if v > block[best] {
                        best = j;
                    }
                }
                Finding {
                    criterion_id: c.id,
                    criterion: c.name.clone(),
                    description_index: best,
                    text: c.descriptions[best].text.clone(),
                    similarity: block[best],
                }
            })
            .collect(),
    )
}

/// Everything computed by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub attended: AttendedTokens,
    pub similarities: SimilarityVector,
    pub classification: Classification,
    pub(crate) acts: PatchActivations,
    pub(crate) cache: AttentionCache,
}

impl ForwardPass {
    pub fn features(&self) -> &Array2<f64> {
        &self.acts.features
    }

    pub fn grid_shape(&self) -> (usize, usize) {
        self.acts.grid_shape
    }
}

#[derive(Debug, Clone)]
pub struct Inference {
    pub attended: AttendedTokens,
    pub similarities: SimilarityVector,
    pub scores: Array1<f64>,
    pub findings: FindingSet,
    pub grid_shape: (usize, usize),
}

/// Vision encoder, concept tokens, classifier head, and the frozen anchors.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignModel {
    config: ModelConfig,
    criteria: CriterionSet,
    anchors: Vec<TextEmbedding>,
    pub params: AlignParams,
}

impl AlignModel {
    /// Encodes the anchors once with the frozen text encoder and initializes
    /// the trainable parameters from `config.init_seed`.
    pub fn new(config: ModelConfig, criteria: CriterionSet) -> Result<Self, AlignError> {
        let violations = validate_criteria(&criteria);
        if !is_valid(&violations) {
            return Err(AlignError::Precondition(format!(
                "criteria failed validation: {}",
                violations.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ")
            )));
        }
        config.encoder.check().map_err(|e| AlignError::Precondition(e.to_string()))?;
        if config.tau.is_nan() || config.tau <= 0.0 {
            return Err(AlignError::Precondition(format!("tau must be positive, got {}", config.tau)));
        }
        let anchors = criteria
            .criteria
            .iter()
            .map(|c| encode_text(&c.texts(), &config.encoder, c.id))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| AlignError::Precondition(e.to_string()))?;

        let spec = &config.encoder;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let encoder = PatchEncoder::init(spec, config.encoder_bias, &mut rng);
        let tokens = ConceptTokens::init(criteria.num_criteria(), spec.d, spec.d_v, config.heads, &mut rng);
        let head = ClassifierHead::init(
            criteria.num_labels(),
            criteria.total_descriptions(),
            config.classifier_bias,
            &mut rng,
        );
        Ok(Self { config, criteria, anchors, params: AlignParams { encoder, tokens, head } })
    }

    /// Reassembles a model from stored parts, checking every shape.
    pub fn from_parts(
        config: ModelConfig,
        criteria: CriterionSet,
        anchors: Vec<TextEmbedding>,
        params: AlignParams,
    ) -> Result<Self, AlignError> {
        let spec = &config.encoder;
        let k = criteria.num_criteria();
        let shape_err = |m: String| Err(AlignError::Shape(m));
        if anchors.len() != k {
            return shape_err(format!("{} anchor blocks for {k} criteria", anchors.len()));
        }
        for (c, a) in criteria.criteria.iter().zip(&anchors) {
            if a.matrix.dim() != (c.descriptions.len(), spec.d) {
                return shape_err(format!("anchor block {} has shape {:?}", c.id, a.matrix.dim()));
            }
        }
        if params.encoder.weight.dim() != (spec.patch_len(), spec.d_v) {
            return shape_err(format!("encoder weight has shape {:?}", params.encoder.weight.dim()));
        }
        if params.tokens.z.dim() != (k, spec.d) {
            return shape_err(format!("concept tokens have shape {:?}", params.tokens.z.dim()));
        }
        if params.head.w.dim() != (criteria.num_labels(), criteria.total_descriptions()) {
            return shape_err(format!("classifier weight has shape {:?}", params.head.w.dim()));
        }
        Ok(Self { config, criteria, anchors, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn criteria(&self) -> &CriterionSet {
        &self.criteria
    }

    /// Frozen anchor embeddings, one block per criterion.
    pub fn anchors(&self) -> &[TextEmbedding] {
        &self.anchors
    }

    pub fn forward(&self, image: ArrayView3<f64>) -> Result<ForwardPass, AlignError> {
        let acts = self.params.encoder.forward(image).map_err(|e| AlignError::Precondition(e.to_string()))?;
        if acts.features.nrows() != self.config.encoder.positions {
            return Err(AlignError::Shape(format!(
                "image yields {} positions, model expects {}",
                acts.features.nrows(),
                self.config.encoder.positions
            )));
        }
        let (attended, cache) = attend(&self.params.tokens, &acts.features)?;
        let sims = similarities(&attended, &self.anchors)?;
        let classification = classify(&sims, &self.params.head, self.config.task_mode)?;
        Ok(ForwardPass { attended, similarities: sims, classification, acts, cache })
    }

    pub fn infer(&self, image: ArrayView3<f64>) -> Result<Inference, AlignError> {
        let fp = self.forward(image)?;
        let findings = select_findings(&self.criteria, &fp.similarities);
        Ok(Inference {
            grid_shape: fp.acts.grid_shape,
            attended: fp.attended,
            scores: fp.classification.scores,
            similarities: fp.similarities,
            findings,
        })
    }

    fn anchor_terms(
        &self,
        sims: &SimilarityVector,
        labels: &BTreeSet<LabelId>,
    ) -> Result<Vec<(f64, Array1<f64>)>, AlignError> {
        sims.blocks
            .iter()
            .enumerate()
            .map(|(i, block)| {
                let positives = positives_for(&self.criteria, i, labels);
                anchor_loss_from_sims(block, &positives, self.config.tau)
            })
            .collect()
    }

    /// Objective for one labelled image.
    pub fn example_loss(&self, image: ArrayView3<f64>, labels: &BTreeSet<LabelId>) -> Result<LossBreakdown, AlignError> {
        let fp = self.forward(image)?;
        self.loss_from_forward(&fp, labels).map(|(l, _, _)| l)
    }

    #[allow(clippy::type_complexity)]
    fn loss_from_forward(
        &self,
        fp: &ForwardPass,
        labels: &BTreeSet<LabelId>,
    ) -> Result<(LossBreakdown, Array1<f64>, Vec<(f64, Array1<f64>)>), AlignError> {
        let y = targets(labels, self.criteria.num_labels(), self.config.task_mode)?;
        let (ce, d_logits) = classification_loss(&fp.classification.logits, &y, self.config.task_mode);
        let terms = self.anchor_terms(&fp.similarities, labels)?;
        let anchor = terms.iter().map(|(l, _)| l).sum::<f64>() / terms.len() as f64;
        Ok((LossBreakdown { ce, anchor, total: ce + anchor }, d_logits, terms))
    }

    /// Loss and parameter gradients for one example.
    pub fn example_loss_and_grad(
        &self,
        image: ArrayView3<f64>,
        labels: &BTreeSet<LabelId>,
    ) -> Result<(LossBreakdown, AlignParams), AlignError> {
        let fp = self.forward(image)?;
        let (loss, d_logits, terms) = self.loss_from_forward(&fp, labels)?;
        let p = &self.params;
        let k = self.criteria.num_criteria() as f64;

        let flat = fp.similarities.concat();
        let d_head_w = d_logits
            .view()
            .insert_axis(ndarray::Axis(1))
            .dot(&flat.view().insert_axis(ndarray::Axis(0)));
        let d_head_b = p.head.b.as_ref().map(|_| d_logits.clone());
        let d_flat = p.head.w.t().dot(&d_logits);

        let d_blocks = fp.similarities.split_like(&d_flat);
        let mut d_zhat = Array2::zeros(fp.attended.z_hat.dim());
        for (i, (d_block, (_, g_anchor))) in d_blocks.into_iter().zip(&terms).enumerate() {
            let d_sims = d_block + &(g_anchor / k);
            d_zhat.row_mut(i).assign(&self.anchors[i].matrix.t().dot(&d_sims));
        }

        let ag = attend_backward(&p.tokens, &fp.acts.features, &fp.cache, &d_zhat);
        let (d_enc_w, d_enc_b) = p.encoder.backward(&fp.acts, &ag.feats);

        // Matrix products of transposed views may come back column-major.
        let c = |a: Array2<f64>| a.as_standard_layout().into_owned();
        let grads = AlignParams {
            encoder: PatchEncoder { weight: c(d_enc_w), bias: d_enc_b, ..p.encoder.clone() },
            tokens: ConceptTokens { z: c(ag.z), w_q: c(ag.w_q), w_k: c(ag.w_k), w_v: c(ag.w_v), heads: p.tokens.heads },
            head: ClassifierHead { w: c(d_head_w), b: d_head_b },
        };
        Ok((loss, grads))
    }

    /// Mean loss and mean gradient over a batch.
    pub fn loss_and_grad(&self, batch: &[&Example]) -> Result<(LossBreakdown, AlignParams), AlignError> {
        if batch.is_empty() {
            return Err(AlignError::Precondition("empty batch".into()));
        }
        let mut total = LossBreakdown::default();
        let mut grads = self.params.zeros_like();
        for ex in batch {
            let (l, g) = self.example_loss_and_grad(ex.image.view(), &ex.labels)?;
            total.ce += l.ce;
            total.anchor += l.anchor;
            total.total += l.total;
            grads.accumulate(&g);
        }
        let n = batch.len() as f64;
        grads.scale(1.0 / n);
        Ok((LossBreakdown { ce: total.ce / n, anchor: total.anchor / n, total: total.total / n }, grads))
    }

    /// Mean loss over a set of examples.
    pub fn mean_loss(&self, examples: &[&Example]) -> Result<LossBreakdown, AlignError> {
        if examples.is_empty() {
            return Err(AlignError::Precondition("no examples".into()));
        }
        let mut total = LossBreakdown::default();
        for ex in examples {
            let l = self.example_loss(ex.image.view(), &ex.labels)?;
            total.ce += l.ce;
            total.anchor += l.anchor;
            total.total += l.total;
        }
        let n = examples.len() as f64;
        Ok(LossBreakdown { ce: total.ce / n, anchor: total.anchor / n, total: total.total / n })
    }
}
