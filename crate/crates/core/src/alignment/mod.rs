//! Concept alignment: learnable concept tokens attend over the image feature
//! grid, are pulled toward their criterion's description anchors by a
//! contrastive loss, and feed a linear classifier through their similarities
//! to those anchors.

mod attention;
mod checkpoint;
mod classifier;
mod loss;
mod model;
mod optim;
mod train;

pub use attention::{cross_attend, AttendedTokens, ConceptTokens};
pub use checkpoint::{CheckpointError, Fingerprint};
pub use classifier::{classify, similarities, Classification, ClassifierHead, SimilarityVector, TaskMode};
pub use loss::{anchor_loss, total_loss, LossBreakdown};
pub use model::{
    select_findings, AlignModel, AlignParams, Finding, FindingSet, ForwardPass, Inference, ModelConfig, ParamTensor,
};
pub use optim::AdamW;
pub use train::{train, EpochLoss, LossTrace, TrainConfig, TrainedRun};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AlignError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error(
        "non-finite loss at epoch {epoch}, batch {batch} (ce {ce}, anchor {anchor}); examples: {}",
        example_ids.join(", ")
    )]
    NonFinite { epoch: usize, batch: usize, example_ids: Vec<String>, ce: f64, anchor: f64 },
}
