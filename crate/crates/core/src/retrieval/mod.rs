//! Report index: attended concept-token matrices of training images paired
//! with their reports, searched exhaustively by Frobenius inner product.

mod format;

use std::collections::BTreeSet;

use ndarray::{Array2, ArrayView2, Zip};
use serde::Serialize;

pub use format::{index_from_bytes, index_to_bytes, load_index, save_index, IndexFormatError};

use crate::alignment::{AlignError, AlignModel, Fingerprint};
use crate::datagen::Example;
use crate::knowledge::LabelId;

/// Default number of retrieved cases.
pub const DEFAULT_TOP_K: usize = 7;

/// Label bitmaps hold at most this many classes.
pub const MAX_INDEX_LABELS: usize = 31;

#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry {
    /// Insertion order.
    pub entry_id: usize,
    /// `(K, d)` attended concept tokens.
    pub tokens: Array2<f64>,
    pub report: String,
    pub labels: Option<BTreeSet<LabelId>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportIndex {
    pub num_tokens: usize,
    pub dim: usize,
    pub model_fingerprint: Fingerprint,
    entries: Vec<IndexEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Hit {
    pub entry_id: usize,
    pub score: f64,
    pub report: String,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RetrievalError {
    #[error("query tokens have shape {query:?} but the index holds {index:?}")]
    Shape { query: (usize, usize), index: (usize, usize) },
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error(transparent)]
    Model(#[from] AlignError),
}

/// Raised, not returned as an error, when an index was built by a different
/// checkpoint than the one querying it.
#[derive(Debug, Clone, PartialEq)]
pub struct FingerprintMismatch {
    pub index: Fingerprint,
    pub model: Fingerprint,
}

impl std::fmt::Display for FingerprintMismatch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "index was built by checkpoint {} but the current model is {}", self.index, self.model)
    }
}

impl ReportIndex {
    pub fn new(num_tokens: usize, dim: usize, model_fingerprint: Fingerprint) -> Self {
        Self { num_tokens, dim, model_fingerprint, entries: Vec::new() }
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.num_tokens, self.dim)
    }

    /// Appends an entry; the id is its position.
    pub fn push(
        &mut self,
        tokens: Array2<f64>,
        report: String,
        labels: Option<BTreeSet<LabelId>>,
    ) -> Result<usize, RetrievalError> {
        if tokens.dim() != self.shape() {
            return Err(RetrievalError::Shape { query: tokens.dim(), index: self.shape() });
        }
        if report.is_empty() {
            return Err(RetrievalError::Precondition("report must be nonempty".into()));
        }
        if let Some(l) = &labels {
            if l.iter().any(|&c| c >= MAX_INDEX_LABELS) {
                return Err(RetrievalError::Precondition(format!("labels must be below {MAX_INDEX_LABELS}")));
            }
        }
        let entry_id = self.entries.len();
        self.entries.push(IndexEntry { entry_id, tokens, report, labels });
        Ok(entry_id)
    }

    pub fn check_fingerprint(&self, model: &AlignModel) -> Option<FingerprintMismatch> {
        let current = model.fingerprint();
        (current != self.model_fingerprint).then_some(FingerprintMismatch { index: self.model_fingerprint, model: current })
    }
}

/// Sum over criteria of per-token dot products.
pub fn frobenius(a: ArrayView2<f64>, b: ArrayView2<f64>) -> f64 {
    Zip::from(a).and(b).fold(0.0, |acc, x, y| acc + x * y)
}

/// One entry per example with a nonempty report, in dataset order, with the
/// example's labels kept for instrumentation.
pub fn build_index(model: &AlignModel, dataset: &[Example]) -> Result<ReportIndex, RetrievalError> {
    let k = model.criteria().num_criteria();
    let d = model.config().encoder.d;
    let mut index = ReportIndex::new(k, d, model.fingerprint());
    for e in dataset {
        if e.report.trim().is_empty() {
            tracing::warn!(id = %e.id, "skipping example without a report");
            continue;
        }
        let inf = model.infer(e.image.view())?;
        index.push(inf.attended.z_hat, e.report.clone(), Some(e.labels.clone()))?;
    }
    Ok(index)
}

/// Top-`k` entries by Frobenius inner product with `query`, descending,
/// ties by ascending entry id.
pub fn query_topk(index: &ReportIndex, query: ArrayView2<f64>, k: usize) -> Result<Vec<Hit>, RetrievalError> {
    if k == 0 {
        return Err(RetrievalError::Precondition("k must be at least 1".into()));
    }
    if index.is_empty() {
        return Err(RetrievalError::Precondition("index is empty".into()));
    }
    if query.dim() != index.shape() {
        return Err(RetrievalError::Shape { query: query.dim(), index: index.shape() });
    }
    let mut scored: Vec<(f64, usize)> =
        index.entries.iter().map(|e| (frobenius(query, e.tokens.view()), e.entry_id)).collect();
    let cmp = |a: &(f64, usize), b: &(f64, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
    let k = k.min(scored.len());
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, cmp);
        scored.truncate(k);
    }
    scored.sort_by(cmp);
    Ok(scored
        .into_iter()
        .map(|(score, id)| Hit { entry_id: id, score, report: index.entries[id].report.clone() })
        .collect())
}
