//! Diagnostic criteria: the named assessment axes, their per-disease concept
//! descriptions, and the description-to-disease mapping used for positive
//! selection and synthetic report construction.

mod io;
mod mining;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

pub use io::{load_criteria, parse_criteria, save_criteria, to_json, SchemaError};
pub use mining::{mine_criteria, MiningError, MiningOutcome, MiningTurn};

/// Index of a disease class, dense in `[0, N)`.
pub type LabelId = usize;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DiseaseLabel {
    pub id: LabelId,
    pub code: String,
    pub name: String,
}

/// One way a criterion can present, linked to zero or more diseases.
/// An empty disease set marks the "normal" description of a criterion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConceptDescription {
    pub criterion_id: usize,
    pub local_id: usize,
    pub text: String,
    pub diseases: BTreeSet<LabelId>,
}

impl ConceptDescription {
    pub fn is_normal(&self) -> bool {
        self.diseases.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Criterion {
    pub id: usize,
    pub name: String,
    pub descriptions: Vec<ConceptDescription>,
}

impl Criterion {
    /// Builds a criterion, assigning `criterion_id` and `local_id` from position.
    pub fn new(id: usize, name: impl Into<String>, descriptions: Vec<(String, Vec<LabelId>)>) -> Self {
        let descriptions = descriptions
            .into_iter()
            .enumerate()
            .map(|(local_id, (text, diseases))| ConceptDescription {
                criterion_id: id,
                local_id,
                text,
                diseases: diseases.into_iter().collect(),
            })
            .collect();
        Self { id, name: name.into(), descriptions }
    }

    pub fn texts(&self) -> Vec<&str> {
        self.descriptions.iter().map(|d| d.text.as_str()).collect()
    }
}

/// The full knowledge base: K criteria over N disease labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CriterionSet {
    pub version: String,
    pub labels: Vec<DiseaseLabel>,
    pub criteria: Vec<Criterion>,
}

const FIXTURE_JSON: &str = include_str!("../../data/chest_xray_criteria.json");

impl CriterionSet {
    /// The bundled 14-criterion, 5-label chest X-ray set. Criterion names
    /// follow common radiographic assessment axes; the description text is
    /// synthetic.
    pub fn chest_xray_fixture() -> Self {
        parse_criteria(FIXTURE_JSON).expect("bundled fixture parses")
    }

    pub fn fixture_json() -> &'static str {
        FIXTURE_JSON
    }

    /// Number of criteria, K.
    pub fn num_criteria(&self) -> usize {
        self.criteria.len()
    }

    /// Number of disease labels, N.
    pub fn num_labels(&self) -> usize {
        self.labels.len()
    }

    /// Total description count, the width of the concatenated similarity vector.
    pub fn total_descriptions(&self) -> usize {
        self.criteria.iter().map(|c| c.descriptions.len()).sum()
    }

    /// Per-criterion description counts n_i.
    pub fn block_sizes(&self) -> Vec<usize> {
        self.criteria.iter().map(|c| c.descriptions.len()).collect()
    }

    pub fn criterion_by_name(&self, name: &str) -> Option<&Criterion> {
        self.criteria.iter().find(|c| c.name == name)
    }

    pub fn label_by_code(&self, code: &str) -> Option<&DiseaseLabel> {
        self.labels.iter().find(|l| l.code == code)
    }

    /// All descriptions (across criteria) that map to `label`, in criterion order.
    pub fn descriptions_for(&self, label: LabelId) -> Vec<&ConceptDescription> {
        self.criteria
            .iter()
            .flat_map(|c| c.descriptions.iter())
            .filter(|d| d.diseases.contains(&label))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    NoCriteria,
    NoLabels,
    EmptyCriterion { criterion: usize },
    DuplicateCriterionName { name: String },
    DuplicateLabelCode { code: String },
    EmptyDescription { criterion: usize, local: usize },
    DanglingDiseaseId { criterion: usize, local: usize, disease: LabelId },
    UnmappedDisease { disease: LabelId },
}

impl Violation {
    pub fn severity(&self) -> Severity {
        match self {
            Violation::UnmappedDisease { .. } => Severity::Warning,
            _ => Severity::Error,
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NoCriteria => write!(f, "criterion set has no criteria"),
            Violation::NoLabels => write!(f, "criterion set has no disease labels"),
            Violation::EmptyCriterion { criterion } => {
                write!(f, "criterion {criterion} has no descriptions")
            }
            Violation::DuplicateCriterionName { name } => write!(f, "duplicate criterion name {name:?}"),
            Violation::DuplicateLabelCode { code } => write!(f, "duplicate label code {code:?}"),
            Violation::EmptyDescription { criterion, local } => {
                write!(f, "criterion {criterion} description {local} has empty text")
            }
            Violation::DanglingDiseaseId { criterion, local, disease } => write!(
                f,
                "criterion {criterion} description {local} maps to dangling disease id {disease}"
            ),
            Violation::UnmappedDisease { disease } => {
                write!(f, "warning: disease {disease} has no mapped description in any criterion")
            }
        }
    }
}

/// Checks a criterion set for content-level problems. An empty result means
/// the set is valid; warnings do not make it invalid (see [`is_valid`]).
pub fn validate_criteria(cs: &CriterionSet) -> Vec<Violation> {
    let mut out = Vec::new();
    if cs.criteria.is_empty() {
        out.push(Violation::NoCriteria);
    }
    if cs.labels.is_empty() {
        out.push(Violation::NoLabels);
    }

    let mut name_counts: BTreeMap<&str, usize> = BTreeMap::new();
    for c in &cs.criteria {
        *name_counts.entry(c.name.as_str()).or_default() += 1;
    }
    // Report each duplicated name once, in first-appearance order.
    let mut reported = BTreeSet::new();
    for c in &cs.criteria {
        if name_counts[c.name.as_str()] > 1 && reported.insert(c.name.as_str()) {
            out.push(Violation::DuplicateCriterionName { name: c.name.clone() });
        }
    }

    let mut codes = BTreeSet::new();
    for l in &cs.labels {
        if !codes.insert(l.code.as_str()) {
            out.push(Violation::DuplicateLabelCode { code: l.code.clone() });
        }
    }

    let n = cs.labels.len();
    let mut mapped = vec![false; n];
    for c in &cs.criteria {
        if c.descriptions.is_empty() {
            out.push(Violation::EmptyCriterion { criterion: c.id });
        }
        for d in &c.descriptions {
            if d.text.trim().is_empty() {
                out.push(Violation::EmptyDescription { criterion: c.id, local: d.local_id });
            }
            for &disease in &d.diseases {
                if disease >= n {
                    out.push(Violation::DanglingDiseaseId {
                        criterion: c.id,
                        local: d.local_id,
                        disease,
                    });
                } else {
                    mapped[disease] = true;
                }
            }
        }
    }
    for (disease, m) in mapped.into_iter().enumerate() {
        if !m {
            out.push(Violation::UnmappedDisease { disease });
        }
    }
    out
}

/// True when `violations` carries no error-severity entries.
pub fn is_valid(violations: &[Violation]) -> bool {
    violations.iter().all(|v| v.severity() == Severity::Warning)
}

/// Positive description indices of one criterion for an image with the
/// given label set.
///
/// Descriptions whose disease image intersects `label_ids` win; otherwise the
/// criterion's normal descriptions; otherwise description 0. Never empty.
///
/// Panics if `criterion_id` is out of range.
pub fn positives_for(cs: &CriterionSet, criterion_id: usize, label_ids: &BTreeSet<LabelId>) -> Vec<usize> {
    let criterion = &cs.criteria[criterion_id];
    let matched: Vec<usize> = criterion
        .descriptions
        .iter()
        .filter(|d| !d.diseases.is_disjoint(label_ids))
        .map(|d| d.local_id)
        .collect();
    if !matched.is_empty() {
        return matched;
    }
    let normal: Vec<usize> = criterion
        .descriptions
        .iter()
        .filter(|d| d.is_normal())
        .map(|d| d.local_id)
        .collect();
    if !normal.is_empty() {
        return normal;
    }
    vec![0]
}
