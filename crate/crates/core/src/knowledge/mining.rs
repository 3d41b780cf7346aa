//! Two-turn LLM mining of diagnostic criteria from a report corpus: first the
//! criterion names, then per-disease descriptions for each named criterion.

use serde::Deserialize;

use super::{is_valid, validate_criteria, Criterion, CriterionSet, DiseaseLabel, Violation};
use crate::promptgen::llm::{GenerationParams, LlmClient, LlmError, TASK_DESCRIBE_CRITERIA, TASK_LIST_CRITERIA};

/// Reports quoted into the first mining prompt are capped at this many.
const MAX_CORPUS_EXCERPTS: usize = 200;

#[derive(Debug, thiserror::Error)]
pub enum MiningError {
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("llm transport failure: {0}")]
    Transport(#[from] LlmError),
    #[error("unparseable llm response ({reason}); raw response: {raw}")]
    Unparseable { reason: String, raw: String },
    #[error("mined criteria failed validation: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<Violation>),
}

/// One prompt/response exchange, kept verbatim.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MiningTurn {
    pub prompt: String,
    pub response: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiningOutcome {
    pub criteria: CriterionSet,
    pub transcript: Vec<MiningTurn>,
}

#[derive(Deserialize)]
struct DescribedCriterion {
    name: String,
    descriptions: Vec<DescribedConcept>,
}

#[derive(Deserialize)]
struct DescribedConcept {
    text: String,
    #[serde(default)]
    diseases: Vec<String>,
}

fn names_prompt(corpus: &[String], n_criteria: usize) -> String {
    let mut p = String::new();
    p.push_str(TASK_LIST_CRITERIA);
    p.push('\n');
    p.push_str(&format!("COUNT: {n_criteria}\n"));
    p.push_str(
        "You are an expert radiologist. From the report findings below, derive exactly COUNT \
         disentangled diagnostic criteria (named assessment axes such as an organ size or a \
         tissue density). Reply with a JSON array of criterion names only.\n",
    );
    p.push_str("REPORTS:\n");
    for (i, r) in corpus.iter().take(MAX_CORPUS_EXCERPTS).enumerate() {
        p.push_str(&format!("[{}] {}\n", i + 1, r.trim()));
    }
    p
}

fn describe_prompt(names: &[String], labels: &[DiseaseLabel]) -> String {
    let mut p = String::new();
    p.push_str(TASK_DESCRIBE_CRITERIA);
    p.push('\n');
    p.push_str(&format!("CRITERIA: {}\n", serde_json::to_string(names).unwrap()));
    let codes: Vec<String> = labels.iter().map(|l| format!("{} ({})", l.code, l.name)).collect();
    p.push_str(&format!("DISEASES: {}\n", codes.join(", ")));
    p.push_str(
        "For every criterion, describe how it manifests for each disease, plus one description of \
         its normal appearance. Reply with a JSON array of objects \
         {\"name\": criterion, \"descriptions\": [{\"text\": description, \"diseases\": [disease codes]}]}; \
         normal descriptions have an empty disease list.\n",
    );
    p
}

/// Extracts the outermost JSON array from a reply that may carry prose around it.
fn json_array_slice(raw: &str) -> Option<&str> {
    let start = raw.find('[')?;
    let end = raw.rfind(']')?;
    (end > start).then(|| &raw[start..=end])
}

fn unparseable(reason: impl Into<String>, raw: &str) -> MiningError {
    MiningError::Unparseable { reason: reason.into(), raw: raw.to_string() }
}

/// Mines `n_criteria` diagnostic criteria over `labels` from `corpus`.
///
/// Each mined criterion gets a normal description (empty disease set) if the
/// model did not supply one, so every criterion has a positive for healthy
/// images.
pub async fn mine_criteria(
    corpus: &[String],
    llm: &dyn LlmClient,
    n_criteria: usize,
    labels: &[DiseaseLabel],
) -> Result<MiningOutcome, MiningError> {
    if corpus.iter().all(|r| r.trim().is_empty()) {
        return Err(MiningError::Precondition("corpus is empty".into()));
    }
    if n_criteria == 0 {
        return Err(MiningError::Precondition("n_criteria must be positive".into()));
    }
    if labels.is_empty() {
        return Err(MiningError::Precondition("label set is empty".into()));
    }
    let params = GenerationParams::default();
    let mut transcript = Vec::with_capacity(2);

    let prompt = names_prompt(corpus, n_criteria);
    let raw = llm.generate(&prompt, &params).await?;
    tracing::info!(turn = 1, prompt = %prompt, response = %raw, "criteria mining turn");
    transcript.push(MiningTurn { prompt, response: raw.clone() });
    let names: Vec<String> = json_array_slice(&raw)
        .and_then(|s| serde_json::from_str(s).ok())
        .ok_or_else(|| unparseable("expected a JSON array of criterion names", &raw))?;
    if names.len() != n_criteria {
        return Err(unparseable(
            format!("expected {n_criteria} criterion names, got {}", names.len()),
            &raw,
        ));
    }

    let prompt = describe_prompt(&names, labels);
    let raw = llm.generate(&prompt, &params).await?;
    tracing::info!(turn = 2, prompt = %prompt, response = %raw, "criteria mining turn");
    transcript.push(MiningTurn { prompt, response: raw.clone() });
    let described: Vec<DescribedCriterion> = json_array_slice(&raw)
        .and_then(|s| serde_json::from_str(s).ok())
        .ok_or_else(|| unparseable("expected a JSON array of described criteria", &raw))?;

    let mut criteria = Vec::with_capacity(n_criteria);
    for (id, name) in names.iter().enumerate() {
        let entry = described
            .iter()
            .find(|d| &d.name == name)
            .ok_or_else(|| unparseable(format!("no descriptions for criterion {name:?}"), &raw))?;
        let mut descriptions = Vec::new();
        for concept in &entry.descriptions {
            let mut ids = Vec::with_capacity(concept.diseases.len());
            for code in &concept.diseases {
                let label = labels
                    .iter()
                    .find(|l| l.code.eq_ignore_ascii_case(code) || l.name.eq_ignore_ascii_case(code))
                    .ok_or_else(|| unparseable(format!("unknown disease code {code:?}"), &raw))?;
                ids.push(label.id);
            }
            descriptions.push((concept.text.trim().to_string(), ids));
        }
        if !descriptions.iter().any(|(_, d)| d.is_empty()) {
            descriptions.insert(0, (format!("{} within normal limits", name.to_lowercase()), vec![]));
        }
        criteria.push(Criterion::new(id, name.clone(), descriptions));
    }

    let cs = CriterionSet {
        version: format!("mined-{}-k{}", llm.name(), n_criteria),
        labels: labels.to_vec(),
        criteria,
    };
    let violations = validate_criteria(&cs);
    if !is_valid(&violations) {
        return Err(MiningError::Invalid(violations));
    }
    for w in &violations {
        tracing::warn!("{w}");
    }
    Ok(MiningOutcome { criteria: cs, transcript })
}
