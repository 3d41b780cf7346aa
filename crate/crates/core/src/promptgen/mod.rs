//! Knowledge-guided prompting: the predicted diagnosis, per-criterion
//! findings and retrieved similar reports are rendered through a versioned
//! template and sent to an LLM that restructures them into a report.

mod http;
pub mod llm;
mod report;

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use http::{HttpLlmClient, ENV_API_KEY, ENV_ENDPOINT, ENV_MODEL};
pub use llm::{FlakyLlm, GenerationParams, LlmClient, LlmError, MockLlmClient, ScriptedLlm};
pub use report::{generate_report, generate_reports, ReportDraft, ReportError, RetryPolicy, DEFAULT_IN_FLIGHT};

use crate::alignment::{FindingSet, Inference};
use crate::knowledge::CriterionSet;
use crate::retrieval::Hit;

pub const DEFAULT_TEMPLATE_ID: &str = "radalign-report-v1";
const DEFAULT_TEMPLATE_TEXT: &str = include_str!("../../templates/radalign-report-v1.txt");
const PLACEHOLDERS: [&str; 3] = ["{diagnosis}", "{findings}", "{cases}"];

/// Findings longer than this many characters are truncated by default.
pub const DEFAULT_MAX_FINDING_CHARS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub code: String,
    pub name: String,
    pub score: f64,
    pub present: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedCase {
    pub score: f64,
    pub report: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub predictions: Vec<Prediction>,
    pub findings: FindingSet,
    pub retrieved: Vec<RetrievedCase>,
    pub template_id: String,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TemplateError {
    #[error("template {id} lacks placeholder {placeholder}")]
    MissingPlaceholder { id: String, placeholder: &'static str },
    #[error("{0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Template {
    pub id: String,
    pub text: String,
    /// Longest finding text rendered verbatim; longer ones are cut and logged.
    pub max_finding_chars: usize,
}

impl Default for Template {
    fn default() -> Self {
        Self::parse(DEFAULT_TEMPLATE_ID, DEFAULT_TEMPLATE_TEXT).expect("bundled template is valid")
    }
}

impl Template {
    pub fn parse(id: impl Into<String>, text: impl Into<String>) -> Result<Self, TemplateError> {
        let (id, text) = (id.into(), text.into());
        for placeholder in PLACEHOLDERS {
            if !text.contains(placeholder) {
                return Err(TemplateError::MissingPlaceholder { id, placeholder });
            }
        }
        Ok(Self { id, text, max_finding_chars: DEFAULT_MAX_FINDING_CHARS })
    }

    /// Loads a template file; its id is the file stem.
    pub fn from_file(path: &Path) -> Result<Self, TemplateError> {
        let text = std::fs::read_to_string(path).map_err(|e| TemplateError::Io(format!("{}: {e}", path.display())))?;
        let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        Self::parse(id, text)
    }
}

impl PromptBundle {
    /// Collects the inputs of one report prompt. A class is marked present
    /// when its score reaches `threshold`.
    pub fn assemble(
        criteria: &CriterionSet,
        inference: &Inference,
        hits: &[Hit],
        threshold: f64,
        template_id: &str,
    ) -> Self {
        let predictions = criteria
            .labels
            .iter()
            .zip(inference.scores.iter())
            .map(|(l, &score)| Prediction {
                code: l.code.clone(),
                name: l.name.clone(),
                score,
                present: score >= threshold,
            })
            .collect();
        Self {
            predictions,
            findings: inference.findings.clone(),
            retrieved: hits.iter().map(|h| RetrievedCase { score: h.score, report: h.report.clone() }).collect(),
            template_id: template_id.to_string(),
        }
    }

    /// Retrieved cases descend by score and, when `num_criteria` is given,
    /// there is one finding per criterion in criterion order.
    pub fn check(&self, num_criteria: Option<usize>) -> Result<(), String> {
        if self.retrieved.windows(2).any(|w| w[0].score < w[1].score) {
            return Err("retrieved cases are not sorted by descending score".into());
        }
        if let Some(k) = num_criteria {
            let ids: Vec<usize> = self.findings.iter().map(|f| f.criterion_id).collect();
            if ids != (0..k).collect::<Vec<_>>() {
                return Err(format!("findings must cover criteria 0..{k} in order, got {ids:?}"));
            }
        }
        Ok(())
    }
}

fn clip(text: &str, max: usize, criterion: &str) -> String {
    match text.char_indices().nth(max) {
        None => text.to_string(),
        Some((cut, _)) => {
            tracing::warn!(criterion, len = text.chars().count(), max, "finding truncated in prompt");
            format!("{}...", &text[..cut])
        }
    }
}

/// Renders `bundle` through `template`. Pure: value-equal inputs give
/// byte-identical prompts.
pub fn render_prompt(bundle: &PromptBundle, template: &Template) -> String {
    let mut diagnosis = String::new();
    for p in &bundle.predictions {
        let tag = if p.present { "present" } else { "absent" };
        writeln!(diagnosis, "- {} ({}): {:.3} [{tag}]", p.name, p.code, p.score).unwrap();
    }
    let mut findings = String::new();
    for f in bundle.findings.iter() {
        let text = clip(&f.text, template.max_finding_chars, &f.criterion);
        writeln!(findings, "- {}: {} (similarity {:.3})", f.criterion, text, f.similarity).unwrap();
    }
    let mut cases = String::new();
    if bundle.retrieved.is_empty() {
        cases.push_str("none available\n");
    }
    for (rank, c) in bundle.retrieved.iter().enumerate() {
        writeln!(cases, "Case {} (score {:.3}):\n{}\n", rank + 1, c.score, c.report.trim()).unwrap();
    }
    template
        .text
        .replace("{diagnosis}", diagnosis.trim_end())
        .replace("{findings}", findings.trim_end())
        .replace("{cases}", cases.trim_end())
}
