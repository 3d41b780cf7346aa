//! LLM client abstraction plus the deterministic mocks used by tests and the
//! offline CLI path.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use async_trait::async_trait;

use crate::knowledge::CriterionSet;

/// Sampling parameters forwarded to the backend.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationParams {
    pub temperature: f64,
    pub max_tokens: Option<u32>,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self { temperature: 0.0, max_tokens: None }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LlmError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("http status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("empty completion")]
    EmptyCompletion,
    #[error("client misconfigured: {0}")]
    Config(String),
}

impl LlmError {
    /// Transport failures, rate limits and server errors are worth retrying.
    pub fn is_retryable(&self) -> bool {
        match self {
            LlmError::Transport(_) => true,
            LlmError::Status { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

/// A text-completion backend.
#[async_trait]
pub trait LlmClient: Send + Sync {
    /// Backend name recorded in report provenance.
    fn name(&self) -> &str;

    async fn generate(&self, prompt: &str, params: &GenerationParams) -> Result<String, LlmError>;
}

#[async_trait]
impl<T: LlmClient + ?Sized> LlmClient for std::sync::Arc<T> {
    fn name(&self) -> &str {
        (**self).name()
    }

    async fn generate(&self, prompt: &str, params: &GenerationParams) -> Result<String, LlmError> {
        (**self).generate(prompt, params).await
    }
}

pub(crate) const TASK_LIST_CRITERIA: &str = "TASK: LIST_CRITERIA";
pub(crate) const TASK_DESCRIBE_CRITERIA: &str = "TASK: DESCRIBE_CRITERIA";
pub(crate) const SECTION_FINDINGS: &str = "### FINDINGS";
pub(crate) const SECTION_DIAGNOSIS: &str = "### DIAGNOSIS";

/// Deterministic offline backend.
///
/// Mining prompts are answered from a reference criterion set (the bundled
/// fixture by default). Any other prompt is treated as a report request and
/// answered by echoing the FINDINGS section and the positive diagnoses.
pub struct MockLlmClient {
    reference: CriterionSet,
}

impl Default for MockLlmClient {
    fn default() -> Self {
        Self { reference: CriterionSet::chest_xray_fixture() }
    }
}

impl MockLlmClient {
    pub fn with_reference(reference: CriterionSet) -> Self {
        Self { reference }
    }

    fn list_criteria(&self, prompt: &str) -> Result<String, LlmError> {
        let count: usize = prompt
            .lines()
            .find_map(|l| l.strip_prefix("COUNT: "))
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| LlmError::Malformed("mining prompt lacks COUNT line".into()))?;
        let names: Vec<String> = (0..count)
            .map(|i| match self.reference.criteria.get(i) {
                Some(c) => c.name.clone(),
                None => format!("Criterion {}", i + 1),
            })
            .collect();
        Ok(serde_json::to_string(&names).unwrap())
    }

    fn describe_criteria(&self, prompt: &str) -> Result<String, LlmError> {
        let names: Vec<String> = prompt
            .lines()
            .find_map(|l| l.strip_prefix("CRITERIA: "))
            .and_then(|s| serde_json::from_str(s).ok())
            .ok_or_else(|| LlmError::Malformed("mining prompt lacks CRITERIA line".into()))?;
        let reply: Vec<serde_json::Value> = names
            .iter()
            .map(|name| {
                let descriptions: Vec<serde_json::Value> = match self.reference.criterion_by_name(name) {
                    Some(c) => c
                        .descriptions
                        .iter()
                        .map(|d| {
                            let codes: Vec<&str> = d
                                .diseases
                                .iter()
                                .map(|&id| self.reference.labels[id].code.as_str())
                                .collect();
                            serde_json::json!({ "text": d.text, "diseases": codes })
                        })
                        .collect(),
                    None => vec![serde_json::json!({
                        "text": format!("{} unremarkable", name.to_lowercase()),
                        "diseases": []
                    })],
                };
                serde_json::json!({ "name": name, "descriptions": descriptions })
            })
            .collect();
        Ok(serde_json::to_string(&reply).unwrap())
    }

    fn echo_report(prompt: &str) -> String {
        let section = |header: &str| -> Vec<&str> {
            prompt
                .lines()
                .skip_while(|l| l.trim() != header)
                .skip(1)
                .take_while(|l| !l.starts_with("###"))
                .filter(|l| !l.trim().is_empty())
                .collect()
        };
        let mut out = String::from("FINDINGS:\n");
        for line in section(SECTION_FINDINGS) {
            out.push_str(line.trim_start_matches("- "));
            out.push('\n');
        }
        out.push_str("IMPRESSION:\n");
        let positives: Vec<&str> = section(SECTION_DIAGNOSIS)
            .into_iter()
            .filter(|l| l.ends_with("[present]"))
            .collect();
        if positives.is_empty() {
            out.push_str("No acute cardiopulmonary abnormality.\n");
        } else {
            for line in positives {
                out.push_str(line.trim_start_matches("- "));
                out.push('\n');
            }
        }
        out
    }
}

#[async_trait]
impl LlmClient for MockLlmClient {
    fn name(&self) -> &str {
        "mock"
    }

    async fn generate(&self, prompt: &str, _params: &GenerationParams) -> Result<String, LlmError> {
        if prompt.contains(TASK_LIST_CRITERIA) {
            self.list_criteria(prompt)
        } else if prompt.contains(TASK_DESCRIBE_CRITERIA) {
            self.describe_criteria(prompt)
        } else {
            Ok(Self::echo_report(prompt))
        }
    }
}

/// Replays canned replies in order, then fails with a transport error.
pub struct ScriptedLlm {
    replies: Mutex<std::collections::VecDeque<String>>,
    prompts: Mutex<Vec<String>>,
}

impl ScriptedLlm {
    pub fn new<I, S>(replies: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            replies: Mutex::new(replies.into_iter().map(Into::into).collect()),
            prompts: Mutex::new(Vec::new()),
        }
    }

    /// Every prompt received so far.
    pub fn prompts(&self) -> Vec<String> {
        self.prompts.lock().unwrap().clone()
    }
}

#[async_trait]
impl LlmClient for ScriptedLlm {
    fn name(&self) -> &str {
        "scripted"
    }

    async fn generate(&self, prompt: &str, _params: &GenerationParams) -> Result<String, LlmError> {
        self.prompts.lock().unwrap().push(prompt.to_string());
        self.replies
            .lock()
            .unwrap()
            .pop_front()
            .ok_or_else(|| LlmError::Transport("script exhausted".into()))
    }
}

/// Fails with a retryable transport error `failures` times, then delegates.
pub struct FlakyLlm<C> {
    inner: C,
    remaining: AtomicUsize,
    calls: AtomicUsize,
}

impl<C> FlakyLlm<C> {
    pub fn new(inner: C, failures: usize) -> Self {
        Self { inner, remaining: AtomicUsize::new(failures), calls: AtomicUsize::new(0) }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

#[async_trait]
impl<C: LlmClient> LlmClient for FlakyLlm<C> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    async fn generate(&self, prompt: &str, params: &GenerationParams) -> Result<String, LlmError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let failing = self
            .remaining
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |r| r.checked_sub(1))
            .is_ok();
        if failing {
            return Err(LlmError::Transport("simulated connection reset".into()));
        }
        self.inner.generate(prompt, params).await
    }
}
