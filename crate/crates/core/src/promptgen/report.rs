use std::time::{Duration, Instant};

use futures::stream::{self, StreamExt};
use serde::Serialize;

use super::llm::{GenerationParams, LlmClient, LlmError};
use super::{render_prompt, PromptBundle, Template};

/// Default cap on concurrent LLM calls.
pub const DEFAULT_IN_FLIGHT: usize = 4;

/// Retries with exponential backoff: attempt `n` (0-based) waits
/// `base_delay * 2^n` before the next try.
#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_retries: 3, base_delay: Duration::from_millis(250) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportDraft {
    pub text: String,
    /// Exact prompt sent to the client.
    pub prompt: String,
    pub client_name: String,
    pub template_id: String,
    #[serde(skip)]
    pub latency: Duration,
    /// Failed attempts before the successful one.
    pub retries: u32,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ReportError {
    #[error("invalid prompt bundle: {0}")]
    Bundle(String),
    #[error("template mismatch: bundle wants {bundle}, got {template}")]
    TemplateMismatch { bundle: String, template: String },
    #[error("LLM call failed after {attempts} attempt(s): {source}")]
    Llm { attempts: u32, source: LlmError },
}

/// Renders the prompt and asks `client` for a report, retrying retryable
/// failures per `retry`. The bundle is only read.
pub async fn generate_report(
    bundle: &PromptBundle,
    template: &Template,
    client: &dyn LlmClient,
    params: &GenerationParams,
    retry: &RetryPolicy,
) -> Result<ReportDraft, ReportError> {
    bundle.check(None).map_err(ReportError::Bundle)?;
    if bundle.template_id != template.id {
        return Err(ReportError::TemplateMismatch { bundle: bundle.template_id.clone(), template: template.id.clone() });
    }
    let prompt = render_prompt(bundle, template);
    let start = Instant::now();
    let mut attempt = 0u32;
    loop {
        let err = match client.generate(&prompt, params).await {
            Ok(text) if text.trim().is_empty() => LlmError::EmptyCompletion,
            Ok(text) => {
                let latency = start.elapsed();
                tracing::info!(client = client.name(), ?latency, retries = attempt, "report generated");
                return Ok(ReportDraft {
                    text,
                    prompt,
                    client_name: client.name().to_string(),
                    template_id: template.id.clone(),
                    latency,
                    retries: attempt,
                });
            }
            Err(e) => e,
        };
        if !err.is_retryable() || attempt >= retry.max_retries {
            return Err(ReportError::Llm { attempts: attempt + 1, source: err });
        }
        let delay = retry.base_delay.saturating_mul(1 << attempt.min(16));
        tracing::warn!(client = client.name(), attempt, ?delay, error = %err, "retrying LLM call");
        tokio::time::sleep(delay).await;
        attempt += 1;
    }
}

/// Runs `generate_report` for every bundle with at most `in_flight` calls
/// outstanding. Results keep the input order.
pub async fn generate_reports(
    bundles: &[PromptBundle],
    template: &Template,
    client: &dyn LlmClient,
    params: &GenerationParams,
    retry: &RetryPolicy,
    in_flight: usize,
) -> Vec<Result<ReportDraft, ReportError>> {
    stream::iter(bundles)
        .map(|b| generate_report(b, template, client, params, retry))
        .buffered(in_flight.max(1))
        .collect()
        .await
}
