//! Run configuration. Every field has a default, so `{}` is a valid config
//! and `radalign defaults` prints the complete document.

use std::path::{Path, PathBuf};

use clap::ValueEnum;
use radalign::alignment::{ModelConfig, TrainConfig};
use radalign::promptgen::{RetryPolicy, DEFAULT_IN_FLIGHT};
use radalign::retrieval::DEFAULT_TOP_K;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub paths: Paths,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub retrieval: RetrievalConfig,
    pub mining: MiningConfig,
    pub report: ReportConfig,
    pub llm: LlmConfig,
}

/// Fallbacks for command flags that are not given.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub criteria: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub index: Option<PathBuf>,
    pub template: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrievalConfig {
    pub k: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self { k: DEFAULT_TOP_K }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MiningConfig {
    pub n_criteria: usize,
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self { n_criteria: 14 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportConfig {
    /// Score at which a class is reported as present.
    pub threshold: f64,
    /// Concurrent LLM calls when reporting on several images.
    pub in_flight: usize,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self { threshold: 0.5, in_flight: DEFAULT_IN_FLIGHT }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum LlmBackend {
    /// Deterministic offline client.
    #[default]
    Mock,
    /// OpenAI-compatible chat-completion endpoint.
    Http,
}

/// LLM client selection. The API key is only read from the environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LlmConfig {
    pub backend: LlmBackend,
    /// Falls back to `RADALIGN_LLM_ENDPOINT`.
    pub endpoint: Option<String>,
    /// Falls back to `RADALIGN_LLM_MODEL`.
    pub model: Option<String>,
    pub timeout_secs: u64,
    pub temperature: f64,
    pub max_tokens: Option<u32>,
    pub max_retries: u32,
    pub base_delay_ms: u64,
}

impl Default for LlmConfig {
    fn default() -> Self {
        let retry = RetryPolicy::default();
        Self {
            backend: LlmBackend::Mock,
            endpoint: None,
            model: None,
            timeout_secs: 60,
            temperature: 0.0,
            max_tokens: None,
            max_retries: retry.max_retries,
            base_delay_ms: retry.base_delay.as_millis() as u64,
        }
    }
}

impl RunConfig {
    pub fn parse(json: &str, path: &Path) -> Result<Self, CliError> {
        let schema = |field: String, message: String| CliError::Schema { path: path.to_owned(), field, message };
        let de = &mut serde_json::Deserializer::from_str(json);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let field = e.path().to_string();
            schema(field, e.into_inner().to_string())
        })?;
        cfg.validate().map_err(|(field, message)| schema(field.into(), message))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let json = crate::error::read_to_string(path)?;
        Self::parse(&json, path)
    }

    /// Loads `path` when given, else the defaults.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self, CliError> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    fn validate(&self) -> Result<(), (&'static str, String)> {
        if self.retrieval.k == 0 {
            return Err(("retrieval.k", "must be at least 1".into()));
        }
        if self.mining.n_criteria == 0 {
            return Err(("mining.n_criteria", "must be at least 1".into()));
        }
        if self.train.epochs == 0 {
            return Err(("train.epochs", "must be at least 1".into()));
        }
        if self.train.batch_size == 0 {
            return Err(("train.batch_size", "must be at least 1".into()));
        }
        if !(self.model.tau > 0.0 && self.model.tau.is_finite()) {
            return Err(("model.tau", "must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.report.threshold) {
            return Err(("report.threshold", "must lie in [0, 1]".into()));
        }
        if self.report.in_flight == 0 {
            return Err(("report.in_flight", "must be at least 1".into()));
        }
        Ok(())
    }
}
