use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use radalign::alignment::CheckpointError;
use radalign::datagen::DatasetError;
use radalign::knowledge::SchemaError;
use radalign::retrieval::IndexFormatError;
use serde_json::json;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("file not found: {}", path.display())]
    MissingFile { path: PathBuf },
    #[error("schema violation in {} at `{field}`: {message}", path.display())]
    Schema { path: PathBuf, field: String, message: String },
    #[error("LLM failure: {0}")]
    Llm(String),
    #[error("{} exists; pass --force to overwrite", path.display())]
    Exists { path: PathBuf },
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::MissingFile { .. } => 2,
            CliError::Schema { .. } => 3,
            CliError::Llm(_) => 4,
            CliError::Exists { .. } | CliError::Other(_) => 1,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::MissingFile { .. } => "missing_file",
            CliError::Schema { .. } => "schema",
            CliError::Llm(_) => "llm",
            CliError::Exists { .. } => "exists",
            CliError::Other(_) => "error",
        }
    }

    /// One-line JSON for stderr.
    pub fn to_json_line(&self) -> String {
        let mut v = json!({ "error": self.kind(), "exit_code": self.exit_code(), "message": self.to_string() });
        match self {
            CliError::MissingFile { path } | CliError::Exists { path } => {
                v["path"] = json!(path.display().to_string());
            }
            CliError::Schema { path, field, .. } => {
                v["path"] = json!(path.display().to_string());
                v["field"] = json!(field);
            }
            _ => {}
        }
        v.to_string()
    }

    pub fn other(e: impl std::fmt::Display) -> Self {
        CliError::Other(e.to_string())
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        if e.kind() == ErrorKind::NotFound {
            CliError::MissingFile { path: path.to_owned() }
        } else {
            CliError::Other(format!("{}: {e}", path.display()))
        }
    }
}

pub fn read_to_string(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

/// Fails with `MissingFile` unless `path` exists.
pub fn require(path: &Path) -> Result<&Path, CliError> {
    if path.exists() {
        Ok(path)
    } else {
        Err(CliError::MissingFile { path: path.to_owned() })
    }
}

/// Fails with `Exists` when `path` is present and `force` is off.
pub fn guard(path: &Path, force: bool) -> Result<(), CliError> {
    if !force && path.exists() {
        return Err(CliError::Exists { path: path.to_owned() });
    }
    Ok(())
}

/// Criteria schema errors carry the JSON path; this adds the file.
pub fn criteria_error(file: &Path, e: SchemaError) -> CliError {
    match e {
        SchemaError::Io { source, .. } => CliError::io(file, source),
        SchemaError::Schema { path, message } => CliError::Schema { path: file.to_owned(), field: path, message },
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Io { path, source } => CliError::io(&path, source),
            DatasetError::Manifest { path, message } => CliError::Schema { path, field: ".".into(), message },
            DatasetError::Record { index, message } => {
                CliError::Schema { path: PathBuf::from(radalign::datagen::MANIFEST), field: format!("examples[{index}]"), message }
            }
            other @ DatasetError::Image { .. } => CliError::other(other),
        }
    }
}

pub fn checkpoint_error(path: &Path, e: CheckpointError) -> CliError {
    match e {
        CheckpointError::Io(e) => CliError::io(path, e),
        other => CliError::Other(format!("{}: {other}", path.display())),
    }
}

pub fn index_error(path: &Path, e: IndexFormatError) -> CliError {
    match e {
        IndexFormatError::Io(e) => CliError::io(path, e),
        other => CliError::Other(format!("{}: {other}", path.display())),
    }
}
