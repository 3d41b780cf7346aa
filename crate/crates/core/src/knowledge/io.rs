use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Criterion, CriterionSet, DiseaseLabel};

/// Failure to read a criteria document. `path` is the JSON path of the
/// offending field (e.g. `criteria[3].id`), or `.` for document-level errors.
#[derive(Debug, thiserror::Error)]
pub enum SchemaError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("schema violation at `{path}`: {message}")]
    Schema { path: String, message: String },
}

impl SchemaError {
    pub fn field_path(&self) -> Option<&str> {
        match self {
            SchemaError::Schema { path, .. } => Some(path),
            SchemaError::Io { .. } => None,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CriteriaDoc {
    version: String,
    labels: Vec<LabelDoc>,
    criteria: Vec<CriterionDoc>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LabelDoc {
    id: usize,
    code: String,
    name: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CriterionDoc {
    id: usize,
    name: String,
    descriptions: Vec<DescriptionDoc>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DescriptionDoc {
    text: String,
    diseases: Vec<usize>,
}

/// Parses a criteria document. Structural checks (dense label and criterion
/// ids) happen here; content checks belong to `validate_criteria`.
pub fn parse_criteria(json: &str) -> Result<CriterionSet, SchemaError> {
    let de = &mut serde_json::Deserializer::from_str(json);
    let doc: CriteriaDoc = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        let message = inner.to_string();
        // Missing top-level keys are reported by serde at the parent path;
        // surface the key itself so callers see which field is absent.
        let path = match missing_field(&message) {
            Some(field) if path == "." => field.to_string(),
            Some(field) => format!("{path}.{field}"),
            None => path,
        };
        SchemaError::Schema { path, message }
    })?;

    for (i, l) in doc.labels.iter().enumerate() {
        if l.id != i {
            return Err(SchemaError::Schema {
                path: format!("labels[{i}].id"),
                message: format!("label ids must be dense and ordered; expected {i}, found {}", l.id),
            });
        }
    }
    let mut criteria = Vec::with_capacity(doc.criteria.len());
    for (i, c) in doc.criteria.into_iter().enumerate() {
        if c.id != i {
            return Err(SchemaError::Schema {
                path: format!("criteria[{i}].id"),
                message: format!("criterion ids must be dense and ordered; expected {i}, found {}", c.id),
            });
        }
        criteria.push(Criterion::new(
            c.id,
            c.name,
            c.descriptions.into_iter().map(|d| (d.text, d.diseases)).collect(),
        ));
    }
    Ok(CriterionSet {
        version: doc.version,
        labels: doc
            .labels
            .into_iter()
            .map(|l| DiseaseLabel { id: l.id, code: l.code, name: l.name })
            .collect(),
        criteria,
    })
}

fn missing_field(message: &str) -> Option<&str> {
    let rest = message.strip_prefix("missing field `")?;
    rest.split('`').next()
}

/// Serializes with a stable key order (version, labels, criteria).
pub fn to_json(cs: &CriterionSet) -> String {
    let doc = CriteriaDoc {
        version: cs.version.clone(),
        labels: cs
            .labels
            .iter()
            .map(|l| LabelDoc { id: l.id, code: l.code.clone(), name: l.name.clone() })
            .collect(),
        criteria: cs
            .criteria
            .iter()
            .map(|c| CriterionDoc {
                id: c.id,
                name: c.name.clone(),
                descriptions: c
                    .descriptions
                    .iter()
                    .map(|d| DescriptionDoc {
                        text: d.text.clone(),
                        diseases: d.diseases.iter().copied().collect(),
                    })
                    .collect(),
            })
            .collect(),
    };
    let mut s = serde_json::to_string_pretty(&doc).expect("criteria serialize");
    s.push('\n');
    s
}

pub fn save_criteria(cs: &CriterionSet, path: &Path) -> Result<(), SchemaError> {
    crate::io::write_atomic(path, to_json(cs).as_bytes()).map_err(|source| SchemaError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_criteria(path: &Path) -> Result<CriterionSet, SchemaError> {
    let text = std::fs::read_to_string(path).map_err(|source| SchemaError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_criteria(&text)
}
