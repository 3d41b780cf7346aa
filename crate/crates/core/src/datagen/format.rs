//! Dataset directories: `manifest.json` plus one `RIMG` file per image.
//!
//! `RIMG` layout (little-endian): magic, u32 version, u32 H, u32 W, u32 C,
//! then H*W*C f64 values in row-major `(H, W, C)` order.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::Example;
use crate::io::{put_f64s, put_u32, write_atomic, ByteReader};

const MAGIC: &[u8; 4] = b"RIMG";
const VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: malformed manifest: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error("record {index}: {message}")]
    Record { index: usize, message: String },
    #[error("{path}: malformed image: {message}")]
    Image { path: PathBuf, message: String },
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    examples: Vec<serde_json::Value>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: String,
    image_file: String,
    labels: Vec<usize>,
    report: String,
}

pub fn image_to_bytes(image: &Array3<f64>) -> Vec<u8> {
    let (h, w, c) = image.dim();
    let mut out = Vec::with_capacity(20 + 8 * image.len());
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, h as u32);
    put_u32(&mut out, w as u32);
    put_u32(&mut out, c as u32);
    put_f64s(&mut out, image.iter());
    out
}

pub fn image_from_bytes(bytes: &[u8]) -> Result<Array3<f64>, String> {
    let mut r = ByteReader::new(bytes);
    if r.take(4) != Some(MAGIC.as_slice()) {
        return Err("bad magic".into());
    }
    let version = r.u32().ok_or("truncated header")?;
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let (h, w, c) = match (r.u32(), r.u32(), r.u32()) {
        (Some(h), Some(w), Some(c)) => (h as usize, w as usize, c as usize),
        _ => return Err("truncated header".into()),
    };
    let n = h.checked_mul(w).and_then(|x| x.checked_mul(c)).ok_or("shape overflow")?;
    let data = r.f64s(n).ok_or("truncated pixel data")?;
    if !r.is_empty() {
        return Err("trailing bytes".into());
    }
    Array3::from_shape_vec((h, w, c), data).map_err(|e| e.to_string())
}

pub fn write_image(path: &Path, image: &Array3<f64>) -> std::io::Result<()> {
    write_atomic(path, &image_to_bytes(image))
}

pub fn read_image(path: &Path) -> Result<Array3<f64>, DatasetError> {
    let bytes = std::fs::read(path).map_err(|source| DatasetError::Io { path: path.to_owned(), source })?;
    image_from_bytes(&bytes).map_err(|message| DatasetError::Image { path: path.to_owned(), message })
}

/// Writes `examples` under directory `dir` (created if needed). Images go to
/// `images/NNNNNN.rimg`; the manifest is written last.
pub fn save_dataset(dir: &Path, examples: &[Example]) -> Result<(), DatasetError> {
    let io = |path: &Path| {
        let path = path.to_owned();
        move |source| DatasetError::Io { path, source }
    };
    let images = dir.join("images");
    std::fs::create_dir_all(&images).map_err(io(&images))?;
    let mut records = Vec::with_capacity(examples.len());
    for (i, e) in examples.iter().enumerate() {
        let rel = format!("images/{i:06}.rimg");
        let path = dir.join(&rel);
        write_image(&path, &e.image).map_err(io(&path))?;
        records.push(
            serde_json::to_value(Record {
                id: e.id.clone(),
                image_file: rel,
                labels: e.labels.iter().copied().collect(),
                report: e.report.clone(),
            })
            .expect("record serializes"),
        );
    }
    let mut text = serde_json::to_string_pretty(&Manifest { examples: records }).expect("manifest serializes");
    text.push('\n');
    let manifest = dir.join(MANIFEST);
    write_atomic(&manifest, text.as_bytes()).map_err(io(&manifest))
}

/// Loads a dataset from a directory or from a manifest path. An empty
/// manifest file is an empty dataset.
pub fn load_dataset(path: &Path) -> Result<Vec<Example>, DatasetError> {
    let (manifest_path, base) = if path.is_dir() {
        (path.join(MANIFEST), path.to_owned())
    } else {
        (path.to_owned(), path.parent().map(Path::to_owned).unwrap_or_default())
    };
    let text = std::fs::read_to_string(&manifest_path)
        .map_err(|source| DatasetError::Io { path: manifest_path.clone(), source })?;
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| DatasetError::Manifest { path: manifest_path.clone(), message: e.to_string() })?;
    manifest
        .examples
        .into_iter()
        .enumerate()
        .map(|(index, value)| {
            let rec: Record =
                serde_json::from_value(value).map_err(|e| DatasetError::Record { index, message: e.to_string() })?;
            if rec.report.is_empty() {
                return Err(DatasetError::Record { index, message: "empty report".into() });
            }
            let image = read_image(&base.join(&rec.image_file))
                .map_err(|e| DatasetError::Record { index, message: e.to_string() })?;
            Ok(Example { id: rec.id, image, labels: rec.labels.into_iter().collect::<BTreeSet<_>>(), report: rec.report })
        })
        .collect()
}
