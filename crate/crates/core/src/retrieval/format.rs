//! `RIDX` index files.
//!
//! Layout (little-endian): magic, u32 version, u64 entry count, u32 K,
//! u32 d, 32-byte model fingerprint, then per entry the `(K, d)` token block
//! as f64, u32 report length, UTF-8 report bytes and a u32 label bitmap.
//! Bit 31 of the bitmap marks that labels are present; bits 0..31 are the
//! label ids.

use std::collections::BTreeSet;
use std::path::Path;

use ndarray::Array2;

use super::{IndexEntry, ReportIndex, MAX_INDEX_LABELS};
use crate::alignment::Fingerprint;
use crate::io::{put_f64s, put_u32, put_u64, write_atomic, ByteReader};

const MAGIC: &[u8; 4] = b"RIDX";
const VERSION: u32 = 1;
const LABELS_PRESENT: u32 = 1 << 31;

#[derive(Debug, thiserror::Error)]
pub enum IndexFormatError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("malformed index: {0}")]
    Format(String),
}

fn bitmap(labels: &Option<BTreeSet<usize>>) -> u32 {
    match labels {
        None => 0,
        Some(l) => l.iter().fold(LABELS_PRESENT, |acc, &c| acc | (1 << c)),
    }
}

fn unpack(bits: u32) -> Option<BTreeSet<usize>> {
    (bits & LABELS_PRESENT != 0).then(|| (0..MAX_INDEX_LABELS).filter(|c| bits & (1 << c) != 0).collect())
}

pub fn index_to_bytes(index: &ReportIndex) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u64(&mut out, index.entries.len() as u64);
    put_u32(&mut out, index.num_tokens as u32);
    put_u32(&mut out, index.dim as u32);
    out.extend_from_slice(&index.model_fingerprint.0);
    for e in &index.entries {
        put_f64s(&mut out, e.tokens.iter());
        put_u32(&mut out, e.report.len() as u32);
        out.extend_from_slice(e.report.as_bytes());
        put_u32(&mut out, bitmap(&e.labels));
    }
    out
}

pub fn index_from_bytes(bytes: &[u8]) -> Result<ReportIndex, IndexFormatError> {
    let fmt = |m: &str| IndexFormatError::Format(m.to_string());
    let mut r = ByteReader::new(bytes);
    if r.take(4) != Some(MAGIC.as_slice()) {
        return Err(fmt("bad magic"));
    }
    let version = r.u32().ok_or_else(|| fmt("truncated header"))?;
    if version != VERSION {
        return Err(IndexFormatError::Format(format!("unsupported version {version}")));
    }
    let count = r.u64().ok_or_else(|| fmt("truncated header"))?;
    let k = r.u32().ok_or_else(|| fmt("truncated header"))? as usize;
    let d = r.u32().ok_or_else(|| fmt("truncated header"))? as usize;
    let fp: [u8; 32] = r.take(32).ok_or_else(|| fmt("truncated header"))?.try_into().unwrap();
    let mut index = ReportIndex::new(k, d, Fingerprint(fp));
    let block = k.checked_mul(d).ok_or_else(|| fmt("shape overflow"))?;
    for i in 0..count {
        let trunc = || IndexFormatError::Format(format!("truncated at entry {i}"));
        let data = r.f64s(block).ok_or_else(trunc)?;
        let len = r.u32().ok_or_else(trunc)? as usize;
        let report = r.take(len).ok_or_else(trunc)?;
        let report = String::from_utf8(report.to_vec())
            .map_err(|_| IndexFormatError::Format(format!("entry {i}: report is not UTF-8")))?;
        let labels = unpack(r.u32().ok_or_else(trunc)?);
        let tokens = Array2::from_shape_vec((k, d), data).map_err(|e| IndexFormatError::Format(e.to_string()))?;
        index.entries.push(IndexEntry { entry_id: i as usize, tokens, report, labels });
    }
    if !r.is_empty() {
        return Err(fmt("trailing bytes"));
    }
    Ok(index)
}

pub fn save_index(index: &ReportIndex, path: &Path) -> Result<(), IndexFormatError> {
    Ok(write_atomic(path, &index_to_bytes(index))?)
}

pub fn load_index(path: &Path) -> Result<ReportIndex, IndexFormatError> {
    index_from_bytes(&std::fs::read(path)?)
}
