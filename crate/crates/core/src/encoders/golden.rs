//! `RAEM` embedding files: magic, u32 version, u64 rows, u64 cols, then
//! row-major little-endian f64 data.

use std::path::Path;

use ndarray::Array2;

use crate::io::{put_f64s, put_u32, put_u64, write_atomic, ByteReader};

const MAGIC: &[u8; 4] = b"RAEM";
const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum EmbeddingFileError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("malformed embedding file: {0}")]
    Format(String),
}

pub fn write_embedding_file(path: &Path, matrix: &Array2<f64>) -> Result<(), EmbeddingFileError> {
    let (rows, cols) = matrix.dim();
    let mut out = Vec::with_capacity(24 + rows * cols * 8);
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u64(&mut out, rows as u64);
    put_u64(&mut out, cols as u64);
    put_f64s(&mut out, matrix.iter());
    write_atomic(path, &out)?;
    Ok(())
}

pub fn read_embedding_file(path: &Path) -> Result<Array2<f64>, EmbeddingFileError> {
    let bytes = std::fs::read(path)?;
    let fmt = |m: &str| EmbeddingFileError::Format(m.to_string());
    let mut r = ByteReader::new(&bytes);
    if r.take(4) != Some(MAGIC.as_slice()) {
        return Err(fmt("bad magic"));
    }
    let version = r.u32().ok_or_else(|| fmt("truncated header"))?;
    if version != VERSION {
        return Err(EmbeddingFileError::Format(format!("unsupported version {version}")));
    }
    let rows = r.u64().ok_or_else(|| fmt("truncated header"))? as usize;
    let cols = r.u64().ok_or_else(|| fmt("truncated header"))? as usize;
    let n = rows.checked_mul(cols).ok_or_else(|| fmt("shape overflow"))?;
    let data = r.f64s(n).ok_or_else(|| fmt("truncated data"))?;
    if !r.is_empty() {
        return Err(fmt("trailing bytes"));
    }
    Array2::from_shape_vec((rows, cols), data).map_err(|e| EmbeddingFileError::Format(e.to_string()))
}
