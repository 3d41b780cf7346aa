//! `RALN` checkpoint files.
//!
//! Layout (little-endian):
//! - magic `RALN`, u32 version
//! - u32 metadata length, UTF-8 JSON metadata (model config + criteria document)
//! - u32 block count, then per block: u32 name length, name bytes, u32 ndim,
//!   ndim x u64 dims, f64 data
//!
//! Trainable parameters are stored under their `AlignParams` names; the
//! frozen anchors as `anchor.<criterion id>`.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{AlignModel, AlignParams, ClassifierHead, ConceptTokens, ModelConfig};
use crate::encoders::{PatchEncoder, TextEmbedding};
use crate::io::{put_f64s, put_u32, put_u64, write_atomic, ByteReader};
use crate::knowledge::{parse_criteria, to_json};

const MAGIC: &[u8; 4] = b"RALN";
const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    Format(String),
}

/// SHA-256 of a serialized checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Fingerprint(pub [u8; 32]);

impl Fingerprint {
    pub fn of(bytes: &[u8]) -> Self {
        Self(Sha256::digest(bytes).into())
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl std::fmt::Display for Fingerprint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.to_hex())
    }
}

#[derive(Serialize, Deserialize)]
struct Meta {
    config: ModelConfig,
    criteria: String,
}

fn put_block(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64]) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    put_u32(out, shape.len() as u32);
    for &d in shape {
        put_u64(out, d as u64);
    }
    put_f64s(out, data.iter());
}

impl AlignModel {
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_string(&Meta { config: self.config().clone(), criteria: to_json(self.criteria()) })
            .expect("metadata serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u32(&mut out, meta.len() as u32);
        out.extend_from_slice(meta.as_bytes());
        let tensors = self.params.tensors();
        put_u32(&mut out, (tensors.len() + self.anchors().len()) as u32);
        for t in &tensors {
            put_block(&mut out, t.name, &t.shape, t.data);
        }
        for a in self.anchors() {
            let name = format!("anchor.{}", a.criterion_id);
            put_block(&mut out, &name, a.matrix.shape(), a.matrix.as_slice().expect("standard layout"));
        }
        out
    }

    pub fn fingerprint(&self) -> Fingerprint {
        Fingerprint::of(&self.to_checkpoint_bytes())
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let fmt = |m: &str| CheckpointError::Format(m.to_string());
        let mut r = ByteReader::new(bytes);
        if r.take(4) != Some(MAGIC.as_slice()) {
            return Err(fmt("bad magic"));
        }
        let version = r.u32().ok_or_else(|| fmt("truncated header"))?;
        if version != VERSION {
            return Err(CheckpointError::Format(format!("unsupported version {version}")));
        }
        let meta_len = r.u32().ok_or_else(|| fmt("truncated header"))? as usize;
        let meta = r.take(meta_len).ok_or_else(|| fmt("truncated metadata"))?;
        let meta: Meta = serde_json::from_slice(meta).map_err(|e| CheckpointError::Format(format!("metadata: {e}")))?;
        let criteria = parse_criteria(&meta.criteria).map_err(|e| CheckpointError::Format(format!("criteria: {e}")))?;

        let count = r.u32().ok_or_else(|| fmt("truncated block count"))?;
        let mut blocks: BTreeMap<String, (Vec<usize>, Vec<f64>)> = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u32().ok_or_else(|| fmt("truncated block"))? as usize;
            let name = r.take(name_len).ok_or_else(|| fmt("truncated block name"))?;
            let name = String::from_utf8(name.to_vec()).map_err(|_| fmt("block name is not UTF-8"))?;
            let ndim = r.u32().ok_or_else(|| fmt("truncated block"))? as usize;
            if ndim > 8 {
                return Err(fmt("implausible tensor rank"));
            }
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64().ok_or_else(|| fmt("truncated shape"))? as usize);
            }
            let n = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or_else(|| fmt("shape overflow"))?;
            let data = r.f64s(n).ok_or_else(|| fmt("truncated tensor data"))?;
            blocks.insert(name, (shape, data));
        }
        if !r.is_empty() {
            return Err(fmt("trailing bytes"));
        }

        let mut take2 = |name: &str| -> Result<Array2<f64>, CheckpointError> {
            let (shape, data) = blocks.remove(name).ok_or_else(|| CheckpointError::Format(format!("missing block {name}")))?;
            match shape[..] {
                [a, b] => Array2::from_shape_vec((a, b), data).map_err(|e| CheckpointError::Format(e.to_string())),
                _ => Err(CheckpointError::Format(format!("block {name} is not 2-D"))),
            }
        };
        let encoder_weight = take2("encoder.weight")?;
        let z = take2("tokens.z")?;
        let w_q = take2("tokens.w_q")?;
        let w_k = take2("tokens.w_k")?;
        let w_v = take2("tokens.w_v")?;
        let head_w = take2("head.w")?;
        let anchors = criteria
            .criteria
            .iter()
            .map(|c| take2(&format!("anchor.{}", c.id)).map(|matrix| TextEmbedding { criterion_id: c.id, matrix }))
            .collect::<Result<Vec<_>, _>>()?;
        let mut take1 = |name: &str| -> Result<Option<Array1<f64>>, CheckpointError> {
            match blocks.remove(name) {
                None => Ok(None),
                Some((shape, data)) if shape.len() == 1 => Ok(Some(Array1::from(data))),
                Some(_) => Err(CheckpointError::Format(format!("block {name} is not 1-D"))),
            }
        };
        let encoder_bias = take1("encoder.bias")?;
        let head_b = take1("head.b")?;
        if encoder_bias.is_some() != meta.config.encoder_bias || head_b.is_some() != meta.config.classifier_bias {
            return Err(fmt("bias blocks disagree with the stored config"));
        }
        if let Some(extra) = blocks.keys().next() {
            return Err(CheckpointError::Format(format!("unexpected block {extra}")));
        }

        let spec = meta.config.encoder;
        let params = AlignParams {
            encoder: PatchEncoder {
                weight: encoder_weight,
                bias: encoder_bias,
                patch_size: spec.patch_size,
                channels: spec.channels,
            },
            tokens: ConceptTokens { z, w_q, w_k, w_v, heads: meta.config.heads },
            head: ClassifierHead { w: head_w, b: head_b },
        };
        AlignModel::from_parts(meta.config, criteria, anchors, params)
            .map_err(|e| CheckpointError::Format(e.to_string()))
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<Fingerprint, CheckpointError> {
        let bytes = self.to_checkpoint_bytes();
        write_atomic(path, &bytes)?;
        Ok(Fingerprint::of(&bytes))
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_checkpoint_bytes(&std::fs::read(path)?)
    }
}
