//! Text and vision encoders behind small, stable interfaces.
//!
//! The text side is frozen: a hashed bag-of-tokens passed through a seeded
//! random projection and L2-normalized. The vision side is a trainable
//! patch encoder producing an `(M, d_v)` feature grid.

mod golden;
mod text;
mod vision;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

pub use golden::{read_embedding_file, write_embedding_file, EmbeddingFileError};
pub use text::{encode_text, HashedTextEncoder, TextEmbedding};
pub use vision::{encode_image, PatchActivations, PatchEncoder, VisionFeatures};

/// Shape contract shared by the encoders and the alignment model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSpec {
    /// Shared embedding width of anchors and concept tokens.
    pub d: usize,
    /// Width of each vision feature row.
    pub d_v: usize,
    /// Spatial positions per image.
    pub positions: usize,
    /// Side length of the square, non-overlapping patches.
    pub patch_size: usize,
    pub channels: usize,
    pub seed: u64,
    /// L2-normalize anchor rows. Concept tokens are never normalized.
    pub normalize_text: bool,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        Self { d: 64, d_v: 32, positions: 64, patch_size: 4, channels: 1, seed: 0, normalize_text: true }
    }
}

impl EncoderSpec {
    pub fn patch_len(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn check(&self) -> Result<(), EncoderError> {
        let fields = [
            ("d", self.d),
            ("d_v", self.d_v),
            ("positions", self.positions),
            ("patch_size", self.patch_size),
            ("channels", self.channels),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(EncoderError::Precondition(format!("encoder spec field `{name}` must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EncoderError {
    #[error("precondition failed: {0}")]
    Precondition(String),
}

/// A single-channel image as an `(H, W, 1)` array.
pub fn grayscale(pixels: Array2<f64>) -> Array3<f64> {
    let (h, w) = pixels.dim();
    pixels.into_shape_with_order((h, w, 1)).expect("contiguous reshape")
}
