use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{EncoderError, EncoderSpec};

/// Frozen anchor embeddings of one criterion: one row per description,
/// unit-norm by default.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding {
    pub criterion_id: usize,
    pub matrix: Array2<f64>,
}

/// Bag-of-tokens text encoder. Each token maps to a fixed Gaussian vector
/// derived from `(seed, hash(token))`; a text embeds to the (normalized) sum
/// of its token vectors, so a row never depends on the other texts in the batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashedTextEncoder {
    pub d: usize,
    pub seed: u64,
    pub normalize: bool,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

impl HashedTextEncoder {
    pub fn new(spec: &EncoderSpec) -> Self {
        Self { d: spec.d, seed: spec.seed, normalize: spec.normalize_text }
    }

    fn token_vector(&self, token: &str) -> Array1<f64> {
        let key = fnv1a(token.as_bytes()) ^ self.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        Array1::from_iter((0..self.d).map(|_| StandardNormal.sample(&mut rng)))
    }

    pub fn encode_one(&self, text: &str) -> Result<Array1<f64>, EncoderError> {
        if text.trim().is_empty() {
            return Err(EncoderError::Precondition("cannot encode empty text".into()));
        }
        let mut acc = Array1::<f64>::zeros(self.d);
        let mut count = 0usize;
        for tok in tokens(text) {
            acc += &self.token_vector(&tok);
            count += 1;
        }
        let norm = acc.dot(&acc).sqrt();
        if count == 0 || norm == 0.0 {
            return Err(EncoderError::Precondition(format!("text {text:?} has no encodable tokens")));
        }
        Ok(if self.normalize { acc / norm } else { acc })
    }

    pub fn encode(&self, texts: &[&str]) -> Result<Array2<f64>, EncoderError> {
        if texts.is_empty() {
            return Err(EncoderError::Precondition("no texts to encode".into()));
        }
        let mut out = Array2::zeros((texts.len(), self.d));
        for (i, t) in texts.iter().enumerate() {
            out.row_mut(i).assign(&self.encode_one(t)?);
        }
        Ok(out)
    }
}

/// Encodes one criterion's description texts into its anchor matrix.
pub fn encode_text(texts: &[&str], spec: &EncoderSpec, criterion_id: usize) -> Result<TextEmbedding, EncoderError> {
    spec.check()?;
    let matrix = HashedTextEncoder::new(spec).encode(texts)?;
    Ok(TextEmbedding { criterion_id, matrix })
}
