//! Text encoder adapters for the dual-encoder retriever.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::text::tokenize;

/// Encoder input limit in tokens.
pub const ENCODER_MAX_TOKENS: usize = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    values: Vec<f32>,
    norm: f32,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f32>) -> Self {
        let norm = values.iter().map(|v| v * v).sum::<f32>().sqrt();
        Self { values, norm }
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn norm(&self) -> f32 {
        self.norm
    }

    pub fn dimension(&self) -> usize {
        self.values.len()
    }

    pub fn zeros(dim: usize) -> Self {
        Self::new(vec![0.0; dim])
    }
}

/// Query tower f_q and passage tower f_x of a dual encoder.
pub trait DualEncoder: Send + Sync {
    /// Identifies the encoder weights; stored in index snapshots.
    fn fingerprint(&self) -> String;
    fn dimension(&self) -> usize;
    fn encode_query_text(&self, text: &str) -> Result<EmbeddingVector>;
    fn encode_passage_text(&self, text: &str) -> Result<EmbeddingVector>;
}

/// Deterministic fixture encoder: every unigram and bigram of the token
/// sequence contributes a pseudo-random projection of its FNV-1a hash.
/// Both towers share the projection.
#[derive(Debug, Clone)]
pub struct HashEncoder {
    pub dimension: usize,
    pub seed: u64,
    pub max_tokens: usize,
}

impl HashEncoder {
    pub fn new(dimension: usize, seed: u64) -> Self {
        Self {
            dimension,
            seed,
            max_tokens: ENCODER_MAX_TOKENS,
        }
    }

    fn project(&self, key: u64, weight: f32, out: &mut [f32]) {
        let mut state = key ^ self.seed;
        for o in out.iter_mut() {
            let r = splitmix64(&mut state);
            // 24 high bits -> uniform in [-1, 1).
            let unit = (r >> 40) as f32 / (1u64 << 24) as f32;
            *o += weight * (2.0 * unit - 1.0);
        }
    }

    fn encode(&self, text: &str) -> EmbeddingVector {
        let mut tokens = tokenize(text);
        if tokens.len() > self.max_tokens {
            tokens.drain(..tokens.len() - self.max_tokens);
        }
        let mut acc = vec![0.0f32; self.dimension];
        for t in &tokens {
            self.project(fnv1a(t.as_bytes()), 1.0, &mut acc);
        }
        for pair in tokens.windows(2) {
            let mut key = pair[0].as_bytes().to_vec();
            key.push(0x1f);
            key.extend_from_slice(pair[1].as_bytes());
            self.project(fnv1a(&key), 0.5, &mut acc);
        }
        EmbeddingVector::new(acc)
    }
}

impl DualEncoder for HashEncoder {
    fn fingerprint(&self) -> String {
        format!(
            "hash-encoder:v1:dim={}:seed={}:max={}",
            self.dimension, self.seed, self.max_tokens
        )
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn encode_query_text(&self, text: &str) -> Result<EmbeddingVector> {
        Ok(self.encode(text))
    }

    fn encode_passage_text(&self, text: &str) -> Result<EmbeddingVector> {
        Ok(self.encode(text))
    }
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
