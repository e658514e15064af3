use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::attention::Mat;

/// Deterministic stand-in for a text encoder: every lowercase word maps to a
/// fixed `N(0, 1)` vector seeded by its SHA-256 digest, one row per word.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashTextEmbedder {
    pub dim: usize,
}

impl HashTextEmbedder {
    pub fn new(dim: usize) -> Self {
        Self { dim }
    }

    pub fn word(&self, word: &str) -> Vec<f64> {
        let digest = Sha256::digest(word.to_lowercase().as_bytes());
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        let mut rng = ChaCha8Rng::from_seed(seed);
        (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    /// `words x dim`; an empty text encodes as one zero row.
    pub fn encode(&self, text: &str) -> Mat {
        let words: Vec<&str> = text.split_whitespace().collect();
        if words.is_empty() {
            return Mat::zeros((1, self.dim));
        }
        let mut out = Mat::zeros((words.len(), self.dim));
        for (r, w) in words.iter().enumerate() {
            for (c, v) in self.word(w).into_iter().enumerate() {
                out[[r, c]] = v;
            }
        }
        out
    }
}
