//! Deterministic bag-of-words encoder for tests and offline runs.
//!
//! Each token maps to a pseudorandom unit vector drawn from a ChaCha stream
//! seeded with a 64-bit SHA-256 prefix of `(seed, token)`. A text embeds as
//! the normalized sum of its token vectors, so word order does not matter
//! and texts sharing all tokens embed identically.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use super::{EmbeddingError, EmbeddingVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MockEncoder {
    dim: usize,
    seed: u64,
}

impl MockEncoder {
    pub fn new(dim: usize, seed: u64) -> Result<Self, EmbeddingError> {
        if dim < EmbeddingVector::MIN_DIM {
            return Err(EmbeddingError::BadVector(format!("mock dim {dim} < 2")));
        }
        Ok(Self { dim, seed })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn token_hash(&self, token: &str) -> u64 {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update([0u8]);
        h.update(token.as_bytes());
        let digest = h.finalize();
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }

    /// Unnormalized Gaussian vector for one token.
    fn token_raw(&self, token: &str) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.token_hash(token));
        (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    fn unit(v: &mut [f64]) {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= n);
    }

    /// Lowercased alphanumeric runs.
    pub fn tokenize(text: &str) -> Vec<String> {
        text.to_lowercase()
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .map(str::to_string)
            .collect()
    }

    pub fn encode_text(&self, text: &str) -> Result<EmbeddingVector, EmbeddingError> {
        let tokens = Self::tokenize(text);
        if tokens.is_empty() {
            return self.encode_token("");
        }
        let mut sum = vec![0.0f64; self.dim];
        for t in &tokens {
            let mut v = self.token_raw(t);
            Self::unit(&mut v);
            sum.iter_mut().zip(&v).for_each(|(s, x)| *s += x);
        }
        EmbeddingVector::from_f64(&sum).or_else(|_| self.encode_token(""))
    }

    /// The key string is treated as one verbatim token.
    pub fn encode_image(&self, key: &str) -> Result<EmbeddingVector, EmbeddingError> {
        self.encode_token(key)
    }

    fn encode_token(&self, token: &str) -> Result<EmbeddingVector, EmbeddingError> {
        EmbeddingVector::from_f64(&self.token_raw(token))
    }
}
