//! Text and image encoders behind one interface.
//!
//! Three backends: a precomputed [`EmbeddingStore`] (how real vision-language
//! embeddings reach the engine), a remote embedding service, and a
//! deterministic mock for tests. All of them return unit-norm vectors.

mod mock;
mod remote;
mod store;
mod vector;

use std::path::Path;
use std::sync::Arc;

use serde_json::json;
use thiserror::Error;

pub use mock::MockEncoder;
pub use remote::{Modality, RemoteEncoder};
pub use store::{image_key, read_store, text_key, write_store, EmbeddingStore, MAGIC, VERSION};
pub use vector::EmbeddingVector;

use crate::corpus::PhotoCandidate;
use crate::exec::Execution;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("i/o error: {0}")]
    Io(String),
    #[error("store format error: {0}")]
    Format(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("no embedding stored under {0}")]
    StoreMiss(String),
    #[error("embedding service error: {0}")]
    Transport(String),
    #[error("invalid vector: {0}")]
    BadVector(String),
}

impl EmbeddingError {
    pub fn is_upstream(&self) -> bool {
        matches!(self, EmbeddingError::Transport(_))
    }
}

#[derive(Clone)]
pub enum EncoderKind {
    Store(Arc<EmbeddingStore>),
    Remote(RemoteEncoder),
    Mock(MockEncoder),
}

/// Default text length limit, in characters, applied before encoding.
pub const DEFAULT_CHAR_BUDGET: usize = 4096;

#[derive(Clone)]
pub struct Encoder {
    kind: EncoderKind,
    char_budget: usize,
    exec: Execution,
}

impl Encoder {
    pub fn new(kind: EncoderKind) -> Self {
        Self { kind, char_budget: DEFAULT_CHAR_BUDGET, exec: Execution::default() }
    }

    pub fn mock(dim: usize, seed: u64) -> Result<Self, EmbeddingError> {
        Ok(Self::new(EncoderKind::Mock(MockEncoder::new(dim, seed)?)))
    }

    pub fn store(store: EmbeddingStore) -> Self {
        Self::new(EncoderKind::Store(Arc::new(store)))
    }

    pub fn open_store(path: impl AsRef<Path>) -> Result<Self, EmbeddingError> {
        Ok(Self::store(read_store(path)?))
    }

    pub fn remote(remote: RemoteEncoder) -> Self {
        Self::new(EncoderKind::Remote(remote))
    }

    pub fn with_char_budget(mut self, chars: usize) -> Self {
        self.char_budget = chars;
        self
    }

    pub fn with_execution(mut self, exec: Execution) -> Self {
        self.exec = exec;
        self
    }

    pub fn kind(&self) -> &EncoderKind {
        &self.kind
    }

    pub fn char_budget(&self) -> usize {
        self.char_budget
    }

    /// Output dimension, when known without a request.
    pub fn dim(&self) -> Option<usize> {
        match &self.kind {
            EncoderKind::Store(s) => Some(s.dim()),
            EncoderKind::Remote(_) => None,
            EncoderKind::Mock(m) => Some(m.dim()),
        }
    }

    /// Configuration snapshot for reports.
    pub fn describe(&self) -> serde_json::Value {
        match &self.kind {
            EncoderKind::Store(s) => json!({"kind": "store", "dim": s.dim(), "records": s.len(), "char_budget": self.char_budget}),
            EncoderKind::Remote(r) => json!({"kind": "remote", "url": r.base_url(), "char_budget": self.char_budget}),
            EncoderKind::Mock(m) => json!({"kind": "mock", "dim": m.dim(), "seed": m.seed(), "char_budget": self.char_budget}),
        }
    }

    /// `text` cut to the character budget.
    pub fn truncate<'a>(&self, text: &'a str) -> &'a str {
        match text.char_indices().nth(self.char_budget) {
            Some((byte, _)) => &text[..byte],
            None => text,
        }
    }

    fn lookup(store: &EmbeddingStore, key: String) -> Result<EmbeddingVector, EmbeddingError> {
        let values = store.get(&key).ok_or(EmbeddingError::StoreMiss(key))?;
        EmbeddingVector::normalized(values)
    }

    pub fn encode_text(&self, text: &str) -> Result<EmbeddingVector, EmbeddingError> {
        let text = self.truncate(text);
        match &self.kind {
            EncoderKind::Store(s) => Self::lookup(s, text_key(text)),
            EncoderKind::Mock(m) => m.encode_text(text),
            EncoderKind::Remote(r) => r
                .encode_batch(&[text.to_string()], Modality::Text, Execution::Sequential)
                .map(|mut v| v.remove(0)),
        }
    }

    /// Image embedding by key: the photo id for store and mock backends, the
    /// image reference for the remote backend.
    pub fn encode_image(&self, key: &str) -> Result<EmbeddingVector, EmbeddingError> {
        match &self.kind {
            EncoderKind::Store(s) => Self::lookup(s, image_key(key)),
            EncoderKind::Mock(m) => m.encode_image(key),
            EncoderKind::Remote(r) => r
                .encode_batch(&[key.to_string()], Modality::Image, Execution::Sequential)
                .map(|mut v| v.remove(0)),
        }
    }

    pub fn encode_texts(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
        match &self.kind {
            EncoderKind::Remote(r) => {
                let cut: Vec<String> = texts.iter().map(|t| self.truncate(t).to_string()).collect();
                r.encode_batch(&cut, Modality::Text, self.exec)
            }
            _ => self.exec.try_map(texts, |t| self.encode_text(t)),
        }
    }

    pub fn encode_photos(&self, photos: &[PhotoCandidate]) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
        match &self.kind {
            EncoderKind::Remote(r) => {
                let refs: Vec<String> = photos.iter().map(|p| p.image_ref.clone()).collect();
                r.encode_batch(&refs, Modality::Image, self.exec)
            }
            _ => self.exec.try_map(photos, |p| self.encode_image(&p.id)),
        }
    }
}
