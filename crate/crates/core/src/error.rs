use thiserror::Error;

use crate::adapter::AdapterError;
use crate::corpus::CorpusError;
use crate::descriptor::DescriptorError;
use crate::embedding::EmbeddingError;
use crate::eval::EvalError;
use crate::scoring::ScoringError;
use crate::trainer::TrainError;

/// Crate-wide error; each variant wraps the error type of one module.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Descriptor(#[from] DescriptorError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

impl Error {
    /// True when the failure came from an upstream service (LLM or remote
    /// embedding endpoint) rather than from local data.
    pub fn is_upstream(&self) -> bool {
        match self {
            Error::Descriptor(e) => e.is_upstream(),
            Error::Embedding(e) => e.is_upstream(),
            Error::Scoring(ScoringError::Embedding(e)) => e.is_upstream(),
            Error::Train(e) => e.is_upstream(),
            Error::Eval(e) => e.is_upstream(),
            _ => false,
        }
    }
}
