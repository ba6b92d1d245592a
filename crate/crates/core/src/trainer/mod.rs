//! Adapter training with the dual InfoNCE objective.

mod adam;
mod loss;
mod train;

use thiserror::Error;

pub use adam::Adam;
pub use loss::{batch_loss, batch_loss_with, gradients, gradients_with, infonce_loss, Batch, Gradients};
pub use train::{encode_pairs, train, train_with, training_pairs, EpochRecord, TrainConfig, TrainHistory};

use crate::adapter::AdapterError;
use crate::embedding::EmbeddingError;
use crate::eval::EvalError;
use crate::scoring::ScoringError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("batch of {0} pairs is too small; in-batch negatives need at least 2")]
    BatchTooSmall(usize),
    #[error("non-finite loss at epoch {epoch}, batch {batch}: {detail}")]
    NonFiniteLoss { epoch: usize, batch: usize, detail: String },
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("dialogue {0} has no resolvable target photo")]
    MissingTarget(String),
    #[error("no descriptor for dialogue {0}")]
    MissingDescriptor(String),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

impl TrainError {
    pub fn is_upstream(&self) -> bool {
        match self {
            TrainError::Embedding(e) | TrainError::Scoring(ScoringError::Embedding(e)) => e.is_upstream(),
            TrainError::Eval(e) => e.is_upstream(),
            _ => false,
        }
    }
}
