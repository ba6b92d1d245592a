//! Client for a remote embedding service.
//!
//! `POST {url}/embed` with `{"inputs": [...]}` answers `{"vectors": [[...]]}`.
//! Image requests add `"modality": "image"` and send image references.

use std::time::Duration;

use serde::Deserialize;
use serde_json::json;

use super::{EmbeddingError, EmbeddingVector};
use crate::exec::Execution;
use crate::retry::{Attempt, RetryPolicy};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Text,
    Image,
}

#[derive(Clone)]
pub struct RemoteEncoder {
    base_url: String,
    agent: ureq::Agent,
    retry: RetryPolicy,
    batch_size: usize,
    parallelism: usize,
}

#[derive(Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f32>>,
}

impl RemoteEncoder {
    pub fn new(base_url: impl Into<String>, timeout: Duration, retry: RetryPolicy) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self { base_url: base_url.into(), agent, retry, batch_size: 64, parallelism: 4 }
    }

    pub fn with_batching(mut self, batch_size: usize, parallelism: usize) -> Self {
        self.batch_size = batch_size.max(1);
        self.parallelism = parallelism.max(1);
        self
    }

    pub fn base_url(&self) -> &str {
        &self.base_url
    }

    fn url(&self) -> String {
        format!("{}/embed", self.base_url.trim_end_matches('/'))
    }

    fn request(&self, inputs: &[String], modality: Modality) -> Result<Vec<Vec<f32>>, EmbeddingError> {
        let url = self.url();
        let body = match modality {
            Modality::Text => json!({ "inputs": inputs }),
            Modality::Image => json!({ "inputs": inputs, "modality": "image" }),
        };
        let transport = |m: String| EmbeddingError::Transport(format!("{url}: {m}"));
        let result = self.retry.run(|_| {
            let mut resp = self
                .agent
                .post(&url)
                .send_json(&body)
                .map_err(|e| Attempt::Transient(transport(e.to_string())))?;
            let status = resp.status().as_u16();
            let text = resp
                .body_mut()
                .read_to_string()
                .map_err(|e| Attempt::Transient(transport(e.to_string())))?;
            if status == 429 || status >= 500 {
                return Err(Attempt::Transient(transport(format!("HTTP {status}"))));
            }
            if !(200..300).contains(&status) {
                return Err(Attempt::Fatal(transport(format!("HTTP {status}: {text}"))));
            }
            serde_json::from_str::<EmbedResponse>(&text)
                .map_err(|e| Attempt::Fatal(transport(format!("bad response: {e}"))))
        });
        let resp = result.map_err(|(e, _)| e)?;
        if resp.vectors.len() != inputs.len() {
            return Err(transport(format!(
                "asked for {} vectors, got {}",
                inputs.len(),
                resp.vectors.len()
            )));
        }
        Ok(resp.vectors)
    }

    /// Encodes `inputs` in batches, several batches in flight at once.
    pub fn encode_batch(
        &self,
        inputs: &[String],
        modality: Modality,
        exec: Execution,
    ) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
        let batches: Vec<&[String]> = inputs.chunks(self.batch_size).collect();
        let raw = exec.try_map_bounded(self.parallelism, &batches, |b| self.request(b, modality))?;
        let vectors: Vec<EmbeddingVector> = raw
            .into_iter()
            .flatten()
            .map(|v| EmbeddingVector::normalized(&v))
            .collect::<Result<_, _>>()
            .map_err(|e| EmbeddingError::Transport(format!("{}: {e}", self.url())))?;
        if let Some(first) = vectors.first() {
            if let Some(bad) = vectors.iter().find(|v| v.dim() != first.dim()) {
                return Err(EmbeddingError::DimMismatch { expected: first.dim(), found: bad.dim() });
            }
        }
        Ok(vectors)
    }
}
