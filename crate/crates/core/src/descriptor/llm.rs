//! OpenAI-compatible chat-completions client.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::retry::{Attempt, RetryPolicy};

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("request to {url} failed after {attempts} attempt(s): {message}")]
    Transport { url: String, attempts: u32, message: String },
    #[error("{url} answered HTTP {status}: {body}")]
    Status { url: String, status: u16, body: String },
    #[error("malformed response from {url}: {message}")]
    BadResponse { url: String, message: String },
}

/// Anything that turns a prompt into a completion.
pub trait ChatModel: Send + Sync {
    /// Model name recorded in descriptors and cache keys.
    fn model(&self) -> &str;
    fn complete(&self, prompt: &str) -> Result<String, LlmError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmEndpointConfig {
    pub base_url: String,
    pub model: String,
    pub timeout_secs: u64,
    pub max_retries: u32,
    /// First backoff delay; doubles on every retry.
    pub retry_base_ms: u64,
    #[serde(skip)]
    pub api_key: Option<String>,
}

impl LlmEndpointConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model: model.into(),
            timeout_secs: 120,
            max_retries: 3,
            retry_base_ms: 1000,
            api_key: None,
        }
    }

    pub fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy {
            max_retries: self.max_retries,
            base_delay: Duration::from_millis(self.retry_base_ms),
            ..RetryPolicy::default()
        }
    }
}

/// Blocking chat-completions client. Decoding is greedy (temperature 0).
pub struct HttpChatModel {
    config: LlmEndpointConfig,
    agent: ureq::Agent,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: Message,
}

#[derive(Deserialize)]
struct Message {
    content: Option<String>,
}

impl HttpChatModel {
    pub fn new(config: LlmEndpointConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs.max(1))))
            .http_status_as_error(false)
            .build()
            .into();
        Self { config, agent }
    }

    pub fn config(&self) -> &LlmEndpointConfig {
        &self.config
    }

    fn url(&self) -> String {
        format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'))
    }

    /// Request body sent for `prompt`.
    pub fn request_body(&self, prompt: &str) -> serde_json::Value {
        json!({
            "model": self.config.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": 0,
        })
    }

    fn attempt(&self, url: &str, body: &serde_json::Value) -> Result<String, Attempt<LlmError>> {
        let mut req = self.agent.post(url);
        if let Some(key) = &self.config.api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = req.send_json(body).map_err(|e| {
            Attempt::Transient(LlmError::Transport {
                url: url.into(),
                attempts: 1,
                message: e.to_string(),
            })
        })?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(|e| {
            Attempt::Transient(LlmError::Transport {
                url: url.into(),
                attempts: 1,
                message: e.to_string(),
            })
        })?;
        if status == 429 || status >= 500 {
            return Err(Attempt::Transient(LlmError::Status { url: url.into(), status, body: text }));
        }
        if !(200..300).contains(&status) {
            return Err(Attempt::Fatal(LlmError::Status { url: url.into(), status, body: text }));
        }
        let parsed: ChatResponse = serde_json::from_str(&text).map_err(|e| {
            Attempt::Fatal(LlmError::BadResponse { url: url.into(), message: e.to_string() })
        })?;
        parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content.unwrap_or_default())
            .ok_or_else(|| {
                Attempt::Fatal(LlmError::BadResponse { url: url.into(), message: "no choices".into() })
            })
    }
}

impl ChatModel for HttpChatModel {
    fn model(&self) -> &str {
        &self.config.model
    }

    fn complete(&self, prompt: &str) -> Result<String, LlmError> {
        let url = self.url();
        let body = self.request_body(prompt);
        self.config.retry_policy().run(|_| self.attempt(&url, &body)).map_err(|(e, attempts)| match e {
            LlmError::Transport { url, message, .. } => LlmError::Transport { url, attempts, message },
            other => other,
        })
    }
}
