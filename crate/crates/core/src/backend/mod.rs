//! Embedding and chat contracts, with HTTP and deterministic mock implementations.

mod counting;
mod http;
mod mock;

use std::time::Duration;

use serde::{Deserialize, Serialize};

pub use counting::{CountingChat, CountingEmbedder, CountingIndex};
pub use http::{HttpEmbedder, OpenAiChat, Transport, TransportFailure, UreqTransport};
pub use mock::{HashEmbedder, RuleChat, ScriptedChat};

use crate::text::estimate_tokens;

/// Distinguishable failure kinds for both backend contracts.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BackendError {
    #[error("transport failed after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },

    #[error("request timed out after {attempts} attempt(s)")]
    Timeout { attempts: u32 },

    #[error("server returned status {status}: {body}")]
    Status { status: u16, body: String },

    #[error("model returned an empty completion")]
    EmptyCompletion,

    #[error("prompt needs ~{estimated} tokens, over the {limit}-token budget by {}", .estimated - .limit)]
    Budget { estimated: usize, limit: usize },

    #[error("embedding dimension drifted within a batch: expected {expected}, got {got}")]
    DimensionDrift { expected: usize, got: usize },

    #[error("malformed response body: {0}")]
    Malformed(String),

    #[error("invalid request: {0}")]
    InvalidInput(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub system: String,
    pub user: String,
    pub max_output_tokens: u32,
    pub temperature: f64,
}

impl ChatRequest {
    /// Request at temperature 0, the setting every pipeline call uses.
    pub fn new(system: String, user: String, max_output_tokens: u32) -> Self {
        Self {
            system,
            user,
            max_output_tokens,
            temperature: 0.0,
        }
    }

    pub fn estimated_input_tokens(&self) -> usize {
        estimate_tokens(&self.system) + estimate_tokens(&self.user)
    }

    pub fn validate(&self, budget: usize) -> Result<(), BackendError> {
        if self.user.trim().is_empty() {
            return Err(BackendError::InvalidInput("empty user message".into()));
        }
        if self.max_output_tokens == 0 {
            return Err(BackendError::InvalidInput("max_output_tokens must be positive".into()));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(BackendError::InvalidInput("temperature must be >= 0".into()));
        }
        let estimated = self.estimated_input_tokens();
        if estimated > budget {
            return Err(BackendError::Budget {
                estimated,
                limit: budget,
            });
        }
        Ok(())
    }
}

/// Input-token budget that comfortably fits a 20-candidate judge prompt.
pub const DEFAULT_INPUT_BUDGET: usize = 8192;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub base_url: String,
    pub model_name: String,
    #[serde(with = "secs")]
    pub timeout: Duration,
    /// Maximum attempts per request (1..=3).
    pub retries: u32,
    pub concurrency_limit: usize,
    pub max_input_tokens: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub api_key: Option<String>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            base_url: "http://localhost:8000/v1".into(),
            model_name: String::new(),
            timeout: Duration::from_secs(120),
            retries: 3,
            concurrency_limit: 4,
            max_input_tokens: DEFAULT_INPUT_BUDGET,
            api_key: None,
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(1..=3).contains(&self.retries) {
            return Err(format!("retries must be in 1..=3, got {}", self.retries));
        }
        if self.concurrency_limit == 0 {
            return Err("concurrency_limit must be at least 1".into());
        }
        if self.base_url.is_empty() {
            return Err("base_url is empty".into());
        }
        Ok(())
    }
}

mod secs {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let v = f64::deserialize(d)?;
        Duration::try_from_secs_f64(v).map_err(serde::de::Error::custom)
    }
}

pub trait Embedder: Send + Sync {
    /// Identifier recorded in embedding caches; a change invalidates them.
    fn identifier(&self) -> String;

    /// One vector per input, in input order, all of one dimension.
    fn embed_texts(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError>;
}

pub trait ChatModel: Send + Sync {
    /// Raw completion text, untrimmed.
    fn chat(&self, req: &ChatRequest) -> Result<String, BackendError>;
}

impl<T: Embedder + ?Sized> Embedder for &T {
    fn identifier(&self) -> String {
        (**self).identifier()
    }

    fn embed_texts(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError> {
        (**self).embed_texts(texts)
    }
}

impl<T: ChatModel + ?Sized> ChatModel for &T {
    fn chat(&self, req: &ChatRequest) -> Result<String, BackendError> {
        (**self).chat(req)
    }
}

pub(crate) fn check_embed_input(texts: &[String]) -> Result<(), BackendError> {
    if texts.is_empty() {
        return Err(BackendError::InvalidInput("no texts to embed".into()));
    }
    if texts.iter().any(|t| t.trim().is_empty()) {
        return Err(BackendError::InvalidInput("cannot embed an empty text".into()));
    }
    Ok(())
}

pub(crate) fn check_uniform_dim(vectors: &[Vec<f64>]) -> Result<(), BackendError> {
    if let Some(first) = vectors.first() {
        if let Some(bad) = vectors.iter().find(|v| v.len() != first.len()) {
            return Err(BackendError::DimensionDrift {
                expected: first.len(),
                got: bad.len(),
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_bounds() {
        let mut c = BackendConfig::default();
        assert!(c.validate().is_ok());
        c.retries = 4;
        assert!(c.validate().is_err());
        c.retries = 2;
        c.concurrency_limit = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn config_timeout_serializes_as_seconds() {
        let c = BackendConfig {
            timeout: Duration::from_millis(1500),
            ..Default::default()
        };
        let v = serde_json::to_value(&c).unwrap();
        assert_eq!(v["timeout"], 1.5);
        let back: BackendConfig = serde_json::from_value(v).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn budget_error_reports_overflow() {
        let req = ChatRequest::new("s".into(), "x".repeat(400), 10);
        let err = req.validate(50).unwrap_err();
        assert_eq!(err, BackendError::Budget { estimated: 101, limit: 50 });
        assert!(err.to_string().contains("by 51"));
    }

    #[test]
    fn drift_is_detected() {
        let err = check_uniform_dim(&[vec![1.0], vec![1.0, 2.0]]).unwrap_err();
        assert_eq!(err, BackendError::DimensionDrift { expected: 1, got: 2 });
    }
}
