//! Chat-completion backends.
//!
//! Every model call goes through [`ChatBackend::complete`]. Implementations:
//!
//! - [`http::HttpBackend`]: OpenAI-compatible `/chat/completions` with
//!   jittered exponential backoff on 429, 5xx and timeouts.
//! - [`cassette::ReplayBackend`]: record/replay keyed by [`cache_key`], strict
//!   (a miss is an error) or recording through another backend.
//! - [`mock`]: deterministic backends for tests and offline runs.
//!
//! [`batch::run_batch`] adds bounded concurrency and a request-rate cap.

pub mod batch;
pub mod cassette;
pub mod http;
pub mod mock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use batch::run_batch;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LlmError {
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("rate limited after {attempts} attempts")]
    RateLimited { attempts: u32 },
    #[error("request timed out after {attempts} attempts")]
    Timeout { attempts: u32 },
    #[error("provider returned {status}: {body}")]
    Provider { status: u16, body: String },
    #[error("no cassette entry for key {key} (tag `{tag}`)")]
    CassetteMiss { key: String, tag: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("cassette error: {0}")]
    Cassette(String),
}

impl LlmError {
    /// Stable name used in summaries and on stderr.
    pub fn kind(&self) -> &'static str {
        match self {
            LlmError::Auth(_) => "AuthError",
            LlmError::RateLimited { .. } => "RateLimited",
            LlmError::Timeout { .. } => "Timeout",
            LlmError::Provider { .. } => "ProviderError",
            LlmError::CassetteMiss { .. } => "CassetteMiss",
            LlmError::InvalidRequest(_) => "InvalidRequest",
            LlmError::Transport(_) => "TransportError",
            LlmError::Cassette(_) => "CassetteError",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system_text: Option<String>,
    pub user_text: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    /// Human-readable label for cassette indexing; not part of the cache key
    /// and never sent to the provider.
    #[serde(default)]
    pub request_tag: String,
}

impl ChatRequest {
    pub fn new(model_name: impl Into<String>, user_text: impl Into<String>) -> Self {
        Self {
            model_name: model_name.into(),
            system_text: None,
            user_text: user_text.into(),
            temperature: 0.0,
            max_output_tokens: 1024,
            request_tag: String::new(),
        }
    }

    pub fn with_tag(mut self, tag: impl Into<String>) -> Self {
        self.request_tag = tag.into();
        self
    }

    pub fn with_temperature(mut self, t: f64) -> Self {
        self.temperature = t;
        self
    }

    pub fn with_max_output_tokens(mut self, n: u32) -> Self {
        self.max_output_tokens = n;
        self
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        if self.user_text.is_empty() {
            return Err(LlmError::InvalidRequest("user_text is empty".into()));
        }
        if self.max_output_tokens == 0 {
            return Err(LlmError::InvalidRequest("max_output_tokens must be >= 1".into()));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(LlmError::InvalidRequest(format!("temperature {} < 0", self.temperature)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub latency_ms: u64,
    pub provider_id: String,
    #[serde(default)]
    pub cached: bool,
}

/// Digest over the fields that determine a model's answer.
///
/// SHA-256 of the compact JSON object
/// `{"model_name","system_text","user_text","temperature","max_output_tokens"}`
/// in that field order, hex encoded. `request_tag` is excluded.
pub fn cache_key(req: &ChatRequest) -> String {
    #[derive(Serialize)]
    struct Material<'a> {
        model_name: &'a str,
        system_text: Option<&'a str>,
        user_text: &'a str,
        temperature: f64,
        max_output_tokens: u32,
    }
    let m = Material {
        model_name: &req.model_name,
        system_text: req.system_text.as_deref(),
        user_text: &req.user_text,
        temperature: req.temperature,
        max_output_tokens: req.max_output_tokens,
    };
    crate::sha256_hex(serde_json::to_vec(&m).expect("key material serializes"))
}

pub trait ChatBackend: Send + Sync {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, LlmError>;
}

impl<B: ChatBackend + ?Sized> ChatBackend for &B {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, LlmError> {
        (**self).complete(req)
    }
}

impl<B: ChatBackend + ?Sized> ChatBackend for std::sync::Arc<B> {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, LlmError> {
        (**self).complete(req)
    }
}

impl<B: ChatBackend + ?Sized> ChatBackend for Box<B> {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, LlmError> {
        (**self).complete(req)
    }
}

fn default_max_in_flight() -> usize {
    4
}
fn default_retry_max() -> u32 {
    3
}
fn default_retry_initial_ms() -> u64 {
    1000
}
fn default_retry_multiplier() -> f64 {
    2.0
}
fn default_timeout_ms() -> u64 {
    120_000
}

/// Concurrency, rate and retry limits for a backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendPolicy {
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
    /// Request starts per minute; 0 disables the cap.
    #[serde(default)]
    pub requests_per_minute: u32,
    #[serde(default = "default_retry_max")]
    pub retry_max: u32,
    #[serde(default = "default_retry_initial_ms")]
    pub retry_initial_ms: u64,
    #[serde(default = "default_retry_multiplier")]
    pub retry_multiplier: f64,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
}

impl Default for BackendPolicy {
    fn default() -> Self {
        Self {
            max_in_flight: default_max_in_flight(),
            requests_per_minute: 0,
            retry_max: default_retry_max(),
            retry_initial_ms: default_retry_initial_ms(),
            retry_multiplier: default_retry_multiplier(),
            timeout_ms: default_timeout_ms(),
        }
    }
}

impl BackendPolicy {
    pub fn validate(&self) -> Result<(), String> {
        if self.max_in_flight == 0 {
            return Err("max_in_flight must be >= 1".into());
        }
        if self.retry_multiplier.is_nan() || self.retry_multiplier < 1.0 {
            return Err("retry_multiplier must be >= 1".into());
        }
        Ok(())
    }
}

/// Token and call accounting.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub calls: u64,
    pub cached_calls: u64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl Usage {
    pub fn record(&mut self, resp: &ChatResponse) {
        self.calls += 1;
        if resp.cached {
            self.cached_calls += 1;
        }
        self.prompt_tokens += resp.prompt_tokens;
        self.completion_tokens += resp.completion_tokens;
    }

    pub fn merge(&mut self, other: &Usage) {
        self.calls += other.calls;
        self.cached_calls += other.cached_calls;
        self.prompt_tokens += other.prompt_tokens;
        self.completion_tokens += other.completion_tokens;
    }

    pub fn total_tokens(&self) -> u64 {
        self.prompt_tokens + self.completion_tokens
    }
}
