//! OpenAI-compatible chat-completions client.

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, Instant};

use serde::Deserialize;
use serde_json::json;

use super::{BackendPolicy, ChatBackend, ChatRequest, ChatResponse, LlmError};

pub const DEFAULT_BASE_URL: &str = "https://api.openai.com/v1";
pub const DEFAULT_API_KEY_ENV: &str = "OPENAI_API_KEY";

#[derive(Deserialize)]
struct Completion {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<UsageBlock>,
}

#[derive(Deserialize)]
struct Choice {
    message: Message,
}

#[derive(Deserialize)]
struct Message {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct UsageBlock {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

enum Attempt {
    Done(Result<ChatResponse, LlmError>),
    /// Worth retrying; the error to report if retries run out, and an optional
    /// server-requested delay.
    Transient(LlmError, Option<Duration>),
}

pub struct HttpBackend {
    agent: ureq::Agent,
    endpoint: String,
    api_key: String,
    policy: BackendPolicy,
    retries: AtomicU64,
}

impl HttpBackend {
    pub fn new(base_url: &str, api_key: impl Into<String>, policy: BackendPolicy) -> Result<Self, LlmError> {
        let api_key = api_key.into();
        if api_key.trim().is_empty() {
            return Err(LlmError::Auth("API key is empty".into()));
        }
        let config = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_millis(policy.timeout_ms)))
            .build();
        Ok(Self {
            agent: config.into(),
            endpoint: format!("{}/chat/completions", base_url.trim_end_matches('/')),
            api_key,
            policy,
            retries: AtomicU64::new(0),
        })
    }

    /// Reads the key from the environment variable `var`.
    pub fn from_env(base_url: &str, var: &str, policy: BackendPolicy) -> Result<Self, LlmError> {
        match std::env::var(var) {
            Ok(key) if !key.trim().is_empty() => Self::new(base_url, key, policy),
            _ => Err(LlmError::Auth(format!("environment variable {var} is not set"))),
        }
    }

    /// Retries performed so far across all requests.
    pub fn retries(&self) -> u64 {
        self.retries.load(Ordering::Relaxed)
    }

    fn backoff(&self, attempt: u32) -> Duration {
        let base = self.policy.retry_initial_ms as f64 * self.policy.retry_multiplier.powi(attempt as i32);
        // Jitter in [0.5, 1.0) of the nominal delay.
        let factor = 0.5 + 0.5 * rand::random::<f64>();
        Duration::from_millis((base * factor) as u64)
    }

    fn attempt(&self, req: &ChatRequest, attempts: u32) -> Attempt {
        let mut messages = Vec::new();
        if let Some(system) = &req.system_text {
            messages.push(json!({"role": "system", "content": system}));
        }
        messages.push(json!({"role": "user", "content": req.user_text}));
        let body = json!({
            "model": req.model_name,
            "messages": messages,
            "temperature": req.temperature,
            "max_tokens": req.max_output_tokens,
        });
        let started = Instant::now();
        let result = self
            .agent
            .post(&self.endpoint)
            .header("Authorization", &format!("Bearer {}", self.api_key))
            .send_json(&body);
        let mut resp = match result {
            Ok(r) => r,
            Err(ureq::Error::Timeout(_)) => return Attempt::Transient(LlmError::Timeout { attempts }, None),
            Err(e @ (ureq::Error::Io(_) | ureq::Error::ConnectionFailed)) => {
                return Attempt::Transient(LlmError::Transport(e.to_string()), None)
            }
            Err(e) => return Attempt::Done(Err(LlmError::Transport(e.to_string()))),
        };
        let status = resp.status().as_u16();
        let retry_after = resp
            .headers()
            .get("retry-after")
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.trim().parse::<u64>().ok())
            .map(|s| Duration::from_secs(s.min(60)));
        let text = match resp.body_mut().read_to_string() {
            Ok(t) => t,
            Err(ureq::Error::Timeout(_)) => return Attempt::Transient(LlmError::Timeout { attempts }, None),
            Err(e) => return Attempt::Transient(LlmError::Transport(e.to_string()), None),
        };
        let excerpt: String = text.chars().take(300).collect();
        match status {
            200..=299 => {
                let parsed: Completion = match serde_json::from_str(&text) {
                    Ok(p) => p,
                    Err(e) => {
                        return Attempt::Done(Err(LlmError::Provider {
                            status,
                            body: format!("unexpected response body ({e}): {excerpt}"),
                        }))
                    }
                };
                let content = parsed
                    .choices
                    .into_iter()
                    .next()
                    .and_then(|c| c.message.content)
                    .unwrap_or_default();
                let usage = parsed.usage.unwrap_or(UsageBlock {
                    prompt_tokens: 0,
                    completion_tokens: 0,
                });
                Attempt::Done(Ok(ChatResponse {
                    text: content,
                    prompt_tokens: usage.prompt_tokens,
                    completion_tokens: usage.completion_tokens,
                    latency_ms: started.elapsed().as_millis() as u64,
                    provider_id: self.endpoint.clone(),
                    cached: false,
                }))
            }
            401 | 403 => Attempt::Done(Err(LlmError::Auth(format!("HTTP {status}: {excerpt}")))),
            429 => Attempt::Transient(LlmError::RateLimited { attempts }, retry_after),
            500..=599 => Attempt::Transient(LlmError::Provider { status, body: excerpt }, retry_after),
            _ => Attempt::Done(Err(LlmError::Provider { status, body: excerpt })),
        }
    }
}

impl ChatBackend for HttpBackend {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, LlmError> {
        req.validate()?;
        let mut attempt = 0u32;
        loop {
            match self.attempt(req, attempt + 1) {
                Attempt::Done(r) => return r,
                Attempt::Transient(err, server_delay) => {
                    if attempt >= self.policy.retry_max {
                        return Err(err);
                    }
                    let delay = server_delay.map_or_else(|| self.backoff(attempt), |d| d.max(self.backoff(attempt)));
                    log::warn!(
                        "{} for `{}`; retry {}/{} in {:?}",
                        err.kind(),
                        req.request_tag,
                        attempt + 1,
                        self.policy.retry_max,
                        delay
                    );
                    self.retries.fetch_add(1, Ordering::Relaxed);
                    std::thread::sleep(delay);
                    attempt += 1;
                }
            }
        }
    }
}
