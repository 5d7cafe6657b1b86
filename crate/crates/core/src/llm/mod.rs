//! Chat-completion client shared by the synthesizer and trainee models.
//!
//! The wire format follows the OpenAI-compatible `/chat/completions`
//! convention. Backends are pluggable: a live HTTP backend, a recording
//! wrapper that persists responses to a cassette, and a replay backend that
//! serves a cassette deterministically with no network.

mod cassette;
mod http;
pub mod testing;

pub use cassette::{Cassette, RecordingBackend, ReplayBackend};
pub use http::HttpBackend;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("request failed with status {status}: {body}")]
    Request { status: u16, body: String },
    #[error("retry budget exhausted after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: u32, last: String },
    #[error("malformed completion response: {0}")]
    Protocol(String),
    #[error("cassette miss for request key {key}")]
    CassetteMiss { key: String },
    #[error("cassette I/O: {0}")]
    CassetteIo(String),
    #[error("api key env var {0} is not set")]
    MissingApiKey(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelRole {
    Synthesizer,
    Trainee,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelEndpoint {
    pub base_url: String,
    pub model_name: String,
    pub api_key_env_var: String,
    pub role: ModelRole,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Message {
            role: Role::System,
            content: content.into(),
        }
    }
    pub fn user(content: impl Into<String>) -> Self {
        Message {
            role: Role::User,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub temperature: f64,
    pub top_p: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub top_k: Option<u32>,
    pub repetition_penalty: f64,
    pub max_tokens: u32,
    pub logprobs: bool,
    pub top_logprobs: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<i64>,
}

impl GenerationParams {
    /// Synthesizer defaults: greedy, long outputs.
    pub fn synthesizer() -> Self {
        GenerationParams {
            temperature: 0.0,
            top_p: 0.95,
            top_k: Some(50),
            repetition_penalty: 1.05,
            max_tokens: 10240,
            logprobs: false,
            top_logprobs: 0,
            seed: None,
        }
    }

    /// Rephrasing overrides temperature to 1 for diverse expressions.
    pub fn rephrase() -> Self {
        GenerationParams {
            temperature: 1.0,
            ..Self::synthesizer()
        }
    }

    /// Trainee yes/no judgment: one token with its top-5 logprobs.
    pub fn trainee_probe() -> Self {
        GenerationParams {
            temperature: 0.0,
            top_p: 0.95,
            top_k: None,
            repetition_penalty: 1.0,
            max_tokens: 1,
            logprobs: true,
            top_logprobs: 5,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompletionResult {
    pub text: String,
    /// Top-logprob alternatives for the first generated token.
    pub first_token_top_logprobs: Vec<(String, f64)>,
    pub usage: (u64, u64),
}

/// The serialized request body sent to the backend.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub top_p: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub top_k: Option<u32>,
    pub repetition_penalty: f64,
    pub max_tokens: u32,
    pub logprobs: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub top_logprobs: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<i64>,
}

impl ChatRequest {
    pub fn new(model: &str, messages: &[Message], params: &GenerationParams) -> Self {
        ChatRequest {
            model: model.to_string(),
            messages: messages.to_vec(),
            temperature: params.temperature,
            top_p: params.top_p,
            top_k: params.top_k,
            repetition_penalty: params.repetition_penalty,
            max_tokens: params.max_tokens,
            logprobs: params.logprobs,
            top_logprobs: if params.logprobs {
                Some(params.top_logprobs)
            } else {
                None
            },
            seed: params.seed,
        }
    }
}

#[derive(Debug, Error)]
pub enum BackendError {
    /// Transient failure worth retrying (429, 5xx, timeout).
    #[error("retryable: {0}")]
    Retryable(String),
    #[error("http {status}: {body}")]
    Fatal { status: u16, body: String },
    #[error("cassette miss for key {0}")]
    CassetteMiss(String),
    #[error("{0}")]
    Other(String),
}

/// Executes one chat-completion request, returning the raw response JSON.
pub trait Backend: Send + Sync {
    fn execute(&self, request: &ChatRequest) -> Result<serde_json::Value, BackendError>;
}

/// Stable hash identifying a (messages, params) pair across runs/platforms.
pub fn record_replay_key(messages: &[Message], params: &GenerationParams) -> String {
    let canonical = serde_json::json!({
        "messages": messages,
        "params": params,
    });
    let mut hasher = Sha256::new();
    hasher.update(serde_json::to_vec(&canonical).expect("serializable"));
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub factor: f64,
    /// Relative jitter, e.g. 0.2 for +-20%.
    pub jitter: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 5,
            base_delay_ms: 500,
            factor: 2.0,
            jitter: 0.2,
        }
    }
}

impl RetryPolicy {
    fn delay(&self, attempt: u32) -> Duration {
        let base = self.base_delay_ms as f64 * self.factor.powi(attempt as i32);
        let spread = base * self.jitter;
        let jittered = base + (rand::random::<f64>() * 2.0 - 1.0) * spread;
        Duration::from_millis(jittered.max(0.0) as u64)
    }
}

/// Counting limiter bounding in-flight requests per endpoint.
struct Limiter {
    state: Mutex<usize>,
    cond: Condvar,
    cap: usize,
}

impl Limiter {
    fn new(cap: usize) -> Self {
        Limiter {
            state: Mutex::new(0),
            cond: Condvar::new(),
            cap: cap.max(1),
        }
    }

    fn acquire(&self) -> LimiterGuard<'_> {
        let mut inflight = self.state.lock().unwrap();
        while *inflight >= self.cap {
            inflight = self.cond.wait(inflight).unwrap();
        }
        *inflight += 1;
        LimiterGuard { limiter: self }
    }
}

struct LimiterGuard<'a> {
    limiter: &'a Limiter,
}

impl Drop for LimiterGuard<'_> {
    fn drop(&mut self) {
        let mut inflight = self.limiter.state.lock().unwrap();
        *inflight -= 1;
        self.limiter.cond.notify_one();
    }
}

/// Blocking chat-completion client with retry, concurrency limiting and a
/// pluggable backend. Shareable across worker threads.
pub struct LlmClient {
    endpoint: ModelEndpoint,
    backend: Arc<dyn Backend>,
    retry: RetryPolicy,
    limiter: Limiter,
    calls: AtomicU64,
}

impl LlmClient {
    pub fn new(
        endpoint: ModelEndpoint,
        backend: Arc<dyn Backend>,
        retry: RetryPolicy,
        concurrency: usize,
    ) -> Self {
        LlmClient {
            endpoint,
            backend,
            retry,
            limiter: Limiter::new(concurrency),
            calls: AtomicU64::new(0),
        }
    }

    pub fn endpoint(&self) -> &ModelEndpoint {
        &self.endpoint
    }

    /// Number of backend calls issued so far (including retries).
    pub fn call_count(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn complete(
        &self,
        messages: &[Message],
        params: &GenerationParams,
    ) -> Result<CompletionResult, LlmError> {
        assert!(!messages.is_empty(), "messages must be non-empty");
        let request = ChatRequest::new(&self.endpoint.model_name, messages, params);
        let _permit = self.limiter.acquire();

        let mut last_err = String::new();
        for attempt in 0..self.retry.max_attempts {
            if attempt > 0 {
                std::thread::sleep(self.retry.delay(attempt - 1));
            }
            self.calls.fetch_add(1, Ordering::SeqCst);
            match self.backend.execute(&request) {
                Ok(raw) => return parse_completion(&raw, params),
                Err(BackendError::Retryable(msg)) => last_err = msg,
                Err(BackendError::Fatal { status, body }) => {
                    return Err(LlmError::Request { status, body })
                }
                Err(BackendError::CassetteMiss(key)) => {
                    return Err(LlmError::CassetteMiss { key })
                }
                Err(BackendError::Other(msg)) => return Err(LlmError::Protocol(msg)),
            }
        }
        Err(LlmError::RetriesExhausted {
            attempts: self.retry.max_attempts,
            last: last_err,
        })
    }
}

fn parse_completion(
    raw: &serde_json::Value,
    params: &GenerationParams,
) -> Result<CompletionResult, LlmError> {
    let choice = raw
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| LlmError::Protocol("no choices in response".into()))?;
    let text = choice
        .pointer("/message/content")
        .and_then(|v| v.as_str())
        .ok_or_else(|| LlmError::Protocol("choices[0].message.content missing".into()))?
        .to_string();

    let mut tops = Vec::new();
    if let Some(entries) = choice.pointer("/logprobs/content/0/top_logprobs") {
        let entries = entries
            .as_array()
            .ok_or_else(|| LlmError::Protocol("top_logprobs is not an array".into()))?;
        for entry in entries {
            let token = entry
                .get("token")
                .and_then(|v| v.as_str())
                .ok_or_else(|| LlmError::Protocol("top_logprobs entry without token".into()))?;
            let lp = entry
                .get("logprob")
                .and_then(|v| v.as_f64())
                .ok_or_else(|| LlmError::Protocol("top_logprobs entry without logprob".into()))?;
            tops.push((token.to_string(), lp.min(0.0)));
        }
    }
    tops.truncate(params.top_logprobs as usize);

    let usage = (
        raw.pointer("/usage/prompt_tokens")
            .and_then(|v| v.as_u64())
            .unwrap_or(0),
        raw.pointer("/usage/completion_tokens")
            .and_then(|v| v.as_u64())
            .unwrap_or(0),
    );
    Ok(CompletionResult {
        text,
        first_token_top_logprobs: tops,
        usage,
    })
}
