//! Live HTTP backend speaking the OpenAI-compatible chat-completions API.

use std::time::Duration;

use super::{Backend, BackendError, ChatRequest, LlmError};

pub struct HttpBackend {
    client: reqwest::blocking::Client,
    url: String,
    api_key: String,
}

impl HttpBackend {
    /// Resolves the API key from `api_key_env_var` and targets
    /// `{base_url}/chat/completions`.
    pub fn new(base_url: &str, api_key_env_var: &str, timeout: Duration) -> Result<Self, LlmError> {
        let api_key = std::env::var(api_key_env_var)
            .map_err(|_| LlmError::MissingApiKey(api_key_env_var.to_string()))?;
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| LlmError::Protocol(e.to_string()))?;
        Ok(HttpBackend {
            client,
            url: format!("{}/chat/completions", base_url.trim_end_matches('/')),
            api_key,
        })
    }
}

impl Backend for HttpBackend {
    fn execute(&self, request: &ChatRequest) -> Result<serde_json::Value, BackendError> {
        let response = self
            .client
            .post(&self.url)
            .bearer_auth(&self.api_key)
            .json(request)
            .send()
            .map_err(|e| {
                if e.is_timeout() || e.is_connect() {
                    BackendError::Retryable(e.to_string())
                } else {
                    BackendError::Other(e.to_string())
                }
            })?;
        let status = response.status();
        let body = response
            .text()
            .map_err(|e| BackendError::Retryable(e.to_string()))?;
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(BackendError::Retryable(format!("http {status}: {body}")));
        }
        if !status.is_success() {
            return Err(BackendError::Fatal {
                status: status.as_u16(),
                body,
            });
        }
        serde_json::from_str(&body)
            .map_err(|e| BackendError::Other(format!("invalid response JSON: {e}")))
    }
}
