//! Test backends: scripted fault injection and concurrency accounting.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use super::{Backend, BackendError, ChatRequest};

/// Backend that pops pre-scripted results, tracking call and concurrency
/// statistics. Used for retry and limiter tests.
pub struct ScriptedBackend {
    script: Mutex<VecDeque<Result<serde_json::Value, BackendError>>>,
    calls: AtomicU64,
    current: AtomicUsize,
    max_concurrent: AtomicUsize,
    delay: Mutex<Duration>,
}

impl Default for ScriptedBackend {
    fn default() -> Self {
        Self::new()
    }
}

impl ScriptedBackend {
    pub fn new() -> Self {
        ScriptedBackend {
            script: Mutex::new(VecDeque::new()),
            calls: AtomicU64::new(0),
            current: AtomicUsize::new(0),
            max_concurrent: AtomicUsize::new(0),
            delay: Mutex::new(Duration::ZERO),
        }
    }

    pub fn push_ok(&self, response: serde_json::Value) {
        self.script.lock().unwrap().push_back(Ok(response));
    }

    pub fn push_err(&self, err: BackendError) {
        self.script.lock().unwrap().push_back(Err(err));
    }

    /// Artificial per-call latency, to make concurrency overlap observable.
    pub fn set_delay(&self, delay: Duration) {
        *self.delay.lock().unwrap() = delay;
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn max_concurrent(&self) -> usize {
        self.max_concurrent.load(Ordering::SeqCst)
    }

    /// Minimal well-formed chat-completion response.
    pub fn text_response(text: &str) -> serde_json::Value {
        serde_json::json!({
            "choices": [{"message": {"role": "assistant", "content": text}}],
            "usage": {"prompt_tokens": 1, "completion_tokens": 1}
        })
    }

    /// Response carrying first-token top-logprobs.
    pub fn logprob_response(text: &str, tops: &[(String, f64)]) -> serde_json::Value {
        let entries: Vec<serde_json::Value> = tops
            .iter()
            .map(|(tok, lp)| serde_json::json!({"token": tok, "logprob": lp}))
            .collect();
        serde_json::json!({
            "choices": [{
                "message": {"role": "assistant", "content": text},
                "logprobs": {"content": [{
                    "token": text,
                    "logprob": tops.first().map(|(_, lp)| *lp).unwrap_or(0.0),
                    "top_logprobs": entries
                }]}
            }],
            "usage": {"prompt_tokens": 1, "completion_tokens": 1}
        })
    }
}

impl Backend for ScriptedBackend {
    fn execute(&self, _request: &ChatRequest) -> Result<serde_json::Value, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let now = self.current.fetch_add(1, Ordering::SeqCst) + 1;
        self.max_concurrent.fetch_max(now, Ordering::SeqCst);
        let delay = *self.delay.lock().unwrap();
        if !delay.is_zero() {
            std::thread::sleep(delay);
        }
        let result = self
            .script
            .lock()
            .unwrap()
            .pop_front()
            .unwrap_or_else(|| Err(BackendError::Other("script exhausted".into())));
        self.current.fetch_sub(1, Ordering::SeqCst);
        result
    }
}
