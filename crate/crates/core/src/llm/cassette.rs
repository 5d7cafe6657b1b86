//! Record/replay cassettes: a persisted map from request hash to response.
//!
//! Format: one JSON object per line, `{"key": ..., "request": ..., "response": ...}`.
//! Replay mode fails fast on a cache miss so CI never silently hits the
//! network.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{record_replay_key, Backend, BackendError, ChatRequest, LlmError};

#[derive(Debug, Serialize, Deserialize)]
struct CassetteLine {
    key: String,
    request: serde_json::Value,
    response: serde_json::Value,
}

/// In-memory view of a cassette file.
#[derive(Debug, Default)]
pub struct Cassette {
    entries: HashMap<String, serde_json::Value>,
}

impl Cassette {
    pub fn load(path: &Path) -> Result<Self, LlmError> {
        let file = File::open(path)
            .map_err(|e| LlmError::CassetteIo(format!("{}: {e}", path.display())))?;
        let mut entries = HashMap::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| LlmError::CassetteIo(format!("{}: {e}", path.display())))?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: CassetteLine = serde_json::from_str(&line).map_err(|e| {
                LlmError::CassetteIo(format!("{}:{}: {e}", path.display(), i + 1))
            })?;
            entries.insert(parsed.key, parsed.response);
        }
        Ok(Cassette { entries })
    }

    pub fn get(&self, key: &str) -> Option<&serde_json::Value> {
        self.entries.get(key)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn request_key(request: &ChatRequest) -> String {
    let params = super::GenerationParams {
        temperature: request.temperature,
        top_p: request.top_p,
        top_k: request.top_k,
        repetition_penalty: request.repetition_penalty,
        max_tokens: request.max_tokens,
        logprobs: request.logprobs,
        top_logprobs: request.top_logprobs.unwrap_or(0),
        seed: request.seed,
    };
    record_replay_key(&request.messages, &params)
}

/// Serves recorded responses; any unseen request is an error.
pub struct ReplayBackend {
    cassette: Cassette,
}

impl ReplayBackend {
    pub fn new(cassette: Cassette) -> Self {
        ReplayBackend { cassette }
    }

    pub fn open(path: &Path) -> Result<Self, LlmError> {
        Ok(ReplayBackend {
            cassette: Cassette::load(path)?,
        })
    }
}

impl Backend for ReplayBackend {
    fn execute(&self, request: &ChatRequest) -> Result<serde_json::Value, BackendError> {
        let key = request_key(request);
        self.cassette
            .get(&key)
            .cloned()
            .ok_or(BackendError::CassetteMiss(key))
    }
}

/// Wraps a live backend and appends every new (request, response) pair to a
/// cassette file. Repeated identical requests are served from memory so the
/// cassette stays deterministic.
pub struct RecordingBackend {
    inner: std::sync::Arc<dyn Backend>,
    path: PathBuf,
    state: Mutex<RecordState>,
}

struct RecordState {
    seen: HashMap<String, serde_json::Value>,
    writer: File,
}

impl RecordingBackend {
    pub fn create(inner: std::sync::Arc<dyn Backend>, path: &Path) -> Result<Self, LlmError> {
        let mut seen = HashMap::new();
        if path.exists() {
            let existing = Cassette::load(path)?;
            seen = existing.entries;
        }
        let writer = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| LlmError::CassetteIo(format!("{}: {e}", path.display())))?;
        Ok(RecordingBackend {
            inner,
            path: path.to_path_buf(),
            state: Mutex::new(RecordState { seen, writer }),
        })
    }
}

impl Backend for RecordingBackend {
    fn execute(&self, request: &ChatRequest) -> Result<serde_json::Value, BackendError> {
        let key = request_key(request);
        if let Some(cached) = self.state.lock().unwrap().seen.get(&key) {
            return Ok(cached.clone());
        }
        let response = self.inner.execute(request)?;
        let mut state = self.state.lock().unwrap();
        if !state.seen.contains_key(&key) {
            let line = CassetteLine {
                key: key.clone(),
                request: serde_json::to_value(request)
                    .map_err(|e| BackendError::Other(e.to_string()))?,
                response: response.clone(),
            };
            let serialized =
                serde_json::to_string(&line).map_err(|e| BackendError::Other(e.to_string()))?;
            writeln!(state.writer, "{serialized}").map_err(|e| {
                BackendError::Other(format!("cassette write {}: {e}", self.path.display()))
            })?;
            state.seen.insert(key, response.clone());
        }
        Ok(response)
    }
}

#[cfg(test)]
mod tests {
    use super::super::testing::ScriptedBackend;
    use super::*;
    use crate::llm::{GenerationParams, Message};
    use std::sync::Arc;

    fn request(content: &str) -> ChatRequest {
        ChatRequest::new(
            "m",
            &[Message::user(content)],
            &GenerationParams::synthesizer(),
        )
    }

    #[test]
    fn record_then_replay_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cassette.jsonl");

        let inner = Arc::new(ScriptedBackend::new());
        inner.push_ok(ScriptedBackend::text_response("alpha"));
        inner.push_ok(ScriptedBackend::text_response("beta"));
        let recorder = RecordingBackend::create(inner, &path).unwrap();
        let a = recorder.execute(&request("one")).unwrap();
        let b = recorder.execute(&request("two")).unwrap();
        // duplicate request served from memory, not the inner backend
        let a2 = recorder.execute(&request("one")).unwrap();
        assert_eq!(a, a2);

        let replay = ReplayBackend::open(&path).unwrap();
        assert_eq!(replay.execute(&request("one")).unwrap(), a);
        assert_eq!(replay.execute(&request("two")).unwrap(), b);
        let miss = replay.execute(&request("three")).unwrap_err();
        assert!(matches!(miss, BackendError::CassetteMiss(_)));
    }
}
