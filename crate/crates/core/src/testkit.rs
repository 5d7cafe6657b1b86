//! Deterministic fake-model support for tests, demos and offline fixture
//! runs.
//!
//! [`MockModelBackend`] answers every prompt kind the pipeline issues
//! (extraction, summarization, rephrasing, yes/no judgment, QA writing) as
//! a pure function of the request content, so recording a cassette against
//! it and replaying that cassette produce identical artifacts.

use std::sync::Arc;

use sha2::{Digest, Sha256};

use crate::llm::testing::ScriptedBackend;
use crate::llm::{
    Backend, BackendError, ChatRequest, LlmClient, ModelEndpoint, ModelRole, RetryPolicy,
};

pub fn mock_endpoint(role: ModelRole) -> ModelEndpoint {
    ModelEndpoint {
        base_url: "http://mock.invalid/v1".into(),
        model_name: match role {
            ModelRole::Synthesizer => "mock-synthesizer".into(),
            ModelRole::Trainee => "mock-trainee".into(),
        },
        api_key_env_var: "MOCK_API_KEY".into(),
        role,
    }
}

fn fast_retry() -> RetryPolicy {
    RetryPolicy {
        max_attempts: 3,
        base_delay_ms: 1,
        factor: 1.0,
        jitter: 0.0,
    }
}

/// Client over a [`ScriptedBackend`] preloaded with the given responses.
pub fn scripted_client_with(responses: Vec<serde_json::Value>) -> LlmClient {
    let backend = Arc::new(ScriptedBackend::new());
    for response in responses {
        backend.push_ok(response);
    }
    LlmClient::new(mock_endpoint(ModelRole::Synthesizer), backend, fast_retry(), 4)
}

/// Deterministic value in (0, 1) derived from hashing `input`.
fn det_unit(input: &str) -> f64 {
    let digest = Sha256::digest(input.as_bytes());
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    let x = u64::from_be_bytes(bytes);
    // map to (0, 1) exclusive of the endpoints
    (x as f64 + 1.0) / (u64::MAX as f64 + 2.0)
}

fn section_after<'a>(prompt: &'a str, marker: &str) -> &'a str {
    prompt
        .rfind(marker)
        .map(|pos| prompt[pos + marker.len()..].trim())
        .unwrap_or("")
}

fn first_integer(prompt: &str) -> usize {
    let mut digits = String::new();
    for c in prompt.chars() {
        if c.is_ascii_digit() {
            digits.push(c);
        } else if !digits.is_empty() {
            break;
        }
    }
    digits.parse().unwrap_or(1)
}

/// Distinct alphabetic words of length >= 5, lowercased, in order of first
/// appearance.
fn salient_words(text: &str, limit: usize) -> Vec<String> {
    let mut words = Vec::new();
    for raw in text.split(|c: char| !c.is_alphabetic()) {
        if raw.len() < 5 {
            continue;
        }
        let word = raw.to_lowercase();
        if !words.contains(&word) {
            words.push(word);
            if words.len() == limit {
                break;
            }
        }
    }
    words
}

/// Relation description lines from a "- src <-> tgt: desc" block.
fn relation_lines(block: &str) -> Vec<(String, String, String)> {
    block
        .lines()
        .filter_map(|line| {
            let line = line.trim().strip_prefix("- ")?;
            let (pair, desc) = line.split_once(": ")?;
            let (src, tgt) = pair.split_once(" <-> ")?;
            Some((src.trim().to_string(), tgt.trim().to_string(), desc.trim().to_string()))
        })
        .collect()
}

fn answer_extraction(prompt: &str) -> String {
    let text = section_after(prompt, "Text:");
    let words = salient_words(text, 6);
    let mut out = String::new();
    for word in &words {
        out.push_str(&format!(
            "(\"entity\"|{word}|concept|The term {word} appears in the source material.)\n"
        ));
    }
    for pair in words.windows(2) {
        out.push_str(&format!(
            "(\"relationship\"|{}|{}|The source discusses {} in connection with {}.)\n",
            pair[0], pair[1], pair[0], pair[1]
        ));
    }
    out.push_str("<|COMPLETE|>");
    out
}

fn answer_summarization(prompt: &str) -> String {
    let descriptions = section_after(prompt, "Descriptions:");
    let words: Vec<&str> = descriptions.split_whitespace().take(25).collect();
    format!("In summary: {}.", words.join(" ").trim_end_matches('.'))
}

fn answer_rephrase(prompt: &str, opposite: bool) -> String {
    let n = first_integer(prompt);
    let statement = section_after(prompt, "Statement:");
    let statement = statement.trim_end_matches('.');
    (1..=n)
        .map(|i| {
            if opposite {
                format!("It is not the case that {statement} (negation {i}).")
            } else {
                format!("It holds that {statement} (wording {i}).")
            }
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn answer_judgement(prompt: &str) -> serde_json::Value {
    let statement = section_after(prompt, "Statement:");
    let statement = statement.trim_end_matches("Answer:").trim();
    // The negated paraphrases this mock produces are false statements, so
    // the mock trainee leans "no" on them and "yes" otherwise; the lean
    // strength varies per statement but is a pure function of it.
    let negated = statement.contains("It is not the case that");
    let base = statement.replace("It is not the case that", "It holds that");
    let p_yes_for_base = 0.5 + 0.45 * det_unit(&base);
    let p_yes = if negated { 1.0 - p_yes_for_base } else { p_yes_for_base };
    let p_no = 1.0 - p_yes;
    let (first, second) = if p_yes >= p_no {
        (("yes", p_yes), ("no", p_no))
    } else {
        (("no", p_no), ("yes", p_yes))
    };
    let tops = vec![
        (first.0.to_string(), first.1.ln()),
        (second.0.to_string(), second.1.ln()),
    ];
    ScriptedBackend::logprob_response(first.0, &tops)
}

fn answer_atomic(prompt: &str) -> String {
    let relations = relation_lines(section_after(prompt, "Relationships:"));
    if let Some((src, tgt, desc)) = relations.first() {
        format!("Question: What connects {src} and {tgt}?\nAnswer: {desc}")
    } else {
        // single-node subgraph: fall back to the entity block
        let entities = section_after(prompt, "Entities:");
        let first = entities.lines().next().unwrap_or("- thing (t): exists").trim();
        let name = first
            .trim_start_matches("- ")
            .split(" (")
            .next()
            .unwrap_or("the entity");
        format!("Question: What is known about {name}?\nAnswer: {}", first.trim_start_matches("- "))
    }
}

fn answer_aggregated_passage(prompt: &str) -> String {
    let relations = relation_lines(section_after(prompt, "Relationships:"));
    let sentences: Vec<String> = relations.into_iter().map(|(_, _, d)| d).collect();
    if sentences.is_empty() {
        "The knowledge describes a single isolated concept.".to_string()
    } else {
        sentences.join(" ")
    }
}

fn answer_aggregated_question(prompt: &str) -> String {
    let passage = section_after(prompt, "Passage:");
    let topic: Vec<&str> = passage.split_whitespace().skip(3).take(3).collect();
    format!(
        "What does the source say about {}?",
        if topic.is_empty() { "this topic".to_string() } else { topic.join(" ") }
    )
}

fn answer_multihop(prompt: &str) -> String {
    let relations = relation_lines(section_after(prompt, "Relationship chain:"));
    if relations.len() < 2 {
        return "Question: unavailable\nAnswer: unavailable".to_string();
    }
    let first = &relations[0];
    let last = &relations[relations.len() - 1];
    let walk: Vec<String> = relations
        .iter()
        .map(|(s, t, d)| format!("{d} (linking {s} and {t})"))
        .collect();
    format!(
        "Question: How is {} related to {} through intermediate links?\nAnswer: {}",
        first.0,
        last.1,
        walk.join("; ")
    )
}

/// A backend whose responses are pure functions of the request. It
/// recognizes each pipeline prompt by its fixed template text.
#[derive(Debug, Default)]
pub struct MockModelBackend;

impl Backend for MockModelBackend {
    fn execute(&self, request: &ChatRequest) -> Result<serde_json::Value, BackendError> {
        let prompt = request
            .messages
            .last()
            .map(|m| m.content.as_str())
            .unwrap_or("");
        if prompt.contains("Judge whether the following statement") {
            return Ok(answer_judgement(prompt));
        }
        let text = if prompt.contains("Identify all relevant entities") {
            answer_extraction(prompt)
        } else if prompt.contains("refer to the same item") {
            answer_summarization(prompt)
        } else if prompt.contains("keep exactly the same meaning") {
            answer_rephrase(prompt, false)
        } else if prompt.contains("OPPOSITE meaning") {
            answer_rephrase(prompt, true)
        } else if prompt.contains("tests a single basic fact") {
            answer_atomic(prompt)
        } else if prompt.contains("one coherent, self-contained passage") {
            answer_aggregated_passage(prompt)
        } else if prompt.contains("open-ended question for which the following passage") {
            answer_aggregated_question(prompt)
        } else if prompt.contains("multi-step reasoning") {
            answer_multihop(prompt)
        } else {
            return Err(BackendError::Other(format!(
                "mock model got an unrecognized prompt: {}",
                &prompt[..prompt.len().min(80)]
            )));
        };
        Ok(ScriptedBackend::text_response(&text))
    }
}

/// Synthesizer client backed by the deterministic mock model.
pub fn mock_synthesizer() -> LlmClient {
    LlmClient::new(
        mock_endpoint(ModelRole::Synthesizer),
        Arc::new(MockModelBackend),
        fast_retry(),
        8,
    )
}

/// Trainee client backed by the deterministic mock model.
pub fn mock_trainee() -> LlmClient {
    LlmClient::new(
        mock_endpoint(ModelRole::Trainee),
        Arc::new(MockModelBackend),
        fast_retry(),
        8,
    )
}
