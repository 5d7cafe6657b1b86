//! Corpus ingestion and token-bounded chunking.

use std::fs;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::token::{TokenCounter, TokenSpan};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Unreadable {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed JSONL record: {source}")]
    MalformedJsonl {
        path: PathBuf,
        line: usize,
        source: serde_json::Error,
    },
    #[error("{path}:{line}: record has no \"content\" string field")]
    MissingContent { path: PathBuf, line: usize },
    #[error("{path}: document text is empty")]
    EmptyDocument { path: PathBuf },
    #[error("duplicate doc_id {doc_id:?}")]
    DuplicateDocId { doc_id: String },
}

/// Supported input file layouts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputFormat {
    PlainText,
    JsonlContentField,
}

/// One source document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub text: String,
    pub source_path: String,
}

/// One token-bounded fragment of a document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub chunk_id: String,
    pub doc_id: String,
    pub text: String,
    pub token_count: usize,
    pub index_in_doc: usize,
}

/// Reads documents from disk. Plain text yields one document per file,
/// JSONL one per record (using the record's "id" field when present).
pub fn ingest(paths: &[PathBuf], format: InputFormat) -> Result<Vec<Document>, CorpusError> {
    let mut docs = Vec::new();
    for path in paths {
        match format {
            InputFormat::PlainText => {
                let text = fs::read_to_string(path).map_err(|source| CorpusError::Unreadable {
                    path: path.clone(),
                    source,
                })?;
                if text.trim().is_empty() {
                    return Err(CorpusError::EmptyDocument { path: path.clone() });
                }
                docs.push(Document {
                    doc_id: path.to_string_lossy().into_owned(),
                    text,
                    source_path: path.to_string_lossy().into_owned(),
                });
            }
            InputFormat::JsonlContentField => {
                let raw = fs::read_to_string(path).map_err(|source| CorpusError::Unreadable {
                    path: path.clone(),
                    source,
                })?;
                for (i, line) in raw.lines().enumerate() {
                    if line.trim().is_empty() {
                        continue;
                    }
                    let value: serde_json::Value = serde_json::from_str(line).map_err(|source| {
                        CorpusError::MalformedJsonl {
                            path: path.clone(),
                            line: i + 1,
                            source,
                        }
                    })?;
                    let content = value
                        .get("content")
                        .and_then(|v| v.as_str())
                        .ok_or_else(|| CorpusError::MissingContent {
                            path: path.clone(),
                            line: i + 1,
                        })?;
                    if content.trim().is_empty() {
                        return Err(CorpusError::MissingContent {
                            path: path.clone(),
                            line: i + 1,
                        });
                    }
                    let doc_id = match value.get("id").and_then(|v| v.as_str()) {
                        Some(id) => id.to_string(),
                        None => format!("{}#{}", path.to_string_lossy(), i + 1),
                    };
                    docs.push(Document {
                        doc_id,
                        text: content.to_string(),
                        source_path: path.to_string_lossy().into_owned(),
                    });
                }
            }
        }
    }
    let mut seen = std::collections::HashSet::new();
    for doc in &docs {
        if !seen.insert(doc.doc_id.as_str()) {
            return Err(CorpusError::DuplicateDocId {
                doc_id: doc.doc_id.clone(),
            });
        }
    }
    Ok(docs)
}

/// Sentence-terminal punctuation tokens preferred as split points.
fn is_sentence_end(text: &str, span: TokenSpan) -> bool {
    matches!(&text[span.start..span.end], "." | "!" | "?" | "。" | "！" | "？" | "…")
}

/// Token boundary followed by whitespace (or end of text).
fn is_whitespace_boundary(text: &str, span: TokenSpan) -> bool {
    text[span.end..]
        .chars()
        .next()
        .map(|c| c.is_whitespace())
        .unwrap_or(true)
}

/// Splits a document into chunks of at most `max_chunk_tokens` tokens.
///
/// Split points prefer the latest sentence boundary inside the budget, then
/// the latest whitespace boundary, then a hard token cut. Consecutive chunks
/// share `overlap_tokens` tokens. With `overlap_tokens == 0` concatenating
/// the chunk texts in order reproduces the document byte for byte.
pub fn chunk_document(
    doc: &Document,
    max_chunk_tokens: usize,
    overlap_tokens: usize,
    counter: &dyn TokenCounter,
) -> Vec<Chunk> {
    assert!(max_chunk_tokens > 0, "max_chunk_tokens must be positive");
    assert!(
        overlap_tokens < max_chunk_tokens,
        "overlap_tokens must be smaller than max_chunk_tokens"
    );
    let text = doc.text.as_str();
    let spans = counter.spans(text);
    if spans.is_empty() {
        return Vec::new();
    }

    let mut chunks = Vec::new();
    let mut start = 0usize; // first token of the current chunk
    let mut prev_cut_byte = 0usize;
    loop {
        let remaining = spans.len() - start;
        let last = if remaining <= max_chunk_tokens {
            spans.len() - 1
        } else {
            let hi = start + max_chunk_tokens - 1; // inclusive window limit
            let window = start..=hi;
            let sentence = window
                .clone()
                .rev()
                .find(|&i| is_sentence_end(text, spans[i]));
            let cut = sentence.or_else(|| {
                window.rev().find(|&i| is_whitespace_boundary(text, spans[i]))
            });
            cut.unwrap_or(hi)
        };

        let byte_start = if start == 0 {
            0
        } else if overlap_tokens == 0 {
            prev_cut_byte
        } else {
            spans[start].start
        };
        let byte_end = if last == spans.len() - 1 {
            text.len()
        } else {
            spans[last].end
        };
        let index = chunks.len();
        chunks.push(Chunk {
            chunk_id: format!("{}:{}", doc.doc_id, index),
            doc_id: doc.doc_id.clone(),
            text: text[byte_start..byte_end].to_string(),
            token_count: last - start + 1,
            index_in_doc: index,
        });

        if last == spans.len() - 1 {
            break;
        }
        prev_cut_byte = spans[last].end;
        // Overlap re-reads trailing tokens; always advance by at least one.
        start = (last + 1).saturating_sub(overlap_tokens).max(start + 1);
    }
    chunks
}
