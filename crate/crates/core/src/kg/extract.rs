//! LLM-driven entity/relation extraction and description summarization.
//!
//! The synthesizer answers with delimited records, one per line:
//!
//! ```text
//! ("entity"|NAME|TYPE|DESCRIPTION)
//! ("relationship"|SRC|TGT|DESCRIPTION)
//! <|COMPLETE|>
//! ```
//!
//! Parsing is tolerant: lines that do not match the grammar are skipped and
//! counted, never fatal on their own.

use std::collections::BTreeMap;

use log::warn;

use super::{canonical_name, Entity, KgError, KnowledgeGraph, Relation, UNKNOWN_TYPE};
use crate::corpus::Chunk;
use crate::llm::{GenerationParams, LlmClient, Message};
use crate::template::PromptSet;

pub const COMPLETION_MARKER: &str = "<|COMPLETE|>";

#[derive(Debug, Default, Clone, PartialEq)]
pub struct ExtractionOutcome {
    pub entities: Vec<Entity>,
    pub relations: Vec<Relation>,
    /// Lines that looked like records but failed to parse, plus empty
    /// responses.
    pub parse_failures: u64,
}

enum Record {
    Entity {
        name: String,
        entity_type: String,
        description: String,
    },
    Relation {
        src: String,
        tgt: String,
        description: String,
    },
}

fn parse_record(line: &str) -> Option<Record> {
    let line = line.trim();
    let inner = line.strip_prefix('(').unwrap_or(line);
    let inner = inner.strip_suffix(')').unwrap_or(inner);
    let fields: Vec<&str> = inner.split('|').map(str::trim).collect();
    if fields.len() != 4 {
        return None;
    }
    let kind = fields[0].trim_matches(|c| c == '"' || c == '\'');
    let unquote = |s: &str| s.trim_matches('"').trim().to_string();
    match kind.to_lowercase().as_str() {
        "entity" => {
            let name = unquote(fields[1]);
            let description = unquote(fields[3]);
            if name.is_empty() || description.is_empty() {
                return None;
            }
            Some(Record::Entity {
                name,
                entity_type: unquote(fields[2]),
                description,
            })
        }
        "relationship" | "relation" => {
            let src = unquote(fields[1]);
            let tgt = unquote(fields[2]);
            let description = unquote(fields[3]);
            if src.is_empty() || tgt.is_empty() || description.is_empty() {
                return None;
            }
            Some(Record::Relation { src, tgt, description })
        }
        _ => None,
    }
}

/// Parses a full extraction response into entities and relations, tagging
/// every item with `chunk_id`. Relation endpoints absent from the response
/// become placeholder entities of type `UNKNOWN`. Never panics, for any
/// input string.
pub fn parse_extraction_response(response: &str, chunk_id: &str) -> ExtractionOutcome {
    let mut outcome = ExtractionOutcome::default();
    if response.trim().is_empty() {
        outcome.parse_failures += 1;
        return outcome;
    }
    let mut entities: BTreeMap<String, Entity> = BTreeMap::new();
    let mut relations: Vec<Relation> = Vec::new();
    for line in response.lines() {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed == COMPLETION_MARKER {
            continue;
        }
        match parse_record(trimmed) {
            None => outcome.parse_failures += 1,
            Some(Record::Entity {
                name,
                entity_type,
                description,
            }) => {
                let key = canonical_name(&name);
                if key.is_empty() {
                    outcome.parse_failures += 1;
                    continue;
                }
                let entry = entities.entry(key.clone()).or_insert_with(|| Entity {
                    name: key,
                    entity_type,
                    descriptions: Vec::new(),
                    source_chunks: [chunk_id.to_string()].into(),
                    original_descriptions: Vec::new(),
                });
                if !entry.descriptions.contains(&description) {
                    entry.descriptions.push(description);
                }
            }
            Some(Record::Relation { src, tgt, description }) => {
                let (src, tgt) = (canonical_name(&src), canonical_name(&tgt));
                if src.is_empty() || tgt.is_empty() || src == tgt {
                    outcome.parse_failures += 1;
                    continue;
                }
                relations.push(Relation {
                    src,
                    tgt,
                    descriptions: vec![description],
                    source_chunks: [chunk_id.to_string()].into(),
                    loss: None,
                    original_descriptions: Vec::new(),
                });
            }
        }
    }
    // Keep relations whose endpoints are missing by inventing placeholders.
    for rel in &relations {
        for endpoint in [&rel.src, &rel.tgt] {
            if !entities.contains_key(endpoint) {
                entities.insert(
                    endpoint.clone(),
                    Entity {
                        name: endpoint.clone(),
                        entity_type: UNKNOWN_TYPE.to_string(),
                        descriptions: rel.descriptions.clone(),
                        source_chunks: [chunk_id.to_string()].into(),
                        original_descriptions: Vec::new(),
                    },
                );
            }
        }
    }
    outcome.entities = entities.into_values().collect();
    outcome.relations = relations;
    outcome
}

/// Asks the synthesizer to extract entities/relations from one chunk. A
/// response that yields no records at all is retried once with the same
/// prompt, then reported as an extraction error carrying the raw text.
pub fn extract_from_chunk(
    chunk: &Chunk,
    synthesizer: &LlmClient,
    entity_types: &[String],
    prompts: &PromptSet,
) -> Result<ExtractionOutcome, KgError> {
    assert!(!chunk.text.trim().is_empty(), "chunk text must be non-empty");
    let mut bindings = BTreeMap::new();
    bindings.insert("entity_types", entity_types.join(", "));
    bindings.insert("text", chunk.text.clone());
    let prompt = prompts.kg_extraction.render(&bindings)?;
    let messages = [Message::user(prompt)];
    let params = GenerationParams::synthesizer();

    let mut last_raw = String::new();
    for _attempt in 0..2 {
        let result = synthesizer.complete(&messages, &params)?;
        if result.text.trim().is_empty() {
            return Ok(parse_extraction_response(&result.text, &chunk.chunk_id));
        }
        let outcome = parse_extraction_response(&result.text, &chunk.chunk_id);
        if !outcome.entities.is_empty() || !outcome.relations.is_empty() {
            // Validate entity types against the configured list.
            let mut outcome = outcome;
            for entity in &mut outcome.entities {
                let known = entity.entity_type == UNKNOWN_TYPE
                    || entity_types
                        .iter()
                        .any(|t| t.eq_ignore_ascii_case(&entity.entity_type));
                if !known {
                    entity.entity_type = UNKNOWN_TYPE.to_string();
                }
            }
            return Ok(outcome);
        }
        last_raw = result.text;
    }
    Err(KgError::Unparseable { raw: last_raw })
}

/// Replaces an item's descriptions with one synthesizer-produced summary
/// when they number at least `threshold`. Originals are kept in the audit
/// field. On LLM failure the item is left unmodified and a warning logged.
pub fn summarize_item(
    label: &str,
    descriptions: &mut Vec<String>,
    audit: &mut Vec<String>,
    synthesizer: &LlmClient,
    prompts: &PromptSet,
    threshold: usize,
) -> Result<bool, KgError> {
    assert!(threshold > 0);
    if descriptions.len() < threshold {
        return Ok(false);
    }
    let mut bindings = BTreeMap::new();
    bindings.insert("item", label.to_string());
    bindings.insert("descriptions", descriptions.join("\n"));
    let prompt = prompts.kg_summarization.render(&bindings)?;
    match synthesizer.complete(&[Message::user(prompt)], &GenerationParams::synthesizer()) {
        Ok(result) => {
            let summary = result.text.trim().to_string();
            if summary.is_empty() {
                warn!("empty summary for {label}; keeping original descriptions");
                return Ok(false);
            }
            *audit = std::mem::take(descriptions);
            *descriptions = vec![summary];
            Ok(true)
        }
        Err(err) => {
            warn!("summarization failed for {label}: {err}; item left unmodified");
            Ok(false)
        }
    }
}

/// Summarizes every entity and relation whose merged descriptions reach the
/// threshold. Returns the number of items summarized.
pub fn summarize_graph(
    graph: &mut KnowledgeGraph,
    synthesizer: &LlmClient,
    prompts: &PromptSet,
    threshold: usize,
) -> Result<usize, KgError> {
    let mut summarized = 0;
    let entity_names: Vec<String> = graph.entities.keys().cloned().collect();
    for name in entity_names {
        let entity = graph.entities.get_mut(&name).expect("present");
        let mut descriptions = std::mem::take(&mut entity.descriptions);
        let mut audit = std::mem::take(&mut entity.original_descriptions);
        let done = summarize_item(&name, &mut descriptions, &mut audit, synthesizer, prompts, threshold)?;
        let entity = graph.entities.get_mut(&name).expect("present");
        entity.descriptions = descriptions;
        entity.original_descriptions = audit;
        summarized += usize::from(done);
    }
    let keys: Vec<_> = graph.relations.keys().cloned().collect();
    for key in keys {
        let relation = graph.relations.get_mut(&key).expect("present");
        let label = format!("{} <-> {}", key.0, key.1);
        let mut descriptions = std::mem::take(&mut relation.descriptions);
        let mut audit = std::mem::take(&mut relation.original_descriptions);
        let done = summarize_item(&label, &mut descriptions, &mut audit, synthesizer, prompts, threshold)?;
        let relation = graph.relations.get_mut(&key).expect("present");
        relation.descriptions = descriptions;
        relation.original_descriptions = audit;
        summarized += usize::from(done);
    }
    Ok(summarized)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_entities_and_relations() {
        let response = "\
(\"entity\"|DEP1|gene|DEP1 regulates grain size in rice)
(\"entity\"|Grain Length|trait|Grain length is a yield component)
(\"relationship\"|DEP1|Grain Length|Elevated DEP1 accumulation increases grain length)
<|COMPLETE|>";
        let out = parse_extraction_response(response, "c1");
        assert_eq!(out.entities.len(), 2);
        assert_eq!(out.relations.len(), 1);
        assert_eq!(out.parse_failures, 0);
        assert!(out.entities.iter().all(|e| e.source_chunks.contains("c1")));
        assert_eq!(out.relations[0].src, "dep1");
        assert_eq!(out.relations[0].tgt, "grain length");
    }

    #[test]
    fn relation_with_missing_endpoint_gets_placeholder() {
        let response = "(\"relationship\"|A|B|A touches B)\n<|COMPLETE|>";
        let out = parse_extraction_response(response, "c1");
        assert_eq!(out.relations.len(), 1);
        assert_eq!(out.entities.len(), 2);
        assert!(out.entities.iter().all(|e| e.entity_type == UNKNOWN_TYPE));
    }

    #[test]
    fn empty_response_counts_a_failure() {
        let out = parse_extraction_response("   \n ", "c1");
        assert!(out.entities.is_empty() && out.relations.is_empty());
        assert_eq!(out.parse_failures, 1);
    }

    #[test]
    fn bad_lines_are_skipped_and_counted() {
        let response = "\
garbage line
(\"entity\"|X|thing|X exists)
(\"entity\"|broken
(\"relationship\"|X|X|self loop)";
        let out = parse_extraction_response(response, "c1");
        assert_eq!(out.entities.len(), 1);
        assert_eq!(out.relations.len(), 0);
        assert_eq!(out.parse_failures, 3);
    }

    proptest! {
        #[test]
        fn parser_never_panics(response in "\\PC*") {
            let _ = parse_extraction_response(&response, "c");
        }

        #[test]
        fn parser_never_panics_on_recordish_input(
            lines in prop::collection::vec("[(\")a-z|<>! ]{0,40}", 0..10)
        ) {
            let _ = parse_extraction_response(&lines.join("\n"), "c");
        }
    }
}
