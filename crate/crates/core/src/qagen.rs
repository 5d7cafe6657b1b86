//! Subgraph-to-QA conversion in atomic, aggregated and multi-hop forms,
//! and dataset serialization (alpaca / sharegpt JSONL).

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kg::KnowledgeGraph;
use crate::llm::{GenerationParams, LlmClient, LlmError, Message};
use crate::template::{PromptSet, PromptTemplate, TemplateError};
use crate::traverse::{QaForm, Seed, Subgraph};

#[derive(Debug, Error)]
pub enum QagenError {
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("unparseable response at stage {stage}: {raw:?}")]
    Unparseable { stage: &'static str, raw: String },
    #[error("cannot write dataset {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// Reference from a QA record back to the subgraph it came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubgraphRef {
    pub seed: Seed,
    pub edges: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QARecord {
    pub question: String,
    pub answer: String,
    pub form: QaForm,
    pub subgraph_ref: SubgraphRef,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_loss: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetFormat {
    Alpaca,
    Sharegpt,
}

fn entities_block(graph: &KnowledgeGraph, subgraph: &Subgraph) -> String {
    subgraph
        .nodes
        .iter()
        .filter_map(|name| graph.entities.get(name))
        .map(|e| format!("- {} ({}): {}", e.name, e.entity_type, e.descriptions.join(" ")))
        .collect::<Vec<_>>()
        .join("\n")
}

fn relations_block(graph: &KnowledgeGraph, subgraph: &Subgraph) -> String {
    subgraph
        .edges
        .iter()
        .filter_map(|key| graph.relations.get(key))
        .map(|r| format!("- {} <-> {}: {}", r.src, r.tgt, r.descriptions.join(" ")))
        .collect::<Vec<_>>()
        .join("\n")
}

fn loss_stats(graph: &KnowledgeGraph, subgraph: &Subgraph) -> (Option<f64>, Option<f64>) {
    let losses: Vec<f64> = subgraph
        .edges
        .iter()
        .filter_map(|key| graph.relations.get(key))
        .filter_map(|r| r.loss)
        .collect();
    if losses.is_empty() {
        return (None, None);
    }
    let max = losses.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mean = losses.iter().sum::<f64>() / losses.len() as f64;
    (Some(max), Some(mean))
}

fn subgraph_ref(subgraph: &Subgraph) -> SubgraphRef {
    SubgraphRef {
        seed: subgraph.seed.clone(),
        edges: subgraph.edges.clone(),
    }
}

/// Parses a "Question: ... Answer: ..." response. Prefixes are matched
/// case-insensitively; the answer runs to the end of the text.
fn parse_qa_response(text: &str) -> Option<(String, String)> {
    let lower = text.to_lowercase();
    let q_pos = lower.find("question:")?;
    let a_pos = lower[q_pos..].find("answer:").map(|p| p + q_pos)?;
    let question = text[q_pos + "question:".len()..a_pos].trim().to_string();
    let answer = text[a_pos + "answer:".len()..].trim().to_string();
    if question.is_empty() || answer.is_empty() {
        return None;
    }
    Some((question, answer))
}

fn complete_qa(
    synthesizer: &LlmClient,
    template: &PromptTemplate,
    bindings: &BTreeMap<&str, String>,
    stage: &'static str,
) -> Result<(String, String), QagenError> {
    let prompt = template.render(bindings)?;
    let messages = [Message::user(prompt)];
    let params = GenerationParams::synthesizer();
    let mut raw = String::new();
    // one automatic reprompt on parse failure
    for _ in 0..2 {
        let result = synthesizer.complete(&messages, &params)?;
        if let Some(pair) = parse_qa_response(&result.text) {
            return Ok(pair);
        }
        raw = result.text;
    }
    Err(QagenError::Unparseable { stage, raw })
}

/// One basic-knowledge QA pair from a single node or edge.
pub fn gen_atomic(
    graph: &KnowledgeGraph,
    subgraph: &Subgraph,
    synthesizer: &LlmClient,
    prompts: &PromptSet,
) -> Result<QARecord, QagenError> {
    if subgraph.edges.len() > 1 {
        return Err(QagenError::Precondition(format!(
            "atomic generation needs a single node or edge, got {} edges",
            subgraph.edges.len()
        )));
    }
    let mut bindings = BTreeMap::new();
    bindings.insert("entities", entities_block(graph, subgraph));
    bindings.insert("relations", relations_block(graph, subgraph));
    let (question, answer) = complete_qa(synthesizer, &prompts.atomic_qa, &bindings, "atomic")?;
    let (max_loss, mean_loss) = loss_stats(graph, subgraph);
    Ok(QARecord {
        question,
        answer,
        form: QaForm::Atomic,
        subgraph_ref: subgraph_ref(subgraph),
        max_loss,
        mean_loss,
    })
}

/// Two-stage aggregated QA: rephrase the subgraph into a coherent answer,
/// then generate a question for that answer.
pub fn gen_aggregated(
    graph: &KnowledgeGraph,
    subgraph: &Subgraph,
    synthesizer: &LlmClient,
    prompts: &PromptSet,
) -> Result<QARecord, QagenError> {
    if subgraph.edges.is_empty() {
        return Err(QagenError::Precondition(
            "aggregated generation needs at least one edge".into(),
        ));
    }
    let mut bindings = BTreeMap::new();
    bindings.insert("entities", entities_block(graph, subgraph));
    bindings.insert("relations", relations_block(graph, subgraph));
    let prompt = prompts.aggregated_answer.render(&bindings)?;
    let params = GenerationParams::synthesizer();
    let answer = synthesizer
        .complete(&[Message::user(prompt)], &params)?
        .text
        .trim()
        .to_string();
    if answer.is_empty() {
        return Err(QagenError::Unparseable {
            stage: "answer",
            raw: String::new(),
        });
    }

    let mut q_bindings = BTreeMap::new();
    q_bindings.insert("answer", answer.clone());
    let q_prompt = prompts.aggregated_question.render(&q_bindings)?;
    let question = synthesizer
        .complete(&[Message::user(q_prompt)], &params)?
        .text
        .trim()
        .to_string();
    if question.is_empty() {
        return Err(QagenError::Unparseable {
            stage: "question",
            raw: String::new(),
        });
    }

    let (max_loss, mean_loss) = loss_stats(graph, subgraph);
    Ok(QARecord {
        question,
        answer,
        form: QaForm::Aggregated,
        subgraph_ref: subgraph_ref(subgraph),
        max_loss,
        mean_loss,
    })
}

/// One multi-step-reasoning QA pair over a chain of at least two relations.
pub fn gen_multihop(
    graph: &KnowledgeGraph,
    subgraph: &Subgraph,
    synthesizer: &LlmClient,
    prompts: &PromptSet,
) -> Result<QARecord, QagenError> {
    if subgraph.edges.len() < 2 {
        return Err(QagenError::Precondition(format!(
            "multi-hop generation needs at least 2 edges, got {}",
            subgraph.edges.len()
        )));
    }
    let mut bindings = BTreeMap::new();
    bindings.insert("entities", entities_block(graph, subgraph));
    bindings.insert("relations", relations_block(graph, subgraph));
    let (question, answer) = complete_qa(synthesizer, &prompts.multihop_qa, &bindings, "multi_hop")?;
    let (max_loss, mean_loss) = loss_stats(graph, subgraph);
    Ok(QARecord {
        question,
        answer,
        form: QaForm::MultiHop,
        subgraph_ref: subgraph_ref(subgraph),
        max_loss,
        mean_loss,
    })
}

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
pub struct GenStats {
    pub records: usize,
    pub skips: usize,
}

/// Generates one record per subgraph in the requested form. A multi-edge
/// subgraph under the atomic form is reduced to its seed edge so the
/// single-fact contract holds; failures are skipped and counted.
pub fn generate_dataset(
    graph: &KnowledgeGraph,
    subgraphs: &[Subgraph],
    form: QaForm,
    synthesizer: &LlmClient,
    prompts: &PromptSet,
) -> (Vec<QARecord>, GenStats) {
    use rayon::prelude::*;
    let results: Vec<Option<QARecord>> = subgraphs
        .par_iter()
        .map(|subgraph| {
            let outcome = match form {
                QaForm::Atomic => {
                    if subgraph.edges.len() > 1 {
                        let reduced = Subgraph {
                            seed: subgraph.seed.clone(),
                            edges: subgraph.edges[..1].to_vec(),
                            nodes: [subgraph.edges[0].0.clone(), subgraph.edges[0].1.clone()]
                                .into(),
                            pre_length: subgraph.pre_length,
                            depths: subgraph.depths[..1].to_vec(),
                        };
                        gen_atomic(graph, &reduced, synthesizer, prompts)
                    } else {
                        gen_atomic(graph, subgraph, synthesizer, prompts)
                    }
                }
                QaForm::Aggregated => gen_aggregated(graph, subgraph, synthesizer, prompts),
                QaForm::MultiHop => gen_multihop(graph, subgraph, synthesizer, prompts),
            };
            match outcome {
                Ok(record) => Some(record),
                Err(err) => {
                    warn!("QA generation skipped: {err}");
                    None
                }
            }
        })
        .collect();
    let mut records = Vec::new();
    let mut stats = GenStats::default();
    for r in results {
        match r {
            Some(record) => records.push(record),
            None => stats.skips += 1,
        }
    }
    stats.records = records.len();
    (records, stats)
}

fn seed_sort_key(seed: &Seed) -> (String, String) {
    match seed {
        Seed::Edge((a, b)) => (a.clone(), b.clone()),
        Seed::Node(name) => (name.clone(), String::new()),
    }
}

fn form_rank(form: QaForm) -> u8 {
    match form {
        QaForm::Atomic => 0,
        QaForm::Aggregated => 1,
        QaForm::MultiHop => 2,
    }
}

/// Writes records as JSONL, ordered by (form, seed key) for determinism.
pub fn write_dataset(
    records: &[QARecord],
    path: &Path,
    format: DatasetFormat,
) -> Result<(), QagenError> {
    if records.is_empty() {
        return Err(QagenError::Precondition("no records to write".into()));
    }
    let mut ordered: Vec<&QARecord> = records.iter().collect();
    ordered.sort_by(|a, b| {
        form_rank(a.form)
            .cmp(&form_rank(b.form))
            .then_with(|| seed_sort_key(&a.subgraph_ref.seed).cmp(&seed_sort_key(&b.subgraph_ref.seed)))
    });

    let io_err = |source: std::io::Error| QagenError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut file = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
    for record in ordered {
        let line = match format {
            DatasetFormat::Alpaca => serde_json::json!({
                "instruction": record.question,
                "input": "",
                "output": record.answer,
            }),
            DatasetFormat::Sharegpt => serde_json::json!({
                "conversations": [
                    {"from": "human", "value": record.question},
                    {"from": "gpt", "value": record.answer},
                ]
            }),
        };
        writeln!(file, "{line}").map_err(io_err)?;
    }
    file.flush().map_err(io_err)?;
    Ok(())
}
