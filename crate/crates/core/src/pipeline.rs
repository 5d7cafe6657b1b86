//! End-to-end orchestration: stage sequencing with per-stage caching and
//! resume, run locking, and run reporting.
//!
//! Stage artifacts live under `cache_dir`, each wrapped in an envelope
//! carrying the semantic config hash and the hash of the upstream artifact;
//! a stage is skipped when both match. Corrupted cache files are re-executed
//! with a warning, never fatal.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use log::warn;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::assess::{assess_graph, ProbeOptions};
use crate::config::{Mode, PipelineConfig};
use crate::corpus::{chunk_document, ingest, Chunk};
use crate::kg::{extract_from_chunk, summarize_graph, KnowledgeGraph};
use crate::llm::{
    Backend, ChatRequest, BackendError, HttpBackend, LlmClient, LlmError, ModelEndpoint, ModelRole,
    RecordingBackend, ReplayBackend, RetryPolicy,
};
use crate::qagen::{generate_dataset, write_dataset, QARecord};
use crate::template::PromptSet;
use crate::token::DefaultTokenCounter;
use crate::traverse::{plan_subgraphs, Subgraph};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("cache_dir {0} is locked by another run (remove {0}/.lock if stale)")]
    Locked(String),
    #[error("replay mode requires an existing cassette at {0}")]
    MissingCassette(String),
    #[error("cannot prepare cache_dir {path}: {reason}")]
    CacheDir { path: String, reason: String },
    #[error(transparent)]
    Llm(#[from] LlmError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageReport {
    pub name: String,
    pub cached: bool,
    pub wall_ms: u64,
    pub counts: BTreeMap<String, u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub config_hash: String,
    pub stages: Vec<StageReport>,
    pub llm_calls: u64,
    pub failed_stage: Option<String>,
}

impl RunReport {
    pub fn succeeded(&self) -> bool {
        self.failed_stage.is_none()
    }
}

#[derive(Serialize, Deserialize)]
struct CacheEnvelope<T> {
    config_hash: String,
    upstream_hash: String,
    payload: T,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn payload_hash<T: Serialize>(payload: &T) -> String {
    sha256_hex(&serde_json::to_vec(payload).expect("serializable payload"))
}

fn load_stage<T: DeserializeOwned>(
    path: &Path,
    config_hash: &str,
    upstream_hash: &str,
) -> Option<T> {
    if !path.exists() {
        return None;
    }
    let bytes = match std::fs::read(path) {
        Ok(b) => b,
        Err(e) => {
            warn!("unreadable cache file {}: {e}; re-executing stage", path.display());
            return None;
        }
    };
    let envelope: CacheEnvelope<T> = match serde_json::from_slice(&bytes) {
        Ok(e) => e,
        Err(e) => {
            warn!("corrupted cache file {}: {e}; re-executing stage", path.display());
            return None;
        }
    };
    if envelope.config_hash != config_hash || envelope.upstream_hash != upstream_hash {
        return None;
    }
    Some(envelope.payload)
}

fn store_stage<T: Serialize>(path: &Path, config_hash: &str, upstream_hash: &str, payload: &T) {
    let envelope = CacheEnvelope {
        config_hash: config_hash.to_string(),
        upstream_hash: upstream_hash.to_string(),
        payload,
    };
    match serde_json::to_vec(&envelope) {
        Ok(bytes) => {
            if let Err(e) = std::fs::write(path, bytes) {
                warn!("cannot write cache file {}: {e}", path.display());
            }
        }
        Err(e) => warn!("cannot serialize cache for {}: {e}", path.display()),
    }
}

/// Exclusive ownership of a cache directory for one run.
struct RunLock {
    path: PathBuf,
}

impl RunLock {
    fn acquire(cache_dir: &Path) -> Result<Self, PipelineError> {
        let path = cache_dir.join(".lock");
        match std::fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut file) => {
                use std::io::Write;
                let _ = writeln!(file, "{}", std::process::id());
                Ok(RunLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(PipelineError::Locked(cache_dir.display().to_string()))
            }
            Err(e) => Err(PipelineError::CacheDir {
                path: path.display().to_string(),
                reason: e.to_string(),
            }),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// Routes requests to the synthesizer or trainee backend by model name.
struct RoleRouter {
    synthesizer_model: String,
    synthesizer: Arc<dyn Backend>,
    trainee: Arc<dyn Backend>,
}

impl Backend for RoleRouter {
    fn execute(&self, request: &ChatRequest) -> Result<serde_json::Value, BackendError> {
        if request.model == self.synthesizer_model {
            self.synthesizer.execute(request)
        } else {
            self.trainee.execute(request)
        }
    }
}

fn endpoint(cfg: &crate::config::EndpointConfig, role: ModelRole) -> ModelEndpoint {
    ModelEndpoint {
        base_url: cfg.base_url.clone(),
        model_name: cfg.model_name.clone(),
        api_key_env_var: cfg.api_key_env_var.clone(),
        role,
    }
}

fn build_clients(
    cfg: &PipelineConfig,
    live_override: Option<Arc<dyn Backend>>,
) -> Result<(LlmClient, LlmClient), PipelineError> {
    let cassette_path = cfg.cache_dir.join("cassette.jsonl");
    let http = |e: &crate::config::EndpointConfig| -> Result<Arc<dyn Backend>, PipelineError> {
        match &live_override {
            Some(backend) => Ok(backend.clone()),
            None => Ok(Arc::new(HttpBackend::new(
                &e.base_url,
                &e.api_key_env_var,
                Duration::from_secs(120),
            )?)),
        }
    };
    let (synth_backend, trainee_backend): (Arc<dyn Backend>, Arc<dyn Backend>) = match cfg.mode {
        Mode::Live => (http(&cfg.synthesizer)?, http(&cfg.trainee)?),
        Mode::Record => {
            let router = Arc::new(RoleRouter {
                synthesizer_model: cfg.synthesizer.model_name.clone(),
                synthesizer: http(&cfg.synthesizer)?,
                trainee: http(&cfg.trainee)?,
            });
            let recorder: Arc<dyn Backend> =
                Arc::new(RecordingBackend::create(router, &cassette_path)?);
            (recorder.clone(), recorder)
        }
        Mode::Replay => {
            if !cassette_path.exists() {
                return Err(PipelineError::MissingCassette(
                    cassette_path.display().to_string(),
                ));
            }
            let replay: Arc<dyn Backend> = Arc::new(ReplayBackend::open(&cassette_path)?);
            (replay.clone(), replay)
        }
    };
    let retry = RetryPolicy::default();
    Ok((
        LlmClient::new(
            endpoint(&cfg.synthesizer, ModelRole::Synthesizer),
            synth_backend,
            retry.clone(),
            cfg.synthesizer.concurrency,
        ),
        LlmClient::new(
            endpoint(&cfg.trainee, ModelRole::Trainee),
            trainee_backend,
            retry,
            cfg.trainee.concurrency,
        ),
    ))
}

fn sources_hash(paths: &[PathBuf]) -> String {
    let mut hasher = Sha256::new();
    for path in paths {
        hasher.update(path.display().to_string().as_bytes());
        hasher.update([0]);
        if let Ok(bytes) = std::fs::read(path) {
            hasher.update(&bytes);
        }
        hasher.update([0]);
    }
    hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

struct StageRunner {
    report: RunReport,
}

impl StageRunner {
    /// Runs one stage unless a valid cached artifact exists; records timing
    /// and counts either way. Returns `None` after a failure.
    fn stage<T, F>(
        &mut self,
        name: &str,
        cache_path: &Path,
        config_hash: &str,
        upstream_hash: &str,
        counts_of: impl Fn(&T) -> BTreeMap<String, u64>,
        run: F,
    ) -> Option<T>
    where
        T: Serialize + DeserializeOwned,
        F: FnOnce() -> Result<T, String>,
    {
        let start = Instant::now();
        if let Some(payload) = load_stage::<T>(cache_path, config_hash, upstream_hash) {
            self.report.stages.push(StageReport {
                name: name.to_string(),
                cached: true,
                wall_ms: start.elapsed().as_millis() as u64,
                counts: counts_of(&payload),
                error: None,
            });
            return Some(payload);
        }
        match run() {
            Ok(payload) => {
                store_stage(cache_path, config_hash, upstream_hash, &payload);
                self.report.stages.push(StageReport {
                    name: name.to_string(),
                    cached: false,
                    wall_ms: start.elapsed().as_millis() as u64,
                    counts: counts_of(&payload),
                    error: None,
                });
                Some(payload)
            }
            Err(message) => {
                self.report.stages.push(StageReport {
                    name: name.to_string(),
                    cached: false,
                    wall_ms: start.elapsed().as_millis() as u64,
                    counts: BTreeMap::new(),
                    error: Some(message.clone()),
                });
                self.report.failed_stage = Some(name.to_string());
                None
            }
        }
    }
}

fn counts(pairs: &[(&str, u64)]) -> BTreeMap<String, u64> {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

#[derive(Serialize, Deserialize)]
struct KgStagePayload {
    graph: KnowledgeGraph,
    parse_failures: u64,
    failed_chunks: u64,
    summarized: u64,
}

#[derive(Serialize, Deserialize)]
struct AssessStagePayload {
    graph: KnowledgeGraph,
    scored: u64,
    skipped: u64,
}

#[derive(Serialize, Deserialize)]
struct GenerateStagePayload {
    records: Vec<QARecord>,
    skips: u64,
    subgraphs_consumed: u64,
}

/// Pipeline stages, in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Ingest,
    KgBuild,
    Assess,
    Traverse,
    Generate,
}

/// Runs the full pipeline: ingest, knowledge-graph build, comprehension
/// assessment, traversal planning and QA generation. On a stage failure the
/// report carries partial counts and names the failed stage.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunReport, PipelineError> {
    run_pipeline_with(cfg, None)
}

/// Like [`run_pipeline`], with an optional replacement for the live HTTP
/// backend (used by tests and offline demos; record mode then records the
/// replacement's responses).
pub fn run_pipeline_with(
    cfg: &PipelineConfig,
    live_override: Option<Arc<dyn Backend>>,
) -> Result<RunReport, PipelineError> {
    run_pipeline_until(cfg, Stage::Generate, live_override)
}

/// Runs the pipeline up to and including `stop_after`, reusing cached
/// stages as usual. Lets the CLI expose each stage as its own subcommand.
pub fn run_pipeline_until(
    cfg: &PipelineConfig,
    stop_after: Stage,
    live_override: Option<Arc<dyn Backend>>,
) -> Result<RunReport, PipelineError> {
    std::fs::create_dir_all(&cfg.cache_dir).map_err(|e| PipelineError::CacheDir {
        path: cfg.cache_dir.display().to_string(),
        reason: e.to_string(),
    })?;
    let _lock = RunLock::acquire(&cfg.cache_dir)?;
    let (synthesizer, trainee) = build_clients(cfg, live_override)?;
    let prompts = PromptSet::default();
    let counter = DefaultTokenCounter;
    let config_hash = cfg.semantic_hash();

    let mut runner = StageRunner {
        report: RunReport {
            config_hash: config_hash.clone(),
            stages: Vec::new(),
            llm_calls: 0,
            failed_stage: None,
        },
    };

    'stages: {
        // Stage 1: ingest and chunk.
        let upstream = sources_hash(&cfg.input.paths);
        let chunks: Option<Vec<Chunk>> = runner.stage(
            "ingest",
            &cfg.cache_dir.join("stage_chunks.json"),
            &config_hash,
            &upstream,
            |chunks: &Vec<Chunk>| counts(&[("chunks", chunks.len() as u64)]),
            || {
                let documents =
                    ingest(&cfg.input.paths, cfg.input.format).map_err(|e| e.to_string())?;
                let mut chunks = Vec::new();
                for doc in &documents {
                    chunks.extend(chunk_document(
                        doc,
                        cfg.input.max_chunk_tokens,
                        cfg.input.overlap_tokens,
                        &counter,
                    ));
                }
                Ok(chunks)
            },
        );
        let Some(chunks) = chunks else { break 'stages };
        if stop_after == Stage::Ingest {
            break 'stages;
        }

        // Stage 2: knowledge graph extraction and merging.
        let upstream = payload_hash(&chunks);
        let kg_payload = runner.stage(
            "kg_build",
            &cfg.cache_dir.join("stage_graph.json"),
            &config_hash,
            &upstream,
            |p: &KgStagePayload| {
                counts(&[
                    ("entities", p.graph.entities.len() as u64),
                    ("relations", p.graph.relations.len() as u64),
                    ("parse_failures", p.parse_failures),
                    ("failed_chunks", p.failed_chunks),
                    ("summarized", p.summarized),
                ])
            },
            || {
                use rayon::prelude::*;
                let outcomes: Vec<_> = chunks
                    .par_iter()
                    .map(|chunk| {
                        extract_from_chunk(chunk, &synthesizer, &cfg.kg.entity_types, &prompts)
                    })
                    .collect();
                let mut graph = KnowledgeGraph::new();
                let mut parse_failures = 0;
                let mut failed_chunks = 0;
                for outcome in outcomes {
                    match outcome {
                        Ok(extraction) => {
                            parse_failures += extraction.parse_failures;
                            graph.merge(extraction.entities, extraction.relations);
                        }
                        Err(e) => {
                            warn!("chunk extraction failed: {e}");
                            failed_chunks += 1;
                        }
                    }
                }
                let summarized =
                    summarize_graph(&mut graph, &synthesizer, &prompts, cfg.kg.summary_threshold)
                        .map_err(|e| e.to_string())? as u64;
                Ok(KgStagePayload {
                    graph,
                    parse_failures,
                    failed_chunks,
                    summarized,
                })
            },
        );
        let Some(kg_payload) = kg_payload else { break 'stages };
        if stop_after == Stage::KgBuild {
            break 'stages;
        }

        // Stage 3: trainee comprehension assessment.
        let upstream = payload_hash(&kg_payload.graph);
        let assessed = runner.stage(
            "assess",
            &cfg.cache_dir.join("stage_assessed.json"),
            &config_hash,
            &upstream,
            |p: &AssessStagePayload| {
                counts(&[("scored_relations", p.scored), ("skipped_relations", p.skipped)])
            },
            || {
                let mut graph = kg_payload.graph.clone();
                let options = ProbeOptions {
                    epsilon: cfg.assessment.epsilon,
                    ..ProbeOptions::default()
                };
                let stats = assess_graph(
                    &mut graph,
                    &synthesizer,
                    &trainee,
                    cfg.assessment.n,
                    &options,
                    &prompts,
                );
                Ok(AssessStagePayload {
                    graph,
                    scored: stats.scored as u64,
                    skipped: stats.skipped as u64,
                })
            },
        );
        let Some(assessed) = assessed else { break 'stages };
        if stop_after == Stage::Assess {
            break 'stages;
        }

        // Stage 4: traversal planning.
        let upstream = payload_hash(&assessed.graph);
        let subgraphs: Option<Vec<Subgraph>> = runner.stage(
            "traverse",
            &cfg.cache_dir.join("stage_subgraphs.json"),
            &config_hash,
            &upstream,
            |subs: &Vec<Subgraph>| counts(&[("subgraphs", subs.len() as u64)]),
            || plan_subgraphs(&assessed.graph, &cfg.traversal, &counter).map_err(|e| e.to_string()),
        );
        let Some(subgraphs) = subgraphs else { break 'stages };
        if stop_after == Stage::Traverse {
            break 'stages;
        }

        // Stage 5: QA generation and dataset writing.
        let upstream = payload_hash(&subgraphs);
        let generated = runner.stage(
            "generate",
            &cfg.cache_dir.join("stage_records.json"),
            &config_hash,
            &upstream,
            |p: &GenerateStagePayload| {
                counts(&[
                    ("records", p.records.len() as u64),
                    ("skips", p.skips),
                    ("subgraphs_consumed", p.subgraphs_consumed),
                ])
            },
            || {
                let (records, stats) = generate_dataset(
                    &assessed.graph,
                    &subgraphs,
                    cfg.traversal.qa_form,
                    &synthesizer,
                    &prompts,
                );
                if stats.records + stats.skips != subgraphs.len() {
                    return Err(format!(
                        "count conservation violated: {} records + {} skips != {} subgraphs",
                        stats.records,
                        stats.skips,
                        subgraphs.len()
                    ));
                }
                Ok(GenerateStagePayload {
                    records,
                    skips: stats.skips as u64,
                    subgraphs_consumed: subgraphs.len() as u64,
                })
            },
        );
        let Some(generated) = generated else { break 'stages };

        if let Err(e) = write_dataset(&generated.records, &cfg.output.path, cfg.output.format) {
            runner.report.failed_stage = Some("generate".to_string());
            if let Some(stage) = runner.report.stages.last_mut() {
                stage.error = Some(e.to_string());
            }
        }
    }

    runner.report.llm_calls = synthesizer.call_count() + trainee.call_count();
    let report_path = cfg.cache_dir.join("report.json");
    if let Ok(bytes) = serde_json::to_vec_pretty(&runner.report) {
        if let Err(e) = std::fs::write(&report_path, bytes) {
            warn!("cannot write run report {}: {e}", report_path.display());
        }
    }
    Ok(runner.report)
}

fn load_artifact<T: DeserializeOwned>(path: &Path) -> Option<T> {
    let bytes = std::fs::read(path).ok()?;
    let envelope: CacheEnvelope<T> = serde_json::from_slice(&bytes).ok()?;
    Some(envelope.payload)
}

/// Cached chunk list from a previous `ingest` stage, if present.
pub fn load_chunks(cfg: &PipelineConfig) -> Option<Vec<Chunk>> {
    load_artifact(&cfg.cache_dir.join("stage_chunks.json"))
}

/// Cached knowledge graph. Prefers the assessed (loss-carrying) graph and
/// falls back to the freshly built one.
pub fn load_graph(cfg: &PipelineConfig) -> Option<KnowledgeGraph> {
    if let Some(payload) = load_artifact::<AssessStagePayload>(&cfg.cache_dir.join("stage_assessed.json")) {
        return Some(payload.graph);
    }
    load_artifact::<KgStagePayload>(&cfg.cache_dir.join("stage_graph.json")).map(|p| p.graph)
}

/// Cached subgraph plan from a previous `traverse` stage, if present.
pub fn load_subgraphs(cfg: &PipelineConfig) -> Option<Vec<Subgraph>> {
    load_artifact(&cfg.cache_dir.join("stage_subgraphs.json"))
}

/// Cached QA records from a previous `generate` stage, if present.
pub fn load_records(cfg: &PipelineConfig) -> Option<Vec<QARecord>> {
    load_artifact::<GenerateStagePayload>(&cfg.cache_dir.join("stage_records.json")).map(|p| p.records)
}
