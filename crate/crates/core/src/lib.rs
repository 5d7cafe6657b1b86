//! Knowledge-graph-guided synthetic QA generation.
//!
//! The pipeline ingests a text corpus, extracts a knowledge graph with a
//! strong synthesizer model, probes a trainee model's comprehension of each
//! relation to find knowledge gaps, grows loss-prioritized k-hop subgraphs,
//! and turns them into QA training data in alpaca or sharegpt form. All
//! model traffic goes through a record/replay-capable client so full runs
//! are reproducible offline.
//!
//! Numeric kernels (comprehension scoring, lexical diversity, metric
//! normalization) are generic over the scalar via `num_traits::Float`; the
//! pipeline itself fixes the scalar to [`Real`].

pub mod assess;
pub mod config;
pub mod corpus;
pub mod kg;
pub mod llm;
pub mod metrics;
pub mod pipeline;
pub mod qagen;
pub mod template;
pub mod testkit;
pub mod token;
pub mod traverse;

/// Scalar type used throughout the concrete pipeline.
pub type Real = f64;

pub use config::{load_config, validate_config, PipelineConfig};
pub use pipeline::{run_pipeline, RunReport};
