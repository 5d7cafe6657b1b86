//! Intrinsic dataset quality scoring: MTLD lexical diversity, min-max
//! normalization and composite aggregation over externally produced scores.
//!
//! Only the arithmetic lives here; neural scorers (naturalness, coherence,
//! reward models) run elsewhere and their raw outputs are ingested from a
//! side file.

use num_traits::Float;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::qagen::QARecord;
use crate::token::TokenCounter;

/// Type-token-ratio threshold from the published MTLD procedure.
pub const MTLD_TTR_THRESHOLD: f64 = 0.72;
/// Value a direction contributes when its factor total is zero (all-unique
/// text); equal to the normalization upper bound so normalized MTLD stays
/// within [0, 100].
pub const MTLD_CAP: f64 = 200.0;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("invalid bounds: x_max ({x_max}) must exceed x_min ({x_min})")]
    InvalidBounds { x_min: f64, x_max: f64 },
    #[error("cannot read {path}: {reason}")]
    Unreadable { path: String, reason: String },
    #[error("malformed external scores line {line}: {reason}")]
    MalformedScores { line: usize, reason: String },
}

/// Per-metric min-max normalization bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricBounds {
    pub x_min: f64,
    pub x_max: f64,
}

impl MetricBounds {
    pub fn new(x_min: f64, x_max: f64) -> Result<Self, MetricsError> {
        if !(x_max > x_min) {
            return Err(MetricsError::InvalidBounds { x_min, x_max });
        }
        Ok(MetricBounds { x_min, x_max })
    }
}

/// Default bounds for every metric in the report.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundsSet {
    pub mtld: MetricBounds,
    pub nat: MetricBounds,
    pub coh: MetricBounds,
    pub und: MetricBounds,
    pub ind: MetricBounds,
    pub deb: MetricBounds,
}

impl Default for BoundsSet {
    fn default() -> Self {
        let unit = MetricBounds { x_min: 0.0, x_max: 1.0 };
        BoundsSet {
            mtld: MetricBounds { x_min: 0.0, x_max: 200.0 },
            nat: unit,
            coh: unit,
            und: unit,
            ind: MetricBounds { x_min: 0.0, x_max: 5.0 },
            deb: MetricBounds { x_min: 0.0, x_max: 3.0 },
        }
    }
}

/// One row of normalized metric values, each in [0, 100].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub mtld: f64,
    pub nat: f64,
    pub coh: f64,
    pub und: f64,
    pub ind: f64,
    pub deb: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompositeScore {
    pub s_uni: f64,
    pub s_rew: f64,
    pub s_avg: f64,
}

fn tokenize_for_mtld(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.chars()
                .filter(|c| !c.is_ascii_punctuation())
                .flat_map(char::to_lowercase)
                .collect::<String>()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

fn mtld_one_direction<F: Float>(tokens: &[&str], threshold: F) -> F {
    let cap = F::from(MTLD_CAP).unwrap();
    let one = F::one();
    let mut factors = F::zero();
    let mut seen: std::collections::BTreeSet<&str> = std::collections::BTreeSet::new();
    let mut factor_tokens = 0usize;
    let mut ttr = one;
    for token in tokens {
        seen.insert(token);
        factor_tokens += 1;
        ttr = F::from(seen.len()).unwrap() / F::from(factor_tokens).unwrap();
        if ttr < threshold {
            factors = factors + one;
            seen.clear();
            factor_tokens = 0;
            ttr = one;
        }
    }
    if factor_tokens > 0 {
        factors = factors + (one - ttr) / (one - threshold);
    }
    if factors == F::zero() {
        return cap;
    }
    F::from(tokens.len()).unwrap() / factors
}

/// Measure of Textual Lexical Diversity: mean factor length at TTR
/// threshold 0.72, averaged over a forward and a backward pass. Empty text
/// scores 0; a direction with no closed or partial factor contributes the
/// cap value 200.
pub fn mtld_with_threshold<F: Float>(text: &str, threshold: F) -> F {
    let owned = tokenize_for_mtld(text);
    if owned.is_empty() {
        return F::zero();
    }
    let tokens: Vec<&str> = owned.iter().map(String::as_str).collect();
    let forward = mtld_one_direction(&tokens, threshold);
    let reversed: Vec<&str> = tokens.iter().rev().cloned().collect();
    let backward = mtld_one_direction(&reversed, threshold);
    (forward + backward) / F::from(2.0).unwrap()
}

pub fn mtld(text: &str) -> f64 {
    mtld_with_threshold(text, MTLD_TTR_THRESHOLD)
}

/// Min-max normalization to [0, 100], clamped.
pub fn normalize<F: Float>(x: F, bounds: MetricBounds) -> F {
    let lo = F::from(bounds.x_min).unwrap();
    let hi = F::from(bounds.x_max).unwrap();
    let hundred = F::from(100.0).unwrap();
    let scaled = (x - lo) / (hi - lo) * hundred;
    scaled.max(F::zero()).min(hundred)
}

/// Composite scores from a row of normalized metrics: the unified
/// three-way language-quality mean, the two-way reward mean, and their
/// overall average with MTLD.
pub fn aggregate(row: &ScoreRow) -> CompositeScore {
    let s_uni = (row.nat + row.coh + row.und) / 3.0;
    let s_rew = (row.ind + row.deb) / 2.0;
    let s_avg = (row.mtld + s_uni + s_rew) / 3.0;
    CompositeScore { s_uni, s_rew, s_avg }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub sample_count: usize,
    pub avg_answer_tokens: u64,
    pub max_answer_tokens: u64,
}

/// Sample count and answer-length token statistics, using the same token
/// counter as the corpus chunker. The average rounds to nearest.
pub fn dataset_stats(records: &[QARecord], counter: &dyn TokenCounter) -> DatasetStats {
    if records.is_empty() {
        return DatasetStats {
            sample_count: 0,
            avg_answer_tokens: 0,
            max_answer_tokens: 0,
        };
    }
    let counts: Vec<u64> = records
        .iter()
        .map(|r| counter.count(&r.answer) as u64)
        .collect();
    let total: u64 = counts.iter().sum();
    let max = counts.iter().copied().max().unwrap_or(0);
    let avg = (total as f64 / counts.len() as f64).round() as u64;
    DatasetStats {
        sample_count: records.len(),
        avg_answer_tokens: avg,
        max_answer_tokens: max,
    }
}

/// Raw (pre-normalization) external scores for one record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RawExternalScores {
    pub nat: f64,
    pub coh: f64,
    pub und: f64,
    pub ind: f64,
    pub deb: f64,
}

/// Builds the normalized score row for a dataset: MTLD is computed here
/// over each record's question + answer and averaged; the five external
/// metrics are averaged raw and then normalized.
pub fn score_dataset(
    records: &[QARecord],
    external: &[RawExternalScores],
    bounds: &BoundsSet,
) -> (ScoreRow, CompositeScore) {
    let mean = |values: &[f64]| -> f64 {
        if values.is_empty() {
            0.0
        } else {
            values.iter().sum::<f64>() / values.len() as f64
        }
    };
    let mtld_values: Vec<f64> = records
        .iter()
        .map(|r| mtld(&format!("{} {}", r.question, r.answer)))
        .collect();
    let raw = |f: fn(&RawExternalScores) -> f64| -> f64 {
        mean(&external.iter().map(f).collect::<Vec<_>>())
    };
    let row = ScoreRow {
        mtld: normalize(mean(&mtld_values), bounds.mtld),
        nat: normalize(raw(|s| s.nat), bounds.nat),
        coh: normalize(raw(|s| s.coh), bounds.coh),
        und: normalize(raw(|s| s.und), bounds.und),
        ind: normalize(raw(|s| s.ind), bounds.ind),
        deb: normalize(raw(|s| s.deb), bounds.deb),
    };
    let composite = aggregate(&row);
    (row, composite)
}

/// Renders the score report: an aligned text table plus a CSV block.
pub fn render_report(label: &str, stats: &DatasetStats, row: &ScoreRow, composite: &CompositeScore) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<12} {:>8} {:>10} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7}\n",
        "dataset", "samples", "avg_tok", "mtld", "nat", "coh", "und", "ind", "deb", "s_uni", "s_rew", "s_avg"
    ));
    out.push_str(&format!(
        "{:<12} {:>8} {:>10} {:>7.1} {:>7.1} {:>7.1} {:>7.1} {:>7.1} {:>7.1} {:>7.1} {:>7.1} {:>7.1}\n",
        label,
        stats.sample_count,
        stats.avg_answer_tokens,
        row.mtld,
        row.nat,
        row.coh,
        row.und,
        row.ind,
        row.deb,
        composite.s_uni,
        composite.s_rew,
        composite.s_avg
    ));
    out.push('\n');
    out.push_str("dataset,samples,avg_tokens,mtld,nat,coh,und,ind,deb,s_uni,s_rew,s_avg\n");
    out.push_str(&format!(
        "{},{},{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4}\n",
        label,
        stats.sample_count,
        stats.avg_answer_tokens,
        row.mtld,
        row.nat,
        row.coh,
        row.und,
        row.ind,
        row.deb,
        composite.s_uni,
        composite.s_rew,
        composite.s_avg
    ));
    out
}
