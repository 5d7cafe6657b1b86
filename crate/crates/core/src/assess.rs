//! Comprehension assessment: paraphrase/negation probing of the trainee
//! model, confidence and cross-entropy loss per relation, and loss-ranked
//! selection.

use std::collections::BTreeMap;

use log::warn;
use num_traits::Float;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kg::{KnowledgeGraph, RelationKey};
use crate::llm::{GenerationParams, LlmClient, LlmError, Message};
use crate::template::{PromptSet, TemplateError};

#[derive(Debug, Error)]
pub enum AssessError {
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("probe response carried no logprobs; endpoint cannot assess")]
    NoLogprobs,
    #[error("expected {expected} positive and {expected} negative probes, got {pos}/{neg}")]
    MismatchedPolarities {
        expected: usize,
        pos: usize,
        neg: usize,
    },
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("relation ({0}, {1}) has no comprehension loss")]
    MissingLoss(String, String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    Positive,
    Negative,
}

/// One paraphrase (positive) or negation (negative) of a relation
/// description.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Statement {
    pub text: String,
    pub polarity: Polarity,
    pub parent_relation: RelationKey,
    pub index: usize,
}

/// Probed next-token probabilities for one statement.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub statement: Statement,
    pub p_yes: f64,
    pub p_no: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComprehensionScore {
    pub relation: RelationKey,
    pub confidence: f64,
    pub loss: f64,
    pub n: usize,
}

/// Token matching and probability flooring options for probing.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeOptions {
    pub epsilon: f64,
    pub yes_tokens: Vec<String>,
    pub no_tokens: Vec<String>,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        ProbeOptions {
            epsilon: 1e-6,
            yes_tokens: vec!["yes".into()],
            no_tokens: vec!["no".into()],
        }
    }
}

/// Confidence and cross-entropy loss from probed probabilities.
///
/// `pos_yes` holds P(yes) for the positive statements, `neg_no` holds
/// P(no) for the negations. Probabilities are clamped to `[epsilon, 1]`
/// before the logarithm.
pub fn confidence_and_loss<F: Float>(pos_yes: &[F], neg_no: &[F], epsilon: F) -> (F, F) {
    let count = F::from(pos_yes.len() + neg_no.len()).unwrap();
    let clamp = |p: F| p.max(epsilon).min(F::one());
    let mut conf_sum = F::zero();
    let mut loss_sum = F::zero();
    for &p in pos_yes.iter().chain(neg_no) {
        let p = clamp(p);
        conf_sum = conf_sum + p;
        loss_sum = loss_sum + p.ln();
    }
    (conf_sum / count, -(loss_sum / count))
}

/// Scores one relation from exactly `n` positive and `n` negative probes.
pub fn score_relation(probes: &[ProbeResult], epsilon: f64) -> Result<ComprehensionScore, AssessError> {
    let pos: Vec<f64> = probes
        .iter()
        .filter(|p| p.statement.polarity == Polarity::Positive)
        .map(|p| p.p_yes)
        .collect();
    let neg: Vec<f64> = probes
        .iter()
        .filter(|p| p.statement.polarity == Polarity::Negative)
        .map(|p| p.p_no)
        .collect();
    if pos.len() != neg.len() || pos.is_empty() {
        return Err(AssessError::MismatchedPolarities {
            expected: probes.len() / 2,
            pos: pos.len(),
            neg: neg.len(),
        });
    }
    let (confidence, loss) = confidence_and_loss(&pos, &neg, epsilon);
    Ok(ComprehensionScore {
        relation: probes[0].statement.parent_relation.clone(),
        confidence,
        loss,
        n: pos.len(),
    })
}

fn parse_statement_lines(text: &str) -> Vec<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| l.trim_start_matches(|c: char| c.is_ascii_digit() || c == '.' || c == ')' || c == '-')
            .trim()
            .to_string())
        .filter(|l| !l.is_empty())
        .collect()
}

fn rephrase_one_polarity(
    relation: &RelationKey,
    description: &str,
    polarity: Polarity,
    n: usize,
    synthesizer: &LlmClient,
    prompts: &PromptSet,
) -> Result<Vec<Statement>, AssessError> {
    let template = match polarity {
        Polarity::Positive => &prompts.rephrase_literal,
        Polarity::Negative => &prompts.rephrase_opposite,
    };
    let mut bindings = BTreeMap::new();
    bindings.insert("statement", description.to_string());
    bindings.insert("n", n.to_string());
    let prompt = template.render(&bindings)?;
    let params = GenerationParams::rephrase();

    let mut lines = Vec::new();
    for attempt in 0..2 {
        let result = synthesizer.complete(&[Message::user(prompt.clone())], &params)?;
        for line in parse_statement_lines(&result.text) {
            if !lines.contains(&line) {
                lines.push(line);
            }
        }
        if lines.len() >= n {
            break;
        }
        if attempt == 1 {
            warn!(
                "only {} distinct statements for ({}, {}) {polarity:?}; accepting duplicates",
                lines.len(),
                relation.0,
                relation.1
            );
        }
    }
    if lines.is_empty() {
        // last resort: probe the raw description / a generic negation
        lines.push(description.to_string());
    }
    Ok((0..n)
        .map(|i| Statement {
            text: lines[i % lines.len()].clone(),
            polarity,
            parent_relation: relation.clone(),
            index: i + 1,
        })
        .collect())
}

/// Generates `n` paraphrases and `n` negations of a relation description
/// with the synthesizer at temperature 1.
pub fn rephrase_statements(
    relation: &RelationKey,
    description: &str,
    n: usize,
    synthesizer: &LlmClient,
    prompts: &PromptSet,
) -> Result<Vec<Statement>, AssessError> {
    assert!(n > 0, "n must be positive");
    assert!(!description.is_empty(), "relation needs a description");
    let mut statements =
        rephrase_one_polarity(relation, description, Polarity::Positive, n, synthesizer, prompts)?;
    statements.extend(rephrase_one_polarity(
        relation,
        description,
        Polarity::Negative,
        n,
        synthesizer,
        prompts,
    )?);
    Ok(statements)
}

fn token_probability(
    tops: &[(String, f64)],
    accepted: &[String],
    epsilon: f64,
) -> f64 {
    for (token, logprob) in tops {
        let folded = token.trim().to_lowercase();
        if accepted.iter().any(|t| t.to_lowercase() == folded) {
            return logprob.exp().clamp(epsilon, 1.0);
        }
    }
    epsilon
}

/// Issues the yes/no judgment prompt for one statement and extracts
/// P(yes) / P(no) from the first token's top logprobs. A token absent from
/// the top list yields the floor epsilon.
pub fn probe_statement(
    statement: &Statement,
    trainee: &LlmClient,
    prompts: &PromptSet,
    options: &ProbeOptions,
) -> Result<ProbeResult, AssessError> {
    let mut bindings = BTreeMap::new();
    bindings.insert("statement", statement.text.clone());
    let prompt = prompts.statement_judgement.render(&bindings)?;
    let result = trainee.complete(&[Message::user(prompt)], &GenerationParams::trainee_probe())?;
    if result.first_token_top_logprobs.is_empty() {
        return Err(AssessError::NoLogprobs);
    }
    Ok(ProbeResult {
        statement: statement.clone(),
        p_yes: token_probability(&result.first_token_top_logprobs, &options.yes_tokens, options.epsilon),
        p_no: token_probability(&result.first_token_top_logprobs, &options.no_tokens, options.epsilon),
    })
}

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
pub struct AssessStats {
    pub scored: usize,
    pub skipped: usize,
}

/// Assesses every relation in the graph, writing comprehension losses back
/// into it. Relations whose rephrasing or probing fails are skipped and
/// their loss left unset.
pub fn assess_graph(
    graph: &mut KnowledgeGraph,
    synthesizer: &LlmClient,
    trainee: &LlmClient,
    n: usize,
    options: &ProbeOptions,
    prompts: &PromptSet,
) -> AssessStats {
    let keys: Vec<RelationKey> = graph.relations.keys().cloned().collect();
    let scores: Vec<(RelationKey, Option<f64>)> = keys
        .par_iter()
        .map(|key| {
            let description = graph.relations[key].descriptions.join(" ");
            let outcome = rephrase_statements(key, &description, n, synthesizer, prompts)
                .and_then(|statements| {
                    let probes: Result<Vec<_>, _> = statements
                        .par_iter()
                        .map(|s| probe_statement(s, trainee, prompts, options))
                        .collect();
                    probes
                })
                .and_then(|probes| score_relation(&probes, options.epsilon));
            match outcome {
                Ok(score) => (key.clone(), Some(score.loss)),
                Err(err) => {
                    warn!("assessment skipped for ({}, {}): {err}", key.0, key.1);
                    (key.clone(), None)
                }
            }
        })
        .collect();

    let mut stats = AssessStats::default();
    for (key, loss) in scores {
        match loss {
            Some(loss) => {
                graph.relations.get_mut(&key).expect("present").loss = Some(loss);
                stats.scored += 1;
            }
            None => stats.skipped += 1,
        }
    }
    stats
}

/// Fixed-width histogram of comprehension losses over [0, max loss].
pub fn loss_histogram(graph: &KnowledgeGraph, bins: usize) -> Vec<(f64, f64, usize)> {
    assert!(bins > 0);
    let losses: Vec<f64> = graph.relations.values().filter_map(|r| r.loss).collect();
    if losses.is_empty() {
        return Vec::new();
    }
    let max = losses.iter().cloned().fold(0.0_f64, f64::max);
    let span = if max > 0.0 { max } else { 1.0 };
    let width = span / bins as f64;
    let mut counts = vec![0usize; bins];
    for loss in &losses {
        let idx = ((loss / width) as usize).min(bins - 1);
        counts[idx] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(i, c)| (i as f64 * width, (i + 1) as f64 * width, c))
        .collect()
}

/// Which end of the loss-descending order to take.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionEnd {
    Top,
    Bottom,
}

/// Sorts relations by descending loss (ties by lexicographic key) and
/// returns the first or last `floor(fraction * N)` of them.
pub fn select_by_loss(
    graph: &KnowledgeGraph,
    fraction: f64,
    end: SelectionEnd,
) -> Result<Vec<RelationKey>, AssessError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(AssessError::Argument(format!(
            "fraction must be in (0, 1], got {fraction}"
        )));
    }
    let mut scored: Vec<(RelationKey, f64)> = Vec::with_capacity(graph.relations.len());
    for (key, relation) in &graph.relations {
        let loss = relation
            .loss
            .ok_or_else(|| AssessError::MissingLoss(key.0.clone(), key.1.clone()))?;
        scored.push((key.clone(), loss));
    }
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.0.cmp(&b.0))
    });
    let k = (fraction * scored.len() as f64).floor() as usize;
    let keys: Vec<RelationKey> = match end {
        SelectionEnd::Top => scored[..k].iter().map(|(k, _)| k.clone()).collect(),
        SelectionEnd::Bottom => scored[scored.len() - k..].iter().map(|(k, _)| k.clone()).collect(),
    };
    Ok(keys)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::{Entity, Relation};
    use proptest::prelude::*;

    fn probe(polarity: Polarity, p_yes: f64, p_no: f64) -> ProbeResult {
        ProbeResult {
            statement: Statement {
                text: "s".into(),
                polarity,
                parent_relation: ("a".into(), "b".into()),
                index: 1,
            },
            p_yes,
            p_no,
        }
    }

    #[test]
    fn perfect_probes_confidence_one_loss_zero() {
        let probes = [probe(Polarity::Positive, 1.0, 0.0), probe(Polarity::Negative, 0.0, 1.0)];
        let s = score_relation(&probes, 1e-6).unwrap();
        assert_eq!(s.confidence, 1.0);
        assert_eq!(s.loss, 0.0);
    }

    #[test]
    fn uniform_probes_loss_ln2() {
        let probes = [probe(Polarity::Positive, 0.5, 0.5), probe(Polarity::Negative, 0.5, 0.5)];
        let s = score_relation(&probes, 1e-6).unwrap();
        assert!((s.confidence - 0.5).abs() < 1e-12);
        assert!((s.loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn hand_case_09_08() {
        let probes = [probe(Polarity::Positive, 0.9, 0.1), probe(Polarity::Negative, 0.2, 0.8)];
        let s = score_relation(&probes, 1e-6).unwrap();
        assert!((s.confidence - 0.85).abs() < 1e-12);
        let expected = -(0.9_f64.ln() + 0.8_f64.ln()) / 2.0;
        assert!((s.loss - expected).abs() < 1e-12);
        assert!((s.loss - 0.164252).abs() < 1e-6);
    }

    #[test]
    fn mismatched_polarities_rejected() {
        let probes = [probe(Polarity::Positive, 0.5, 0.5)];
        assert!(matches!(
            score_relation(&probes, 1e-6),
            Err(AssessError::MismatchedPolarities { .. })
        ));
    }

    #[test]
    fn generic_kernel_works_in_f32() {
        let (c, l) = confidence_and_loss::<f32>(&[0.5], &[0.5], 1e-6);
        assert!((c - 0.5).abs() < 1e-6);
        assert!((l - std::f32::consts::LN_2).abs() < 1e-6);
    }

    #[test]
    fn token_probability_rules() {
        let eps = 1e-6;
        let yes = vec!["yes".to_string()];
        // exact
        assert!((token_probability(&[("yes".into(), 0.9_f64.ln())], &yes, eps) - 0.9).abs() < 1e-12);
        // case fold + trim
        assert!((token_probability(&[(" Yes".into(), 0.7_f64.ln())], &yes, eps) - 0.7).abs() < 1e-12);
        // missing -> floor
        assert_eq!(token_probability(&[("maybe".into(), -0.1)], &yes, eps), eps);
        // first match wins
        let tops = [("Yes".into(), 0.6_f64.ln()), ("yes".into(), 0.2_f64.ln())];
        assert!((token_probability(&tops, &yes, eps) - 0.6).abs() < 1e-12);
    }

    fn scored_graph(losses: &[f64]) -> KnowledgeGraph {
        let mut g = KnowledgeGraph::new();
        for (i, &loss) in losses.iter().enumerate() {
            let a = format!("n{i:03}a");
            let b = format!("n{i:03}b");
            g.entities.insert(a.clone(), Entity {
                name: a.clone(),
                entity_type: "t".into(),
                descriptions: vec!["d".into()],
                source_chunks: ["c".to_string()].into(),
                original_descriptions: vec![],
            });
            g.entities.insert(b.clone(), Entity {
                name: b.clone(),
                entity_type: "t".into(),
                descriptions: vec!["d".into()],
                source_chunks: ["c".to_string()].into(),
                original_descriptions: vec![],
            });
            g.relations.insert((a.clone(), b.clone()), Relation {
                src: a,
                tgt: b,
                descriptions: vec!["d".into()],
                source_chunks: ["c".to_string()].into(),
                loss: Some(loss),
                original_descriptions: vec![],
            });
        }
        g
    }

    #[test]
    fn histogram_binning() {
        let g = scored_graph(&[0.1, 0.1, 0.9]);
        // 2 bins over [0, 0.9]
        let hist = loss_histogram(&g, 2);
        let counts: Vec<usize> = hist.iter().map(|(_, _, c)| *c).collect();
        assert_eq!(counts, vec![2, 1]);
    }

    #[test]
    fn histogram_all_zero_first_bin() {
        let g = scored_graph(&[0.0; 7]);
        let hist = loss_histogram(&g, 10);
        assert_eq!(hist[0].2, 7);
        assert_eq!(hist.iter().map(|(_, _, c)| c).sum::<usize>(), 7);
    }

    #[test]
    fn select_top_bottom() {
        let losses: Vec<f64> = (0..10).map(|i| i as f64 / 10.0).collect();
        let g = scored_graph(&losses);
        let top = select_by_loss(&g, 0.3, SelectionEnd::Top).unwrap();
        let bottom = select_by_loss(&g, 0.3, SelectionEnd::Bottom).unwrap();
        assert_eq!(top.len(), 3);
        assert_eq!(bottom.len(), 3);
        assert!(top.iter().all(|k| !bottom.contains(k)));
        let all = select_by_loss(&g, 1.0, SelectionEnd::Top).unwrap();
        assert_eq!(all.len(), 10);
        // loss-descending: first selected has the highest loss
        assert_eq!(g.relations[&all[0]].loss, Some(0.9));
        assert!(select_by_loss(&g, 1.5, SelectionEnd::Top).is_err());
        assert!(select_by_loss(&g, 0.0, SelectionEnd::Top).is_err());
    }

    proptest! {
        #[test]
        fn loss_monotone_decreasing_in_each_probability(
            mut pos in prop::collection::vec(0.01f64..1.0, 1..5),
            neg in prop::collection::vec(0.01f64..1.0, 1..5),
            idx in 0usize..5,
            bump in 0.001f64..0.2,
        ) {
            let idx = idx % pos.len();
            let (_, loss_before) = confidence_and_loss(&pos, &neg, 1e-6);
            pos[idx] = (pos[idx] + bump).min(1.0);
            let (_, loss_after) = confidence_and_loss(&pos, &neg, 1e-6);
            prop_assert!(loss_after <= loss_before + 1e-12);
        }

        #[test]
        fn scale_bounds_hold(
            pos in prop::collection::vec(0.0f64..=1.0, 1..5),
            neg_extra in prop::collection::vec(0.0f64..=1.0, 0..4),
        ) {
            let mut neg = pos.clone();
            neg.extend(neg_extra);
            neg.truncate(pos.len());
            let eps = 1e-6;
            let (c, l) = confidence_and_loss(&pos, &neg, eps);
            prop_assert!(c >= eps && c <= 1.0);
            prop_assert!(l >= 0.0 && l <= -(eps.ln()) + 1e-9);
        }

        #[test]
        fn selection_stable_and_disjoint(losses in prop::collection::vec(0.0f64..5.0, 1..40)) {
            let g = scored_graph(&losses);
            let top1 = select_by_loss(&g, 0.3, SelectionEnd::Top).unwrap();
            let top2 = select_by_loss(&g, 0.3, SelectionEnd::Top).unwrap();
            prop_assert_eq!(&top1, &top2);
            let bottom = select_by_loss(&g, 0.3, SelectionEnd::Bottom).unwrap();
            prop_assert!(top1.iter().all(|k| !bottom.contains(k)));
        }

        #[test]
        fn histogram_counts_sum(losses in prop::collection::vec(0.0f64..3.0, 1..50), bins in 1usize..20) {
            let g = scored_graph(&losses);
            let hist = loss_histogram(&g, bins);
            prop_assert_eq!(hist.iter().map(|(_, _, c)| c).sum::<usize>(), losses.len());
        }

        #[test]
        fn loss_zero_iff_all_probabilities_one(
            pos in prop::collection::vec(0.01f64..=1.0, 1..4),
            neg in prop::collection::vec(0.01f64..=1.0, 1..4),
        ) {
            let (_, l) = confidence_and_loss(&pos, &neg, 1e-6);
            let all_one = pos.iter().chain(&neg).all(|&p| p == 1.0);
            prop_assert_eq!(l == 0.0, all_one);
        }
    }
}
