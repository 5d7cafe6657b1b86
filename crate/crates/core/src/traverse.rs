//! K-hop subgraph extraction under budget, depth, direction and sampling
//! strategies, and planning of a full subgraph cover of the graph.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kg::{KnowledgeGraph, RelationKey};
use crate::token::TokenCounter;

#[derive(Debug, Error)]
pub enum TraverseError {
    #[error("seed relation ({0}, {1}) does not exist")]
    UnknownSeed(String, String),
    #[error("relation ({0}, {1}) has no loss; loss-based edge_sampling needs scored relations")]
    MissingLoss(String, String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QaForm {
    Atomic,
    Aggregated,
    MultiHop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpandMethod {
    MaxWidth,
    MaxTokens,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeSampling {
    MaxLoss,
    MinLoss,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IsolatedNodeStrategy {
    Add,
    Ignore,
}

/// The complete graph organization strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TraversalConfig {
    pub qa_form: QaForm,
    pub expand_method: ExpandMethod,
    pub bidirectional: bool,
    pub max_extra_edges: usize,
    pub max_tokens: usize,
    pub max_depth: usize,
    pub edge_sampling: EdgeSampling,
    pub isolated_node_strategy: IsolatedNodeStrategy,
    pub random_seed: u64,
}

impl Default for TraversalConfig {
    fn default() -> Self {
        TraversalConfig {
            qa_form: QaForm::Atomic,
            expand_method: ExpandMethod::MaxTokens,
            bidirectional: true,
            max_extra_edges: 5,
            max_tokens: 256,
            max_depth: 2,
            edge_sampling: EdgeSampling::MaxLoss,
            isolated_node_strategy: IsolatedNodeStrategy::Add,
            random_seed: 0,
        }
    }
}

/// What a subgraph was grown from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Seed {
    Edge(RelationKey),
    /// An isolated entity included under isolated_node_strategy = add.
    Node(String),
}

/// A connected edge set rooted at a seed edge (or a single isolated node).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subgraph {
    pub seed: Seed,
    /// Relation keys in insertion order; the seed edge comes first.
    pub edges: Vec<RelationKey>,
    pub nodes: BTreeSet<String>,
    /// Total token count of member entity and relation descriptions.
    pub pre_length: usize,
    /// Hop depth of each member edge; the seed is at depth 0.
    pub depths: Vec<(RelationKey, usize)>,
}

impl Subgraph {
    pub fn depth_of(&self, key: &RelationKey) -> Option<usize> {
        self.depths.iter().find(|(k, _)| k == key).map(|(_, d)| *d)
    }

    pub fn max_depth(&self) -> usize {
        self.depths.iter().map(|(_, d)| *d).max().unwrap_or(0)
    }
}

/// Token count of all member entity and relation descriptions.
pub fn pre_length_of(
    graph: &KnowledgeGraph,
    edges: &[RelationKey],
    nodes: &BTreeSet<String>,
    counter: &dyn TokenCounter,
) -> usize {
    let mut total = 0;
    for node in nodes {
        if let Some(entity) = graph.entities.get(node) {
            total += entity.descriptions.iter().map(|d| counter.count(d)).sum::<usize>();
        }
    }
    for key in edges {
        if let Some(relation) = graph.relations.get(key) {
            total += relation.descriptions.iter().map(|d| counter.count(d)).sum::<usize>();
        }
    }
    total
}

fn edge_loss(graph: &KnowledgeGraph, key: &RelationKey) -> Result<f64, TraverseError> {
    graph.relations[key]
        .loss
        .ok_or_else(|| TraverseError::MissingLoss(key.0.clone(), key.1.clone()))
}

fn edge_tokens(graph: &KnowledgeGraph, key: &RelationKey, counter: &dyn TokenCounter) -> usize {
    graph.relations[key]
        .descriptions
        .iter()
        .map(|d| counter.count(d))
        .sum()
}

fn node_tokens(graph: &KnowledgeGraph, name: &str, counter: &dyn TokenCounter) -> usize {
    graph
        .entities
        .get(name)
        .map(|e| e.descriptions.iter().map(|d| counter.count(d)).sum())
        .unwrap_or(0)
}

/// Picks the next candidate edge according to the sampling strategy.
/// Candidates are examined in lexicographic key order, which is also the
/// tie-break for the loss-based strategies.
fn select_candidate(
    graph: &KnowledgeGraph,
    candidates: &BTreeSet<RelationKey>,
    sampling: EdgeSampling,
    rng: &mut ChaCha8Rng,
) -> Result<RelationKey, TraverseError> {
    debug_assert!(!candidates.is_empty());
    match sampling {
        EdgeSampling::Random => {
            let ordered: Vec<&RelationKey> = candidates.iter().collect();
            Ok(ordered[rng.gen_range(0..ordered.len())].clone())
        }
        EdgeSampling::MaxLoss | EdgeSampling::MinLoss => {
            let mut best: Option<(f64, &RelationKey)> = None;
            for key in candidates {
                let loss = edge_loss(graph, key)?;
                let better = match &best {
                    None => true,
                    Some((best_loss, _)) => match sampling {
                        EdgeSampling::MaxLoss => loss > *best_loss,
                        EdgeSampling::MinLoss => loss < *best_loss,
                        EdgeSampling::Random => unreachable!(),
                    },
                };
                if better {
                    best = Some((loss, key));
                }
            }
            Ok(best.expect("non-empty").1.clone())
        }
    }
}

struct Grower<'a> {
    graph: &'a KnowledgeGraph,
    cfg: &'a TraversalConfig,
    counter: &'a dyn TokenCounter,
    /// Edges already consumed by earlier subgraphs; never expanded into.
    visited: &'a BTreeSet<RelationKey>,
    edges: Vec<RelationKey>,
    depths: Vec<(RelationKey, usize)>,
    nodes: BTreeSet<String>,
    node_depth: BTreeMap<String, usize>,
    candidates: BTreeSet<RelationKey>,
    pre_length: usize,
}

impl<'a> Grower<'a> {
    fn budget_met(&self) -> bool {
        match self.cfg.expand_method {
            ExpandMethod::MaxWidth => self.edges.len() >= 1 + self.cfg.max_extra_edges,
            ExpandMethod::MaxTokens => self.pre_length >= self.cfg.max_tokens,
        }
    }

    fn include_edge(&mut self, key: &RelationKey, depth: usize) {
        self.edges.push(key.clone());
        self.depths.push((key.clone(), depth));
        self.pre_length += edge_tokens(self.graph, key, self.counter);
        for endpoint in [&key.0, &key.1] {
            if self.nodes.insert(endpoint.clone()) {
                self.pre_length += node_tokens(self.graph, endpoint, self.counter);
            }
            let entry = self.node_depth.entry(endpoint.clone()).or_insert(depth);
            *entry = (*entry).min(depth);
        }
    }

    /// Adds unvisited edges adjacent to `node` whose candidate depth fits.
    fn add_candidates_around(&mut self, node: &str) {
        for adjacent in self.graph.adjacent_relations(node) {
            if self.visited.contains(&adjacent)
                || self.edges.contains(&adjacent)
                || self.candidates.contains(&adjacent)
            {
                continue;
            }
            let depth = self.candidate_depth(&adjacent);
            if depth <= self.cfg.max_depth {
                self.candidates.insert(adjacent);
            }
        }
    }

    /// 1 + min depth of the already-included endpoints of `key`.
    fn candidate_depth(&self, key: &RelationKey) -> usize {
        let included = [&key.0, &key.1]
            .into_iter()
            .filter_map(|n| self.node_depth.get(n.as_str()))
            .min()
            .copied()
            .expect("candidate touches the subgraph");
        included + 1
    }

    fn grow(mut self, seed: &RelationKey, rng: &mut ChaCha8Rng) -> Result<Subgraph, TraverseError> {
        self.include_edge(seed, 0);
        self.node_depth.insert(seed.0.clone(), 0);
        self.node_depth.insert(seed.1.clone(), 0);
        if !self.budget_met() {
            let frontier: Vec<String> = if self.cfg.bidirectional {
                vec![seed.0.clone(), seed.1.clone()]
            } else {
                // one-direction expansion grows from the tgt endpoint only
                vec![seed.1.clone()]
            };
            for node in &frontier {
                self.add_candidates_around(node);
            }
            while !self.candidates.is_empty() {
                let picked =
                    select_candidate(self.graph, &self.candidates, self.cfg.edge_sampling, rng)?;
                self.candidates.remove(&picked);
                let depth = self.candidate_depth(&picked);
                self.include_edge(&picked, depth);
                if self.budget_met() {
                    break;
                }
                for endpoint in [picked.0.clone(), picked.1.clone()] {
                    self.add_candidates_around(&endpoint);
                }
            }
        }
        Ok(Subgraph {
            seed: Seed::Edge(seed.clone()),
            edges: self.edges,
            nodes: self.nodes,
            pre_length: self.pre_length,
            depths: self.depths,
        })
    }
}

fn grow_from(
    graph: &KnowledgeGraph,
    seed: &RelationKey,
    cfg: &TraversalConfig,
    counter: &dyn TokenCounter,
    visited: &BTreeSet<RelationKey>,
    rng: &mut ChaCha8Rng,
) -> Result<Subgraph, TraverseError> {
    if !graph.relations.contains_key(seed) {
        return Err(TraverseError::UnknownSeed(seed.0.clone(), seed.1.clone()));
    }
    let grower = Grower {
        graph,
        cfg,
        counter,
        visited,
        edges: Vec::new(),
        depths: Vec::new(),
        nodes: BTreeSet::new(),
        node_depth: BTreeMap::new(),
        candidates: BTreeSet::new(),
        pre_length: 0,
    };
    grower.grow(seed, rng)
}

/// Extracts the k-hop subgraph around one seed edge.
pub fn extract_khop(
    graph: &KnowledgeGraph,
    seed: &RelationKey,
    cfg: &TraversalConfig,
    counter: &dyn TokenCounter,
) -> Result<Subgraph, TraverseError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.random_seed);
    grow_from(graph, seed, cfg, counter, &BTreeSet::new(), &mut rng)
}

fn seed_order(
    graph: &KnowledgeGraph,
    cfg: &TraversalConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<RelationKey>, TraverseError> {
    let mut keys: Vec<RelationKey> = graph.relations.keys().cloned().collect();
    match cfg.edge_sampling {
        EdgeSampling::Random => {
            // Fisher-Yates with the shared seeded generator
            for i in (1..keys.len()).rev() {
                let j = rng.gen_range(0..=i);
                keys.swap(i, j);
            }
        }
        EdgeSampling::MaxLoss | EdgeSampling::MinLoss => {
            let mut scored = Vec::with_capacity(keys.len());
            for key in keys {
                let loss = edge_loss(graph, &key)?;
                scored.push((key, loss));
            }
            scored.sort_by(|a, b| {
                let ord = a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal);
                let ord = match cfg.edge_sampling {
                    EdgeSampling::MaxLoss => ord.reverse(),
                    _ => ord,
                };
                ord.then_with(|| a.0.cmp(&b.0))
            });
            keys = scored.into_iter().map(|(k, _)| k).collect();
        }
    }
    Ok(keys)
}

/// Partitions the graph into subgraphs: seeds are iterated in the order
/// induced by `edge_sampling`, each relation lands in exactly one subgraph,
/// and isolated nodes become single-node subgraphs under the `add` strategy
/// in atomic form.
pub fn plan_subgraphs(
    graph: &KnowledgeGraph,
    cfg: &TraversalConfig,
    counter: &dyn TokenCounter,
) -> Result<Vec<Subgraph>, TraverseError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.random_seed);
    let seeds = seed_order(graph, cfg, &mut rng)?;
    let mut visited: BTreeSet<RelationKey> = BTreeSet::new();
    let mut subgraphs = Vec::new();
    for seed in seeds {
        if visited.contains(&seed) {
            continue;
        }
        let subgraph = grow_from(graph, &seed, cfg, counter, &visited, &mut rng)?;
        visited.extend(subgraph.edges.iter().cloned());
        subgraphs.push(subgraph);
    }
    if cfg.isolated_node_strategy == IsolatedNodeStrategy::Add && cfg.qa_form == QaForm::Atomic {
        for name in graph.isolated_entities() {
            let nodes: BTreeSet<String> = [name.to_string()].into();
            let pre_length = pre_length_of(graph, &[], &nodes, counter);
            subgraphs.push(Subgraph {
                seed: Seed::Node(name.to_string()),
                edges: Vec::new(),
                nodes,
                pre_length,
                depths: Vec::new(),
            });
        }
    }
    Ok(subgraphs)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::kg::{Entity, Relation};
    use crate::token::DefaultTokenCounter;

    pub(crate) fn build_graph(edges: &[(&str, &str, f64, &str)]) -> KnowledgeGraph {
        let mut g = KnowledgeGraph::new();
        for (src, tgt, loss, desc) in edges {
            for raw in [src, tgt] {
                let name = crate::kg::canonical_name(raw);
                g.entities.entry(name.clone()).or_insert_with(|| Entity {
                    name: name.clone(),
                    entity_type: "t".into(),
                    descriptions: vec![format!("{name} desc")],
                    source_chunks: ["c".to_string()].into(),
                    original_descriptions: vec![],
                });
            }
            let key = crate::kg::relation_key(src, tgt);
            g.relations.insert(
                key.clone(),
                Relation {
                    src: key.0.clone(),
                    tgt: key.1.clone(),
                    descriptions: vec![desc.to_string()],
                    source_chunks: ["c".to_string()].into(),
                    loss: Some(*loss),
                    original_descriptions: vec![],
                },
            );
        }
        g
    }

    fn width_cfg(max_extra: usize, depth: usize) -> TraversalConfig {
        TraversalConfig {
            expand_method: ExpandMethod::MaxWidth,
            max_extra_edges: max_extra,
            max_depth: depth,
            ..TraversalConfig::default()
        }
    }

    #[test]
    fn path_graph_one_hop_both_sides() {
        let g = build_graph(&[
            ("A", "B", 0.1, "ab"),
            ("B", "C", 0.2, "bc"),
            ("C", "D", 0.3, "cd"),
        ]);
        let seed = crate::kg::relation_key("B", "C");
        let sub = extract_khop(&g, &seed, &width_cfg(10, 1), &DefaultTokenCounter).unwrap();
        let edges: BTreeSet<_> = sub.edges.iter().cloned().collect();
        let expected: BTreeSet<_> = [
            crate::kg::relation_key("B", "C"),
            crate::kg::relation_key("A", "B"),
            crate::kg::relation_key("C", "D"),
        ]
        .into();
        assert_eq!(edges, expected);
        assert_eq!(sub.depth_of(&seed), Some(0));
        assert_eq!(sub.max_depth(), 1);
    }

    #[test]
    fn budget_one_edge_is_seed_only() {
        let g = build_graph(&[("A", "B", 0.1, "ab"), ("B", "C", 0.2, "bc")]);
        let seed = crate::kg::relation_key("A", "B");
        let sub = extract_khop(&g, &seed, &width_cfg(0, 2), &DefaultTokenCounter).unwrap();
        assert_eq!(sub.edges, vec![seed]);
    }

    #[test]
    fn star_graph_takes_highest_loss_spokes() {
        let g = build_graph(&[
            ("HUB", "S1", 0.1, "s1"),
            ("HUB", "S2", 0.9, "s2"),
            ("HUB", "S3", 0.5, "s3"),
            ("HUB", "S4", 0.7, "s4"),
        ]);
        let seed = crate::kg::relation_key("HUB", "S1");
        let sub = extract_khop(&g, &seed, &width_cfg(2, 2), &DefaultTokenCounter).unwrap();
        let edges: BTreeSet<_> = sub.edges.iter().cloned().collect();
        let expected: BTreeSet<_> = [
            crate::kg::relation_key("HUB", "S1"),
            crate::kg::relation_key("HUB", "S2"),
            crate::kg::relation_key("HUB", "S4"),
        ]
        .into();
        assert_eq!(edges, expected);
    }

    #[test]
    fn unidirectional_expands_from_tgt_only() {
        // stored keys order endpoints lexicographically: seed (b, c),
        // tgt = "c", so only (c, d) may join at depth 1.
        let g = build_graph(&[
            ("a", "b", 0.1, "ab"),
            ("b", "c", 0.2, "bc"),
            ("c", "d", 0.3, "cd"),
        ]);
        let seed = crate::kg::relation_key("b", "c");
        let cfg = TraversalConfig {
            bidirectional: false,
            ..width_cfg(10, 1)
        };
        let sub = extract_khop(&g, &seed, &cfg, &DefaultTokenCounter).unwrap();
        let edges: BTreeSet<_> = sub.edges.iter().cloned().collect();
        let expected: BTreeSet<_> =
            [crate::kg::relation_key("b", "c"), crate::kg::relation_key("c", "d")].into();
        assert_eq!(edges, expected);
    }

    #[test]
    fn missing_loss_is_configuration_error() {
        let mut g = build_graph(&[("A", "B", 0.1, "ab"), ("B", "C", 0.2, "bc")]);
        g.relations
            .get_mut(&crate::kg::relation_key("B", "C"))
            .unwrap()
            .loss = None;
        let seed = crate::kg::relation_key("A", "B");
        let err = extract_khop(&g, &seed, &width_cfg(5, 2), &DefaultTokenCounter).unwrap_err();
        assert!(matches!(err, TraverseError::MissingLoss(..)));
    }

    #[test]
    fn max_tokens_allows_one_overshoot() {
        let g = build_graph(&[
            ("A", "B", 0.3, "one two three four five"),
            ("B", "C", 0.2, "six seven eight nine ten"),
            ("C", "D", 0.1, "eleven twelve"),
        ]);
        let seed = crate::kg::relation_key("A", "B");
        let cfg = TraversalConfig {
            expand_method: ExpandMethod::MaxTokens,
            max_tokens: 10,
            max_depth: 3,
            ..TraversalConfig::default()
        };
        let sub = extract_khop(&g, &seed, &cfg, &DefaultTokenCounter).unwrap();
        // all but the last edge must be under budget
        let mut running = 0;
        let mut nodes: BTreeSet<String> = BTreeSet::new();
        for (i, key) in sub.edges.iter().enumerate() {
            running += edge_tokens(&g, key, &DefaultTokenCounter);
            for n in [&key.0, &key.1] {
                if nodes.insert(n.clone()) {
                    running += node_tokens(&g, n, &DefaultTokenCounter);
                }
            }
            if i + 1 < sub.edges.len() {
                assert!(running < cfg.max_tokens);
            }
        }
        assert_eq!(running, sub.pre_length);
        assert!(sub.pre_length >= cfg.max_tokens);
    }

    #[test]
    fn triangle_budget_one_gives_three_subgraphs() {
        let g = build_graph(&[
            ("A", "B", 0.1, "ab"),
            ("B", "C", 0.2, "bc"),
            ("A", "C", 0.3, "ac"),
        ]);
        let cfg = width_cfg(0, 2);
        let subs = plan_subgraphs(&g, &cfg, &DefaultTokenCounter).unwrap();
        assert_eq!(subs.len(), 3);
        for s in &subs {
            assert_eq!(s.edges.len(), 1);
        }
        // max_loss ordering: first seed is the highest-loss edge
        assert_eq!(subs[0].edges[0], crate::kg::relation_key("A", "C"));
    }

    #[test]
    fn isolated_nodes_become_subgraphs_when_added() {
        let mut g = build_graph(&[("A", "B", 0.1, "ab")]);
        for name in ["lonely1", "lonely2"] {
            g.entities.insert(
                name.to_string(),
                Entity {
                    name: name.to_string(),
                    entity_type: "t".into(),
                    descriptions: vec![format!("{name} desc")],
                    source_chunks: ["c".to_string()].into(),
                    original_descriptions: vec![],
                },
            );
        }
        let cfg = width_cfg(0, 2); // atomic + add by default
        let subs = plan_subgraphs(&g, &cfg, &DefaultTokenCounter).unwrap();
        let node_subs: Vec<_> = subs.iter().filter(|s| s.edges.is_empty()).collect();
        assert_eq!(node_subs.len(), 2);

        let cfg_ignore = TraversalConfig {
            isolated_node_strategy: IsolatedNodeStrategy::Ignore,
            ..cfg
        };
        let subs = plan_subgraphs(&g, &cfg_ignore, &DefaultTokenCounter).unwrap();
        assert!(subs.iter().all(|s| !s.edges.is_empty()));
    }

    #[test]
    fn pre_length_is_additive() {
        let g = build_graph(&[("A", "B", 0.1, "one two three")]);
        // entities "A desc"/"B desc" are 2 tokens each; relation 3 tokens
        let nodes: BTreeSet<String> = ["a".to_string(), "b".to_string()].into();
        let edges = [crate::kg::relation_key("A", "B")];
        assert_eq!(pre_length_of(&g, &edges, &nodes, &DefaultTokenCounter), 7);
        assert_eq!(
            pre_length_of(&g, &[], &BTreeSet::new(), &DefaultTokenCounter),
            0
        );
    }

    #[test]
    fn determinism_with_random_sampling() {
        let g = build_graph(&[
            ("A", "B", 0.1, "ab"),
            ("B", "C", 0.2, "bc"),
            ("C", "D", 0.3, "cd"),
            ("A", "D", 0.4, "ad"),
            ("B", "D", 0.5, "bd"),
        ]);
        let cfg = TraversalConfig {
            edge_sampling: EdgeSampling::Random,
            random_seed: 42,
            ..width_cfg(2, 2)
        };
        let a = plan_subgraphs(&g, &cfg, &DefaultTokenCounter).unwrap();
        let b = plan_subgraphs(&g, &cfg, &DefaultTokenCounter).unwrap();
        assert_eq!(a, b);
    }
}
