//! Knowledge graph: typed entities, described relations, merging and
//! versioned JSON persistence.

pub mod extract;

pub use extract::{extract_from_chunk, summarize_graph, summarize_item, ExtractionOutcome};

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm::LlmError;
use crate::template::TemplateError;

pub const GRAPH_SCHEMA_VERSION: u32 = 1;

/// Entity type used for placeholder endpoints and off-list types.
pub const UNKNOWN_TYPE: &str = "UNKNOWN";

#[derive(Debug, Error)]
pub enum KgError {
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("completely unparseable extraction response: {raw:?}")]
    Unparseable { raw: String },
    #[error("graph file {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("graph file {path}: {source}")]
    Schema {
        path: String,
        source: serde_json::Error,
    },
    #[error("graph file {path}: unsupported version {found} (expected {expected})")]
    Version {
        path: String,
        found: u32,
        expected: u32,
    },
    #[error("graph file {path}: relation ({src}, {tgt}) references missing entity {missing:?}")]
    DanglingEndpoint {
        path: String,
        src: String,
        tgt: String,
        missing: String,
    },
}

/// Canonical entity key: case-folded, internal whitespace collapsed.
pub fn canonical_name(raw: &str) -> String {
    raw.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    pub name: String,
    pub entity_type: String,
    pub descriptions: Vec<String>,
    pub source_chunks: BTreeSet<String>,
    /// Pre-summarization descriptions, kept for audit.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub original_descriptions: Vec<String>,
}

/// Undirected relation key with endpoints in lexicographic order.
pub type RelationKey = (String, String);

pub fn relation_key(a: &str, b: &str) -> RelationKey {
    let (a, b) = (canonical_name(a), canonical_name(b));
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Relation {
    pub src: String,
    pub tgt: String,
    pub descriptions: Vec<String>,
    pub source_chunks: BTreeSet<String>,
    /// Comprehension loss, filled by the assessment stage.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub original_descriptions: Vec<String>,
}

impl Relation {
    pub fn key(&self) -> RelationKey {
        (self.src.clone(), self.tgt.clone())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeGraph {
    pub entities: BTreeMap<String, Entity>,
    #[serde(with = "relation_map")]
    pub relations: BTreeMap<RelationKey, Relation>,
    /// Entity-type disagreements observed while merging.
    #[serde(default)]
    pub type_conflicts: u64,
}

// Relations serialize as a list; the map key is derivable from (src, tgt).
mod relation_map {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(
        map: &BTreeMap<RelationKey, Relation>,
        ser: S,
    ) -> Result<S::Ok, S::Error> {
        serde::Serialize::serialize(&map.values().collect::<Vec<_>>(), ser)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        de: D,
    ) -> Result<BTreeMap<RelationKey, Relation>, D::Error> {
        let list: Vec<Relation> = serde::Deserialize::deserialize(de)?;
        Ok(list.into_iter().map(|r| (r.key(), r)).collect())
    }
}

impl KnowledgeGraph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Unifies new entities and relations into the graph. Equal canonical
    /// names merge: descriptions appended with exact deduplication, source
    /// chunks unioned, the first-seen entity type kept (disagreements
    /// counted). Relations merge under undirected identity; missing
    /// endpoints get placeholder entities so referential integrity holds.
    pub fn merge(&mut self, new_entities: Vec<Entity>, new_relations: Vec<Relation>) {
        for entity in new_entities {
            self.merge_entity(entity);
        }
        for relation in new_relations {
            self.merge_relation(relation);
        }
    }

    fn merge_entity(&mut self, mut entity: Entity) {
        entity.name = canonical_name(&entity.name);
        if entity.name.is_empty() {
            return;
        }
        match self.entities.get_mut(&entity.name) {
            None => {
                self.entities.insert(entity.name.clone(), entity);
            }
            Some(existing) => {
                if existing.entity_type != entity.entity_type {
                    self.type_conflicts += 1;
                }
                for d in entity.descriptions {
                    if !existing.descriptions.contains(&d) {
                        existing.descriptions.push(d);
                    }
                }
                existing.source_chunks.extend(entity.source_chunks);
            }
        }
    }

    fn merge_relation(&mut self, relation: Relation) {
        let (src, tgt) = relation_key(&relation.src, &relation.tgt);
        if src == tgt || src.is_empty() {
            return;
        }
        for endpoint in [&src, &tgt] {
            match self.entities.get_mut(endpoint) {
                // Endpoints always absorb the relation's provenance, so the
                // merged graph does not depend on batch order.
                Some(existing) => existing
                    .source_chunks
                    .extend(relation.source_chunks.iter().cloned()),
                None => {
                    self.entities.insert(
                        endpoint.clone(),
                        Entity {
                            name: endpoint.clone(),
                            entity_type: UNKNOWN_TYPE.to_string(),
                            descriptions: Vec::new(),
                            source_chunks: relation.source_chunks.clone(),
                            original_descriptions: Vec::new(),
                        },
                    );
                }
            }
        }
        match self.relations.get_mut(&(src.clone(), tgt.clone())) {
            None => {
                self.relations.insert(
                    (src.clone(), tgt.clone()),
                    Relation {
                        src,
                        tgt,
                        descriptions: relation.descriptions,
                        source_chunks: relation.source_chunks,
                        loss: relation.loss,
                        original_descriptions: Vec::new(),
                    },
                );
            }
            Some(existing) => {
                for d in relation.descriptions {
                    if !existing.descriptions.contains(&d) {
                        existing.descriptions.push(d);
                    }
                }
                existing.source_chunks.extend(relation.source_chunks);
                if existing.loss.is_none() {
                    existing.loss = relation.loss;
                }
            }
        }
    }

    /// Entity names with no incident relation.
    pub fn isolated_entities(&self) -> Vec<&str> {
        let mut connected = BTreeSet::new();
        for (src, tgt) in self.relations.keys() {
            connected.insert(src.as_str());
            connected.insert(tgt.as_str());
        }
        self.entities
            .keys()
            .filter(|name| !connected.contains(name.as_str()))
            .map(|s| s.as_str())
            .collect()
    }

    /// Relation keys incident to an entity.
    pub fn adjacent_relations(&self, entity: &str) -> Vec<RelationKey> {
        self.relations
            .keys()
            .filter(|(src, tgt)| src == entity || tgt == entity)
            .cloned()
            .collect()
    }

    pub fn degree_histogram(&self) -> BTreeMap<usize, usize> {
        let mut degree: BTreeMap<&str, usize> = BTreeMap::new();
        for name in self.entities.keys() {
            degree.insert(name, 0);
        }
        for (src, tgt) in self.relations.keys() {
            *degree.entry(src).or_insert(0) += 1;
            *degree.entry(tgt).or_insert(0) += 1;
        }
        let mut hist = BTreeMap::new();
        for (_, d) in degree {
            *hist.entry(d).or_insert(0) += 1;
        }
        hist
    }

    pub fn save(&self, path: &Path) -> Result<(), KgError> {
        let file = GraphFile {
            version: GRAPH_SCHEMA_VERSION,
            graph: self.clone(),
        };
        let json = serde_json::to_string_pretty(&file).expect("graph serializes");
        std::fs::write(path, json).map_err(|source| KgError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, KgError> {
        let raw = std::fs::read_to_string(path).map_err(|source| KgError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let file: GraphFile = serde_json::from_str(&raw).map_err(|source| KgError::Schema {
            path: path.display().to_string(),
            source,
        })?;
        if file.version != GRAPH_SCHEMA_VERSION {
            return Err(KgError::Version {
                path: path.display().to_string(),
                found: file.version,
                expected: GRAPH_SCHEMA_VERSION,
            });
        }
        let graph = file.graph;
        for ((src, tgt), _) in &graph.relations {
            for endpoint in [src, tgt] {
                if !graph.entities.contains_key(endpoint) {
                    return Err(KgError::DanglingEndpoint {
                        path: path.display().to_string(),
                        src: src.clone(),
                        tgt: tgt.clone(),
                        missing: endpoint.clone(),
                    });
                }
            }
        }
        Ok(graph)
    }
}

#[derive(Serialize, Deserialize)]
struct GraphFile {
    version: u32,
    #[serde(flatten)]
    graph: KnowledgeGraph,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn entity(name: &str, ty: &str, desc: &str, chunk: &str) -> Entity {
        Entity {
            name: name.into(),
            entity_type: ty.into(),
            descriptions: vec![desc.into()],
            source_chunks: [chunk.to_string()].into(),
            original_descriptions: Vec::new(),
        }
    }

    pub(crate) fn relation(src: &str, tgt: &str, desc: &str, chunk: &str) -> Relation {
        Relation {
            src: src.into(),
            tgt: tgt.into(),
            descriptions: vec![desc.into()],
            source_chunks: [chunk.to_string()].into(),
            loss: None,
            original_descriptions: Vec::new(),
        }
    }

    #[test]
    fn merge_is_idempotent_for_same_entity() {
        let mut g = KnowledgeGraph::new();
        g.merge(vec![entity("Rice", "crop", "a cereal", "c1")], vec![]);
        let before = g.clone();
        g.merge(vec![entity("Rice", "crop", "a cereal", "c1")], vec![]);
        assert_eq!(g, before);
    }

    #[test]
    fn same_entity_from_two_chunks_unifies() {
        let mut g = KnowledgeGraph::new();
        g.merge(vec![entity("Rice", "crop", "a cereal", "c1")], vec![]);
        g.merge(vec![entity("RICE ", "crop", "staple food", "c2")], vec![]);
        assert_eq!(g.entities.len(), 1);
        let e = &g.entities["rice"];
        assert_eq!(e.descriptions.len(), 2);
        assert_eq!(e.source_chunks.len(), 2);
    }

    #[test]
    fn undirected_relation_identity() {
        let mut g = KnowledgeGraph::new();
        g.merge(
            vec![entity("A", "t", "d", "c1"), entity("B", "t", "d", "c1")],
            vec![relation("A", "B", "r1", "c1"), relation("B", "A", "r2", "c2")],
        );
        assert_eq!(g.relations.len(), 1);
        let r = &g.relations[&("a".to_string(), "b".to_string())];
        assert_eq!(r.descriptions, vec!["r1".to_string(), "r2".to_string()]);
    }

    #[test]
    fn missing_endpoint_gets_placeholder() {
        let mut g = KnowledgeGraph::new();
        g.merge(vec![], vec![relation("A", "B", "links", "c1")]);
        assert_eq!(g.entities["a"].entity_type, UNKNOWN_TYPE);
        assert_eq!(g.entities["b"].entity_type, UNKNOWN_TYPE);
    }

    #[test]
    fn round_trip_preserves_structure_and_loss() {
        let mut g = KnowledgeGraph::new();
        g.merge(
            vec![
                entity("A", "t", "dA", "c1"),
                entity("B", "t", "dB", "c1"),
                entity("C", "t", "dC", "c2"),
            ],
            vec![relation("A", "B", "ab", "c1"), relation("B", "C", "bc", "c2")],
        );
        g.relations.get_mut(&("a".into(), "b".into())).unwrap().loss = Some(0.75);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("graph.json");
        g.save(&path).unwrap();
        let loaded = KnowledgeGraph::load(&path).unwrap();
        assert_eq!(loaded, g);
    }

    #[test]
    fn empty_graph_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("graph.json");
        KnowledgeGraph::new().save(&path).unwrap();
        assert_eq!(KnowledgeGraph::load(&path).unwrap(), KnowledgeGraph::new());
    }

    #[test]
    fn dangling_endpoint_is_load_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("graph.json");
        let json = serde_json::json!({
            "version": 1,
            "entities": {"a": {"name": "a", "entity_type": "t", "descriptions": ["d"], "source_chunks": ["c"]}},
            "relations": [{"src": "a", "tgt": "ghost", "descriptions": ["d"], "source_chunks": ["c"]}],
            "type_conflicts": 0
        });
        std::fs::write(&path, json.to_string()).unwrap();
        let err = KnowledgeGraph::load(&path).unwrap_err();
        assert!(err.to_string().contains("ghost"), "{err}");
    }

    #[test]
    fn version_mismatch_is_load_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("graph.json");
        let json = serde_json::json!({
            "version": 99, "entities": {}, "relations": [], "type_conflicts": 0
        });
        std::fs::write(&path, json.to_string()).unwrap();
        assert!(matches!(
            KnowledgeGraph::load(&path).unwrap_err(),
            KgError::Version { found: 99, .. }
        ));
    }

    fn arb_batch() -> impl Strategy<Value = (Vec<Entity>, Vec<Relation>)> {
        let names = prop::sample::select(vec!["a", "b", "c", "d", "e"]);
        let ents = prop::collection::vec(
            (names.clone(), "[a-z]{1,4}").prop_map(|(n, d)| entity(n, "t", &d, "c")),
            0..4,
        );
        let rels = prop::collection::vec(
            (names.clone(), names, "[a-z]{1,4}")
                .prop_map(|(s, t, d)| relation(s, t, &d, "c")),
            0..4,
        );
        (ents, rels)
    }

    fn merged(batches: &[(Vec<Entity>, Vec<Relation>)]) -> KnowledgeGraph {
        let mut g = KnowledgeGraph::new();
        for (e, r) in batches {
            g.merge(e.clone(), r.clone());
        }
        g
    }

    fn structurally_equal(a: &KnowledgeGraph, b: &KnowledgeGraph) -> bool {
        // up to description ordering
        if a.entities.len() != b.entities.len() || a.relations.len() != b.relations.len() {
            return false;
        }
        for (k, ea) in &a.entities {
            let Some(eb) = b.entities.get(k) else { return false };
            let mut da = ea.descriptions.clone();
            let mut db = eb.descriptions.clone();
            da.sort();
            db.sort();
            if da != db || ea.source_chunks != eb.source_chunks {
                return false;
            }
        }
        for (k, ra) in &a.relations {
            let Some(rb) = b.relations.get(k) else { return false };
            let mut da = ra.descriptions.clone();
            let mut db = rb.descriptions.clone();
            da.sort();
            db.sort();
            if da != db || ra.source_chunks != rb.source_chunks {
                return false;
            }
        }
        true
    }

    proptest! {
        #[test]
        fn merge_commutative_up_to_ordering(x in arb_batch(), y in arb_batch()) {
            let ab = merged(&[x.clone(), y.clone()]);
            let ba = merged(&[y, x]);
            prop_assert!(structurally_equal(&ab, &ba));
        }

        #[test]
        fn merge_idempotent(x in arb_batch()) {
            let once = merged(&[x.clone()]);
            let twice = merged(&[x.clone(), x]);
            prop_assert!(structurally_equal(&once, &twice));
        }

        #[test]
        fn referential_integrity_after_merge(batches in prop::collection::vec(arb_batch(), 0..4)) {
            let g = merged(&batches);
            for (src, tgt) in g.relations.keys() {
                prop_assert!(g.entities.contains_key(src));
                prop_assert!(g.entities.contains_key(tgt));
                prop_assert!(src < tgt);
            }
        }
    }
}
