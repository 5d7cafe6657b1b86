//! Pipeline configuration: TOML schema, aggregated validation with
//! nearest-key suggestions, and a semantic config hash for stage caching.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::InputFormat;
use crate::qagen::DatasetFormat;
use crate::traverse::TraversalConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Live,
    Record,
    Replay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputConfig {
    pub paths: Vec<PathBuf>,
    pub format: InputFormat,
    pub max_chunk_tokens: usize,
    pub overlap_tokens: usize,
}

impl Default for InputConfig {
    fn default() -> Self {
        InputConfig {
            paths: Vec::new(),
            format: InputFormat::PlainText,
            max_chunk_tokens: 1024,
            overlap_tokens: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointConfig {
    pub base_url: String,
    pub model_name: String,
    pub api_key_env_var: String,
    pub concurrency: usize,
}

impl EndpointConfig {
    fn default_for(role: &str) -> Self {
        EndpointConfig {
            base_url: "http://localhost:8000/v1".into(),
            model_name: format!("{role}-model"),
            api_key_env_var: format!("{}_API_KEY", role.to_uppercase()),
            concurrency: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KgConfig {
    pub entity_types: Vec<String>,
    /// Minimum merged description count before summarization kicks in.
    pub summary_threshold: usize,
}

impl Default for KgConfig {
    fn default() -> Self {
        KgConfig {
            entity_types: ["concept", "person", "organization", "location", "event", "method"]
                .into_iter()
                .map(String::from)
                .collect(),
            summary_threshold: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssessmentConfig {
    /// Paraphrase/negation count per polarity.
    pub n: usize,
    /// Probability floor applied before the logarithm.
    pub epsilon: f64,
}

impl Default for AssessmentConfig {
    fn default() -> Self {
        AssessmentConfig { n: 2, epsilon: 1e-6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputConfig {
    pub format: DatasetFormat,
    pub path: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            format: DatasetFormat::Alpaca,
            path: PathBuf::from("qa.jsonl"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub mode: Mode,
    pub cache_dir: PathBuf,
    pub input: InputConfig,
    pub synthesizer: EndpointConfig,
    pub trainee: EndpointConfig,
    pub kg: KgConfig,
    pub assessment: AssessmentConfig,
    pub traversal: TraversalConfig,
    pub output: OutputConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            mode: Mode::Live,
            cache_dir: PathBuf::from("cache"),
            input: InputConfig::default(),
            synthesizer: EndpointConfig::default_for("synthesizer"),
            trainee: EndpointConfig::default_for("trainee"),
            kg: KgConfig::default(),
            assessment: AssessmentConfig::default(),
            traversal: TraversalConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Hash of every semantically meaningful field. The run mode and cache
    /// location are excluded so a recorded cassette replays under the same
    /// stage keys.
    pub fn semantic_hash(&self) -> String {
        let semantic = serde_json::json!({
            "input": self.input,
            "synthesizer": self.synthesizer,
            "trainee": self.trainee,
            "kg": self.kg,
            "assessment": self.assessment,
            "traversal": self.traversal,
            "output": self.output,
        });
        let digest = Sha256::digest(serde_json::to_vec(&semantic).expect("serializable"));
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// One validation problem; `path` is the dotted key location.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigIssue {
    pub path: String,
    pub message: String,
}

impl std::fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {reason}")]
    Unreadable { path: String, reason: String },
    #[error("config is not valid TOML: {0}")]
    Syntax(String),
    #[error("{} validation error(s):\n{}", .0.len(), .0.iter().map(|i| format!("  - {i}")).collect::<Vec<_>>().join("\n"))]
    Invalid(Vec<ConfigIssue>),
}

fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for (i, &ca) in a.iter().enumerate() {
        let mut current = vec![i + 1];
        for (j, &cb) in b.iter().enumerate() {
            let cost = usize::from(ca != cb);
            current.push((prev[j] + cost).min(prev[j + 1] + 1).min(current[j] + 1));
        }
        prev = current;
    }
    prev[b.len()]
}

fn nearest<'a>(key: &str, options: &[&'a str]) -> Option<&'a str> {
    options
        .iter()
        .map(|&o| (levenshtein(key, o), o))
        .min()
        .map(|(_, o)| o)
}

struct Validator {
    issues: Vec<ConfigIssue>,
}

impl Validator {
    fn push(&mut self, path: &str, message: impl Into<String>) {
        self.issues.push(ConfigIssue {
            path: path.to_string(),
            message: message.into(),
        });
    }

    fn check_unknown_keys(&mut self, path: &str, table: &toml::Table, known: &[&str]) {
        for key in table.keys() {
            if !known.contains(&key.as_str()) {
                let hint = nearest(key, known)
                    .map(|n| format!("; did you mean \"{n}\"?"))
                    .unwrap_or_default();
                let at = if path.is_empty() { key.clone() } else { format!("{path}.{key}") };
                self.push(&at, format!("unknown key{hint}"));
            }
        }
    }

    fn table<'a>(&mut self, root: &'a toml::Table, key: &str) -> Option<&'a toml::Table> {
        match root.get(key) {
            None => None,
            Some(toml::Value::Table(t)) => Some(t),
            Some(other) => {
                self.push(key, format!("expected a table, got {}", other.type_str()));
                None
            }
        }
    }

    fn string(&mut self, table: &toml::Table, path: &str, key: &str, out: &mut String) {
        match table.get(key) {
            None => {}
            Some(toml::Value::String(s)) => *out = s.clone(),
            Some(other) => self.push(
                &format!("{path}.{key}"),
                format!("expected a string, got {}", other.type_str()),
            ),
        }
    }

    fn enumeration(
        &mut self,
        table: &toml::Table,
        path: &str,
        key: &str,
        variants: &[&str],
    ) -> Option<String> {
        match table.get(key) {
            None => None,
            Some(toml::Value::String(s)) => {
                if variants.contains(&s.as_str()) {
                    Some(s.clone())
                } else {
                    let hint = nearest(s, variants)
                        .map(|n| format!("; did you mean \"{n}\"?"))
                        .unwrap_or_default();
                    self.push(
                        &format!("{path}.{key}"),
                        format!("invalid value {s:?}{hint} (valid: {})", variants.join(", ")),
                    );
                    None
                }
            }
            Some(other) => {
                self.push(
                    &format!("{path}.{key}"),
                    format!("expected a string, got {}", other.type_str()),
                );
                None
            }
        }
    }

    fn integer(&mut self, table: &toml::Table, path: &str, key: &str, min: i64) -> Option<i64> {
        match table.get(key) {
            None => None,
            Some(toml::Value::Integer(i)) if *i >= min => Some(*i),
            Some(toml::Value::Integer(i)) => {
                self.push(&format!("{path}.{key}"), format!("must be >= {min}, got {i}"));
                None
            }
            Some(other) => {
                self.push(
                    &format!("{path}.{key}"),
                    format!("expected an integer, got {}", other.type_str()),
                );
                None
            }
        }
    }

    fn float(&mut self, table: &toml::Table, path: &str, key: &str) -> Option<f64> {
        match table.get(key) {
            None => None,
            Some(toml::Value::Float(f)) => Some(*f),
            Some(toml::Value::Integer(i)) => Some(*i as f64),
            Some(other) => {
                self.push(
                    &format!("{path}.{key}"),
                    format!("expected a number, got {}", other.type_str()),
                );
                None
            }
        }
    }

    fn boolean(&mut self, table: &toml::Table, path: &str, key: &str) -> Option<bool> {
        match table.get(key) {
            None => None,
            Some(toml::Value::Boolean(b)) => Some(*b),
            Some(other) => {
                self.push(
                    &format!("{path}.{key}"),
                    format!("expected a boolean, got {}", other.type_str()),
                );
                None
            }
        }
    }

    fn string_array(&mut self, table: &toml::Table, path: &str, key: &str) -> Option<Vec<String>> {
        match table.get(key) {
            None => None,
            Some(toml::Value::Array(items)) => {
                let mut out = Vec::new();
                for (i, item) in items.iter().enumerate() {
                    match item {
                        toml::Value::String(s) => out.push(s.clone()),
                        other => self.push(
                            &format!("{path}.{key}[{i}]"),
                            format!("expected a string, got {}", other.type_str()),
                        ),
                    }
                }
                Some(out)
            }
            Some(other) => {
                self.push(
                    &format!("{path}.{key}"),
                    format!("expected an array, got {}", other.type_str()),
                );
                None
            }
        }
    }
}

fn validate_endpoint(v: &mut Validator, root: &toml::Table, name: &str, cfg: &mut EndpointConfig) {
    if let Some(table) = v.table(root, name) {
        v.check_unknown_keys(
            name,
            table,
            &["base_url", "model_name", "api_key_env_var", "concurrency"],
        );
        v.string(table, name, "base_url", &mut cfg.base_url);
        v.string(table, name, "model_name", &mut cfg.model_name);
        v.string(table, name, "api_key_env_var", &mut cfg.api_key_env_var);
        if let Some(c) = v.integer(table, name, "concurrency", 1) {
            cfg.concurrency = c as usize;
        }
    }
}

/// Parses and validates a TOML config, starting from the built-in defaults
/// and reporting every violation at once. Unknown keys are rejected with
/// the nearest valid key suggested.
pub fn validate_config(raw: &str) -> Result<PipelineConfig, ConfigError> {
    let root: toml::Table = raw.parse().map_err(|e: toml::de::Error| ConfigError::Syntax(e.to_string()))?;
    let mut cfg = PipelineConfig::default();
    let mut v = Validator { issues: Vec::new() };

    v.check_unknown_keys(
        "",
        &root,
        &[
            "mode",
            "cache_dir",
            "input",
            "synthesizer",
            "trainee",
            "kg",
            "assessment",
            "traversal",
            "output",
        ],
    );

    if let Some(mode) = v.enumeration(&root, "", "mode", &["live", "record", "replay"]) {
        cfg.mode = match mode.as_str() {
            "live" => Mode::Live,
            "record" => Mode::Record,
            _ => Mode::Replay,
        };
    }
    let mut cache_dir = cfg.cache_dir.display().to_string();
    v.string(&root, "", "cache_dir", &mut cache_dir);
    cfg.cache_dir = PathBuf::from(cache_dir);

    if let Some(table) = v.table(&root, "input") {
        v.check_unknown_keys(
            "input",
            table,
            &["paths", "format", "max_chunk_tokens", "overlap_tokens"],
        );
        if let Some(paths) = v.string_array(table, "input", "paths") {
            cfg.input.paths = paths.into_iter().map(PathBuf::from).collect();
        }
        if let Some(format) = v.enumeration(table, "input", "format", &["plain_text", "jsonl_content_field"]) {
            cfg.input.format = match format.as_str() {
                "plain_text" => InputFormat::PlainText,
                _ => InputFormat::JsonlContentField,
            };
        }
        if let Some(n) = v.integer(table, "input", "max_chunk_tokens", 1) {
            cfg.input.max_chunk_tokens = n as usize;
        }
        if let Some(n) = v.integer(table, "input", "overlap_tokens", 0) {
            cfg.input.overlap_tokens = n as usize;
        }
        if cfg.input.overlap_tokens >= cfg.input.max_chunk_tokens {
            v.push(
                "input.overlap_tokens",
                format!(
                    "must be smaller than max_chunk_tokens ({})",
                    cfg.input.max_chunk_tokens
                ),
            );
        }
    }

    validate_endpoint(&mut v, &root, "synthesizer", &mut cfg.synthesizer);
    validate_endpoint(&mut v, &root, "trainee", &mut cfg.trainee);

    if let Some(table) = v.table(&root, "kg") {
        v.check_unknown_keys("kg", table, &["entity_types", "summary_threshold"]);
        if let Some(types) = v.string_array(table, "kg", "entity_types") {
            if types.is_empty() {
                v.push("kg.entity_types", "must not be empty");
            } else {
                cfg.kg.entity_types = types;
            }
        }
        if let Some(t) = v.integer(table, "kg", "summary_threshold", 2) {
            cfg.kg.summary_threshold = t as usize;
        }
    }

    if let Some(table) = v.table(&root, "assessment") {
        v.check_unknown_keys("assessment", table, &["n", "epsilon"]);
        if let Some(n) = v.integer(table, "assessment", "n", 1) {
            cfg.assessment.n = n as usize;
        }
        if let Some(e) = v.float(table, "assessment", "epsilon") {
            if e > 0.0 && e < 1.0 {
                cfg.assessment.epsilon = e;
            } else {
                v.push("assessment.epsilon", format!("must be in (0, 1), got {e}"));
            }
        }
    }

    if let Some(table) = v.table(&root, "traversal") {
        v.check_unknown_keys(
            "traversal",
            table,
            &[
                "qa_form",
                "expand_method",
                "bidirectional",
                "max_extra_edges",
                "max_tokens",
                "max_depth",
                "edge_sampling",
                "isolated_node_strategy",
                "random_seed",
            ],
        );
        use crate::traverse::{EdgeSampling, ExpandMethod, IsolatedNodeStrategy, QaForm};
        if let Some(s) = v.enumeration(table, "traversal", "qa_form", &["atomic", "aggregated", "multi_hop"]) {
            cfg.traversal.qa_form = match s.as_str() {
                "atomic" => QaForm::Atomic,
                "aggregated" => QaForm::Aggregated,
                _ => QaForm::MultiHop,
            };
        }
        if let Some(s) = v.enumeration(table, "traversal", "expand_method", &["max_width", "max_tokens"]) {
            cfg.traversal.expand_method = match s.as_str() {
                "max_width" => ExpandMethod::MaxWidth,
                _ => ExpandMethod::MaxTokens,
            };
        }
        if let Some(b) = v.boolean(table, "traversal", "bidirectional") {
            cfg.traversal.bidirectional = b;
        }
        if let Some(n) = v.integer(table, "traversal", "max_extra_edges", 1) {
            cfg.traversal.max_extra_edges = n as usize;
        }
        if let Some(n) = v.integer(table, "traversal", "max_tokens", 1) {
            cfg.traversal.max_tokens = n as usize;
        }
        if let Some(n) = v.integer(table, "traversal", "max_depth", 1) {
            cfg.traversal.max_depth = n as usize;
        }
        if let Some(s) = v.enumeration(table, "traversal", "edge_sampling", &["max_loss", "min_loss", "random"]) {
            cfg.traversal.edge_sampling = match s.as_str() {
                "max_loss" => EdgeSampling::MaxLoss,
                "min_loss" => EdgeSampling::MinLoss,
                _ => EdgeSampling::Random,
            };
        }
        if let Some(s) = v.enumeration(table, "traversal", "isolated_node_strategy", &["add", "ignore"]) {
            cfg.traversal.isolated_node_strategy = match s.as_str() {
                "add" => IsolatedNodeStrategy::Add,
                _ => IsolatedNodeStrategy::Ignore,
            };
        }
        if let Some(n) = v.integer(table, "traversal", "random_seed", 0) {
            cfg.traversal.random_seed = n as u64;
        }
    }

    if let Some(table) = v.table(&root, "output") {
        v.check_unknown_keys("output", table, &["format", "path"]);
        if let Some(s) = v.enumeration(table, "output", "format", &["alpaca", "sharegpt"]) {
            cfg.output.format = match s.as_str() {
                "alpaca" => DatasetFormat::Alpaca,
                _ => DatasetFormat::Sharegpt,
            };
        }
        let mut path = cfg.output.path.display().to_string();
        v.string(table, "output", "path", &mut path);
        cfg.output.path = PathBuf::from(path);
    }

    if v.issues.is_empty() {
        Ok(cfg)
    } else {
        Err(ConfigError::Invalid(v.issues))
    }
}

pub fn load_config(path: &std::path::Path) -> Result<PipelineConfig, ConfigError> {
    let raw = std::fs::read_to_string(path).map_err(|e| ConfigError::Unreadable {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    validate_config(&raw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::traverse::{EdgeSampling, ExpandMethod, IsolatedNodeStrategy, QaForm};

    #[test]
    fn empty_config_equals_defaults() {
        let cfg = validate_config("").unwrap();
        assert_eq!(cfg, PipelineConfig::default());
        // traversal defaults
        assert_eq!(cfg.traversal.qa_form, QaForm::Atomic);
        assert_eq!(cfg.traversal.expand_method, ExpandMethod::MaxTokens);
        assert!(cfg.traversal.bidirectional);
        assert_eq!(cfg.traversal.max_extra_edges, 5);
        assert_eq!(cfg.traversal.max_tokens, 256);
        assert_eq!(cfg.traversal.max_depth, 2);
        assert_eq!(cfg.traversal.edge_sampling, EdgeSampling::MaxLoss);
        assert_eq!(cfg.traversal.isolated_node_strategy, IsolatedNodeStrategy::Add);
    }

    #[test]
    fn enum_typo_gets_suggestion() {
        let err = validate_config("[traversal]\nedge_sampling = \"maxloss\"").unwrap_err();
        let text = err.to_string();
        assert!(text.contains("max_loss"), "{text}");
        assert!(text.contains("did you mean"), "{text}");
    }

    #[test]
    fn unknown_key_gets_suggestion() {
        let err = validate_config("[traversal]\nmax_dept = 3").unwrap_err();
        let text = err.to_string();
        assert!(text.contains("max_depth"), "{text}");
    }

    #[test]
    fn range_errors_aggregate() {
        let err = validate_config(
            "[traversal]\nmax_depth = 0\nmax_extra_edges = 0\n[assessment]\nepsilon = 2.0",
        )
        .unwrap_err();
        match err {
            ConfigError::Invalid(issues) => {
                assert_eq!(issues.len(), 3, "{issues:?}");
            }
            other => panic!("expected Invalid, got {other}"),
        }
    }

    #[test]
    fn hash_ignores_mode_and_cache_dir() {
        let a = validate_config("mode = \"record\"\ncache_dir = \"x\"").unwrap();
        let b = validate_config("mode = \"replay\"\ncache_dir = \"y\"").unwrap();
        assert_eq!(a.semantic_hash(), b.semantic_hash());
        let c = validate_config("[traversal]\nmax_depth = 3").unwrap();
        assert_ne!(a.semantic_hash(), c.semantic_hash());
    }

    #[test]
    fn hash_insensitive_to_comments_and_whitespace() {
        let a = validate_config("# comment\n\n[assessment]\nn = 2").unwrap();
        let b = validate_config("[assessment]\nn    = 2   # trailing").unwrap();
        assert_eq!(a.semantic_hash(), b.semantic_hash());
    }

    #[test]
    fn full_valid_config_parses() {
        let raw = r#"
mode = "replay"
cache_dir = "cache"

[input]
paths = ["corpus.txt"]
format = "plain_text"
max_chunk_tokens = 512
overlap_tokens = 32

[synthesizer]
base_url = "http://example.invalid/v1"
model_name = "synth"
api_key_env_var = "S_KEY"
concurrency = 2

[trainee]
base_url = "http://example.invalid/v1"
model_name = "trainee"
api_key_env_var = "T_KEY"
concurrency = 2

[kg]
entity_types = ["concept", "person"]
summary_threshold = 4

[assessment]
n = 3
epsilon = 1e-5

[traversal]
qa_form = "multi_hop"
expand_method = "max_width"
bidirectional = false
max_extra_edges = 4
max_tokens = 128
max_depth = 3
edge_sampling = "random"
isolated_node_strategy = "ignore"
random_seed = 7

[output]
format = "sharegpt"
path = "out.jsonl"
"#;
        let cfg = validate_config(raw).unwrap();
        assert_eq!(cfg.mode, Mode::Replay);
        assert_eq!(cfg.traversal.qa_form, QaForm::MultiHop);
        assert_eq!(cfg.traversal.random_seed, 7);
        assert_eq!(cfg.assessment.n, 3);
        assert_eq!(cfg.output.format, DatasetFormat::Sharegpt);
    }

    #[test]
    fn levenshtein_basics() {
        assert_eq!(levenshtein("", "abc"), 3);
        assert_eq!(levenshtein("maxloss", "max_loss"), 1);
        assert_eq!(levenshtein("kitten", "sitting"), 3);
    }
}
