//! Prompt templates with named placeholders.
//!
//! Templates are data: the defaults ship as text files under `templates/`
//! and any of them can be overridden from a directory on disk.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("template {template}: placeholder {{{placeholder}}} is unbound")]
    Unbound {
        template: String,
        placeholder: String,
    },
    #[error("cannot read template {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// A prompt body with `{name}` placeholders.
#[derive(Debug, Clone)]
pub struct PromptTemplate {
    pub name: String,
    pub body: String,
    pub required_placeholders: BTreeSet<String>,
}

impl PromptTemplate {
    /// Scans the body for `{lower_snake}` placeholders. Anything else,
    /// including braces around other content, is literal text.
    pub fn parse(name: &str, body: &str) -> Self {
        let mut required = BTreeSet::new();
        for candidate in placeholder_candidates(body) {
            required.insert(candidate);
        }
        PromptTemplate {
            name: name.to_string(),
            body: body.to_string(),
            required_placeholders: required,
        }
    }

    /// Renders the template; every placeholder must be bound.
    pub fn render(&self, bindings: &BTreeMap<&str, String>) -> Result<String, TemplateError> {
        for placeholder in &self.required_placeholders {
            if !bindings.contains_key(placeholder.as_str()) {
                return Err(TemplateError::Unbound {
                    template: self.name.clone(),
                    placeholder: placeholder.clone(),
                });
            }
        }
        let mut rendered = self.body.clone();
        for (key, value) in bindings {
            rendered = rendered.replace(&format!("{{{key}}}"), value);
        }
        Ok(rendered)
    }
}

fn placeholder_candidates(body: &str) -> Vec<String> {
    let bytes = body.as_bytes();
    let mut found = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'{' {
            // `{{` escapes a literal brace
            if i + 1 < bytes.len() && bytes[i + 1] == b'{' {
                i += 2;
                continue;
            }
            let mut j = i + 1;
            while j < bytes.len() && (bytes[j].is_ascii_lowercase() || bytes[j] == b'_') {
                j += 1;
            }
            if j > i + 1 && j < bytes.len() && bytes[j] == b'}' {
                found.push(body[i + 1..j].to_string());
                i = j + 1;
                continue;
            }
        }
        i += 1;
    }
    found
}

/// The full catalog of prompts used by the pipeline.
#[derive(Debug, Clone)]
pub struct PromptSet {
    pub kg_extraction: PromptTemplate,
    pub kg_summarization: PromptTemplate,
    pub rephrase_literal: PromptTemplate,
    pub rephrase_opposite: PromptTemplate,
    pub statement_judgement: PromptTemplate,
    pub atomic_qa: PromptTemplate,
    pub aggregated_answer: PromptTemplate,
    pub aggregated_question: PromptTemplate,
    pub multihop_qa: PromptTemplate,
}

macro_rules! builtin {
    ($name:literal) => {
        PromptTemplate::parse($name, include_str!(concat!("../templates/", $name, ".txt")))
    };
}

impl Default for PromptSet {
    fn default() -> Self {
        PromptSet {
            kg_extraction: builtin!("kg_extraction"),
            kg_summarization: builtin!("kg_summarization"),
            rephrase_literal: builtin!("rephrase_literal"),
            rephrase_opposite: builtin!("rephrase_opposite"),
            statement_judgement: builtin!("statement_judgement"),
            atomic_qa: builtin!("atomic_qa"),
            aggregated_answer: builtin!("aggregated_answer"),
            aggregated_question: builtin!("aggregated_question"),
            multihop_qa: builtin!("multihop_qa"),
        }
    }
}

impl PromptSet {
    /// Loads overrides from `<dir>/<template-name>.txt`; missing files keep
    /// the built-in default.
    pub fn load_dir(dir: &Path) -> Result<Self, TemplateError> {
        let mut set = PromptSet::default();
        for template in [
            &mut set.kg_extraction,
            &mut set.kg_summarization,
            &mut set.rephrase_literal,
            &mut set.rephrase_opposite,
            &mut set.statement_judgement,
            &mut set.atomic_qa,
            &mut set.aggregated_answer,
            &mut set.aggregated_question,
            &mut set.multihop_qa,
        ] {
            let path = dir.join(format!("{}.txt", template.name));
            if path.exists() {
                let body = std::fs::read_to_string(&path).map_err(|source| TemplateError::Io {
                    path: path.display().to_string(),
                    source,
                })?;
                *template = PromptTemplate::parse(&template.name, &body);
            }
        }
        Ok(set)
    }
}
