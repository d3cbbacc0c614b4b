//! `{placeholder}` prompt templates.
//!
//! Rendering is single-pass: text substituted for one placeholder is never
//! scanned again, so bound values may themselves contain braces.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TemplateError {
    #[error("unknown template `{0}`")]
    UnknownTemplate(String),
    #[error("missing binding `{0}`")]
    MissingBinding(String),
    #[error("template must contain placeholder `{{{0}}}` exactly once")]
    MissingPlaceholder(String),
}

pub const VAWG_DETECT: &str = "vawg_detect";
pub const SEXISM_DETECT: &str = "sexism_detect";
pub const EXPLAIN_PREDICTION: &str = "explain_prediction";
pub const VERIFY_PREDICTION: &str = "verify_prediction";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub template_id: String,
    pub body: String,
    pub required_bindings: Vec<String>,
}

impl PromptTemplate {
    /// Builds a template, checking that each required binding occurs exactly once.
    pub fn new(
        template_id: impl Into<String>,
        body: impl Into<String>,
        required: &[&str],
    ) -> Result<Self, TemplateError> {
        let body = body.into();
        for name in required {
            if count_placeholder(&body, name) != 1 {
                return Err(TemplateError::MissingPlaceholder(name.to_string()));
            }
        }
        Ok(Self {
            template_id: template_id.into(),
            body,
            required_bindings: required.iter().map(|s| s.to_string()).collect(),
        })
    }

    pub fn render(&self, bindings: &BTreeMap<String, String>) -> Result<String, TemplateError> {
        for name in &self.required_bindings {
            if !bindings.contains_key(name) {
                return Err(TemplateError::MissingBinding(name.clone()));
            }
        }
        Ok(render(&self.body, |name| bindings.get(name).map(String::as_str)))
    }
}

pub fn count_placeholder(body: &str, name: &str) -> usize {
    body.matches(&format!("{{{name}}}")).count()
}

/// Substitutes every `{name}` for which `lookup` returns a value.
/// Unknown names and stray braces are copied through unchanged.
pub fn render<'a>(body: &str, lookup: impl Fn(&str) -> Option<&'a str>) -> String {
    let mut out = String::with_capacity(body.len());
    let mut rest = body;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let close = after.find('}');
        let name = close.map(|c| &after[..c]);
        match name {
            Some(name) if is_identifier(name) => match lookup(name) {
                Some(value) => {
                    out.push_str(value);
                    rest = &after[name.len() + 1..];
                }
                None => {
                    out.push('{');
                    rest = after;
                }
            },
            _ => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

fn is_identifier(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// Named templates available to the assistant and classifier verification.
#[derive(Debug, Clone)]
pub struct TemplateRegistry {
    templates: BTreeMap<String, PromptTemplate>,
}

impl Default for TemplateRegistry {
    fn default() -> Self {
        Self::builtin()
    }
}

impl TemplateRegistry {
    pub fn builtin() -> Self {
        let shipped: [(&str, &str, &[&str]); 4] = [
            (VAWG_DETECT, include_str!("../templates/vawg_detect.txt"), &["conversation"]),
            (SEXISM_DETECT, include_str!("../templates/sexism_detect.txt"), &["conversation"]),
            (
                EXPLAIN_PREDICTION,
                include_str!("../templates/explain_prediction.txt"),
                &["labels", "conversation"],
            ),
            (
                VERIFY_PREDICTION,
                include_str!("../templates/verify_prediction.txt"),
                &["label", "message"],
            ),
        ];
        let templates = shipped
            .into_iter()
            .map(|(id, body, required)| {
                let t = PromptTemplate::new(id, body.trim_end(), required)
                    .expect("shipped templates are well-formed");
                (id.to_string(), t)
            })
            .collect();
        Self { templates }
    }

    pub fn insert(&mut self, template: PromptTemplate) {
        self.templates.insert(template.template_id.clone(), template);
    }

    pub fn get(&self, id: &str) -> Result<&PromptTemplate, TemplateError> {
        self.templates
            .get(id)
            .ok_or_else(|| TemplateError::UnknownTemplate(id.to_string()))
    }

    pub fn ids(&self) -> BTreeSet<&str> {
        self.templates.keys().map(String::as_str).collect()
    }

    pub fn render(
        &self,
        id: &str,
        bindings: &BTreeMap<String, String>,
    ) -> Result<String, TemplateError> {
        self.get(id)?.render(bindings)
    }
}
