use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{ClassifyError, LabelProbability, Prediction};

pub const EDOS_BINARY: &str = "edos-binary";
pub const EDOS_CATEGORY: &str = "edos-category";
pub const EDOS_VECTOR: &str = "edos-vector";

/// Maps each label onto a label of a coarser schema.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParentMap {
    pub schema_id: String,
    pub map: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSchema {
    pub schema_id: String,
    pub labels: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<ParentMap>,
    /// The non-toxic label, if the schema has one. Anything else counts as toxic.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub negative_label: Option<String>,
}

impl LabelSchema {
    pub fn new(schema_id: impl Into<String>, labels: &[&str]) -> Result<Self, ClassifyError> {
        let schema = Self {
            schema_id: schema_id.into(),
            labels: labels.iter().map(|s| s.to_string()).collect(),
            parent: None,
            negative_label: None,
        };
        schema.validate()?;
        Ok(schema)
    }

    pub fn with_negative(mut self, label: &str) -> Result<Self, ClassifyError> {
        self.negative_label = Some(label.to_string());
        self.validate()?;
        Ok(self)
    }

    pub fn with_parent(
        mut self,
        parent_schema: &str,
        pairs: &[(&str, &str)],
    ) -> Result<Self, ClassifyError> {
        self.parent = Some(ParentMap {
            schema_id: parent_schema.to_string(),
            map: pairs
                .iter()
                .map(|(a, b)| (a.to_string(), b.to_string()))
                .collect(),
        });
        self.validate()?;
        Ok(self)
    }

    /// Checks label uniqueness, negative-label membership and parent-map totality.
    pub fn validate(&self) -> Result<(), ClassifyError> {
        if self.labels.is_empty() {
            return Err(ClassifyError::InvalidSchema(format!(
                "schema `{}` has no labels",
                self.schema_id
            )));
        }
        let unique: BTreeSet<_> = self.labels.iter().collect();
        if unique.len() != self.labels.len() {
            return Err(ClassifyError::InvalidSchema(format!(
                "schema `{}` has duplicate labels",
                self.schema_id
            )));
        }
        if let Some(neg) = &self.negative_label {
            if !unique.contains(neg) {
                return Err(ClassifyError::InvalidSchema(format!(
                    "negative label `{neg}` is not in schema `{}`",
                    self.schema_id
                )));
            }
        }
        if let Some(parent) = &self.parent {
            let keys: BTreeSet<_> = parent.map.keys().collect();
            if keys != unique {
                return Err(ClassifyError::InvalidSchema(format!(
                    "parent map of `{}` must cover exactly its labels",
                    self.schema_id
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn contains(&self, label: &str) -> bool {
        self.index_of(label).is_some()
    }

    pub fn is_toxic(&self, label: &str) -> bool {
        self.negative_label.as_deref() != Some(label)
    }
}

/// Known schemas, including the shipped sexism taxonomy at three granularities.
#[derive(Debug, Clone)]
pub struct SchemaRegistry {
    schemas: BTreeMap<String, LabelSchema>,
}

impl Default for SchemaRegistry {
    fn default() -> Self {
        Self::builtin()
    }
}

pub const CATEGORY_LABELS: [&str; 4] = ["threats", "derogation", "animosity", "prejudiced discussion"];

/// Fine-grained vectors, in the order they are listed in the sexism prompt.
pub const VECTOR_LABELS: [&str; 11] = [
    "Threats of harm",
    "Incitement and encouragement of harm",
    "Descriptive attacks",
    "Aggressive and emotive attacks",
    "Dehumanising attacks and overt sexual objectification",
    "Causal use of gendered slurs, profanities and insults",
    "Immutable gender differences and gender stereotypes",
    "Backhanded gendered compliments",
    "Condescending explanations or unwelcome advice",
    "Supporting mistreatment of individual women",
    "Supporting systemic discrimination against women as a group",
];

/// Category index of each vector, following the listing order (2, 3, 4, 2).
const VECTOR_PARENT: [usize; 11] = [0, 0, 1, 1, 1, 2, 2, 2, 2, 3, 3];

impl SchemaRegistry {
    pub fn empty() -> Self {
        Self {
            schemas: BTreeMap::new(),
        }
    }

    pub fn builtin() -> Self {
        let binary = LabelSchema::new(EDOS_BINARY, &["sexist", "not sexist"])
            .and_then(|s| s.with_negative("not sexist"))
            .expect("binary schema");
        let category_pairs: Vec<(&str, &str)> =
            CATEGORY_LABELS.iter().map(|c| (*c, "sexist")).collect();
        let category = LabelSchema::new(EDOS_CATEGORY, &CATEGORY_LABELS)
            .and_then(|s| s.with_parent(EDOS_BINARY, &category_pairs))
            .expect("category schema");
        let vector_pairs: Vec<(&str, &str)> = VECTOR_LABELS
            .iter()
            .zip(VECTOR_PARENT)
            .map(|(v, p)| (*v, CATEGORY_LABELS[p]))
            .collect();
        let vector = LabelSchema::new(EDOS_VECTOR, &VECTOR_LABELS)
            .and_then(|s| s.with_parent(EDOS_CATEGORY, &vector_pairs))
            .expect("vector schema");
        let mut registry = Self::empty();
        for schema in [binary, category, vector] {
            registry.insert(schema).expect("builtin schemas are consistent");
        }
        registry
    }

    /// Adds a schema. Its parent, if any, must already be registered, and the
    /// parent map must reach every parent label except the parent's negative
    /// label (fine-grained schemas only subdivide the toxic side).
    pub fn insert(&mut self, schema: LabelSchema) -> Result<(), ClassifyError> {
        schema.validate()?;
        if let Some(parent) = &schema.parent {
            let parent_schema = self.get(&parent.schema_id)?;
            let reached: BTreeSet<&str> = parent.map.values().map(String::as_str).collect();
            for target in &reached {
                if !parent_schema.contains(target) {
                    return Err(ClassifyError::InvalidSchema(format!(
                        "`{target}` is not a label of `{}`",
                        parent.schema_id
                    )));
                }
            }
            for label in &parent_schema.labels {
                let exempt = parent_schema.negative_label.as_deref() == Some(label.as_str());
                if !exempt && !reached.contains(label.as_str()) {
                    return Err(ClassifyError::InvalidSchema(format!(
                        "parent map of `{}` never reaches `{label}`",
                        schema.schema_id
                    )));
                }
            }
        }
        self.schemas.insert(schema.schema_id.clone(), schema);
        Ok(())
    }

    pub fn get(&self, schema_id: &str) -> Result<&LabelSchema, ClassifyError> {
        self.schemas
            .get(schema_id)
            .ok_or_else(|| ClassifyError::UnknownSchema(schema_id.to_string()))
    }

    pub fn all(&self) -> impl Iterator<Item = &LabelSchema> {
        self.schemas.values()
    }

    /// Chain of schema ids from `from` up to `to` (inclusive).
    fn path(&self, from: &str, to: &str) -> Result<Vec<&LabelSchema>, ClassifyError> {
        let mut path = vec![self.get(from)?];
        while path.last().map(|s| s.schema_id.as_str()) != Some(to) {
            let current = path.last().expect("non-empty");
            let parent = current.parent.as_ref().ok_or_else(|| {
                ClassifyError::SchemaMismatch(format!("`{to}` is not an ancestor of `{from}`"))
            })?;
            path.push(self.get(&parent.schema_id)?);
        }
        Ok(path)
    }

    /// Maps a label of `from` onto its ancestor label in `to`.
    pub fn coarsen_label(&self, label: &str, from: &str, to: &str) -> Result<String, ClassifyError> {
        let path = self.path(from, to)?;
        if !path[0].contains(label) {
            return Err(ClassifyError::UnknownLabel(label.to_string()));
        }
        let mut current = label.to_string();
        for schema in &path[..path.len() - 1] {
            let parent = schema.parent.as_ref().expect("checked by path");
            current = parent.map[&current].clone();
        }
        Ok(current)
    }

    /// Sums probability mass into ancestor labels of `to`.
    pub fn coarsen_prediction(
        &self,
        prediction: &Prediction,
        to: &str,
    ) -> Result<Prediction, ClassifyError> {
        let target = self.get(to)?;
        let mut mass = vec![0.0; target.len()];
        for lp in &prediction.distribution {
            let coarse = self.coarsen_label(&lp.label, &prediction.schema_id, to)?;
            let idx = target.index_of(&coarse).expect("coarsened label in target");
            mass[idx] += lp.probability;
        }
        Prediction::from_probabilities(&prediction.message_id, target, &mass)
    }
}

impl LabelSchema {
    /// Distribution entries in schema order from raw probabilities.
    pub(crate) fn zip(&self, probs: &[f64]) -> Vec<LabelProbability> {
        self.labels
            .iter()
            .zip(probs)
            .map(|(label, p)| LabelProbability {
                label: label.clone(),
                probability: *p,
            })
            .collect()
    }
}
