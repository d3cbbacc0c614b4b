//! Message-level classification.
//!
//! Backends return one score vector per text, aligned to the schema's label
//! order. Vectors that already form a probability distribution are kept;
//! anything else is treated as logits and passed through a softmax.

mod backend;
mod ensemble;
mod report;
mod schema;
mod verify;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lm_gateway::LmError;
use crate::template::TemplateError;

pub use backend::{
    classify_batch, ClassifierBackend, ClassifierRegistry, HttpBackend, StubBackend, StubMode,
};
pub use ensemble::{classify_ensemble, ensemble_predict, EnsembleConfig};
pub use report::{classification_report, ClassificationReport, LabelMetrics, ReportFormat};
pub use schema::{
    LabelSchema, ParentMap, SchemaRegistry, CATEGORY_LABELS, EDOS_BINARY, EDOS_CATEGORY,
    EDOS_VECTOR, VECTOR_LABELS,
};
pub use verify::{llm_verify, parse_verdict, Verdict, VerdictKind};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClassifyError {
    #[error("classifier backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("unknown schema `{0}`")]
    UnknownSchema(String),
    #[error("invalid schema: {0}")]
    InvalidSchema(String),
    #[error("ensemble member `{0}` has no prediction")]
    MissingMember(String),
    #[error("prediction from `{0}`, which is not an ensemble member")]
    UnexpectedMember(String),
    #[error("invalid ensemble: {0}")]
    InvalidEnsemble(String),
    #[error("k = {k} is outside 1..={labels}")]
    KOutOfRange { k: usize, labels: usize },
    #[error("gold has {gold} labels but pred has {pred}")]
    LengthMismatch { gold: usize, pred: usize },
    #[error("no labels to evaluate")]
    EmptyInput,
    #[error("label `{0}` is not in the schema")]
    UnknownLabel(String),
    #[error("invalid scores: {0}")]
    InvalidScores(String),
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error("no AGREE/DISAGREE verdict for message `{message_id}` after retry")]
    UnparseableVerdict { message_id: String },
    #[error(transparent)]
    Template(#[from] TemplateError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelProbability {
    pub label: String,
    pub probability: f64,
}

/// Per-message probability distribution over a schema, in schema label order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub message_id: String,
    pub schema_id: String,
    pub distribution: Vec<LabelProbability>,
    /// Most probable label (first in schema order on ties). Ensemble
    /// predictions carry the voted label here instead.
    pub argmax_label: String,
}

const SUM_TOLERANCE: f64 = 1e-6;

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Turns backend scores into a distribution: kept (and renormalised) when
/// already in `[0,1]` summing to 1 within 1e-6, softmaxed otherwise.
pub fn scores_to_distribution(scores: &[f64]) -> Result<Vec<f64>, ClassifyError> {
    if scores.is_empty() {
        return Err(ClassifyError::InvalidScores("empty score vector".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(ClassifyError::InvalidScores("non-finite score".into()));
    }
    let sum: f64 = scores.iter().sum();
    let is_distribution =
        scores.iter().all(|s| (0.0..=1.0).contains(s)) && (sum - 1.0).abs() <= SUM_TOLERANCE;
    if is_distribution {
        Ok(scores.iter().map(|s| s / sum).collect())
    } else {
        Ok(softmax(scores))
    }
}

fn argmax(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, p) in probs.iter().enumerate() {
        if *p > probs[best] {
            best = i;
        }
    }
    best
}

impl Prediction {
    /// Builds a prediction from raw backend scores.
    pub fn from_scores(
        message_id: &str,
        schema: &LabelSchema,
        scores: &[f64],
    ) -> Result<Self, ClassifyError> {
        if scores.len() != schema.len() {
            return Err(ClassifyError::SchemaMismatch(format!(
                "{} scores for {} labels of `{}`",
                scores.len(),
                schema.len(),
                schema.schema_id
            )));
        }
        let probs = scores_to_distribution(scores)?;
        Self::from_probabilities(message_id, schema, &probs)
    }

    /// Builds a prediction from non-negative mass, renormalising it.
    pub fn from_probabilities(
        message_id: &str,
        schema: &LabelSchema,
        mass: &[f64],
    ) -> Result<Self, ClassifyError> {
        if mass.len() != schema.len() {
            return Err(ClassifyError::SchemaMismatch(format!(
                "{} values for {} labels",
                mass.len(),
                schema.len()
            )));
        }
        let total: f64 = mass.iter().sum();
        if !(total.is_finite() && total > 0.0) || mass.iter().any(|m| *m < 0.0) {
            return Err(ClassifyError::InvalidScores(
                "probability mass must be non-negative with a positive sum".into(),
            ));
        }
        let probs: Vec<f64> = mass.iter().map(|m| m / total).collect();
        let best = argmax(&probs);
        Ok(Self {
            message_id: message_id.to_string(),
            schema_id: schema.schema_id.clone(),
            distribution: schema.zip(&probs),
            argmax_label: schema.labels[best].clone(),
        })
    }

    pub fn probability(&self, label: &str) -> Option<f64> {
        self.distribution
            .iter()
            .find(|lp| lp.label == label)
            .map(|lp| lp.probability)
    }

    pub fn probabilities(&self) -> Vec<f64> {
        self.distribution.iter().map(|lp| lp.probability).collect()
    }

    /// The `k` most probable labels, ties broken by schema order.
    pub fn top_k(&self, k: usize) -> Result<Vec<LabelProbability>, ClassifyError> {
        let n = self.distribution.len();
        if k == 0 || k > n {
            return Err(ClassifyError::KOutOfRange { k, labels: n });
        }
        let mut ranked = self.distribution.clone();
        // stable: equal probabilities keep schema order
        ranked.sort_by(|a, b| b.probability.total_cmp(&a.probability));
        ranked.truncate(k);
        Ok(ranked)
    }
}
