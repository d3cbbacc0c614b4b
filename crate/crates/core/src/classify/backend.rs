use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use futures::stream::{self, StreamExt, TryStreamExt};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tokio::sync::Semaphore;

use super::{ClassifyError, LabelSchema, Prediction};
use crate::store::MessageRecord;

/// Batches in flight per `classify_batch` call.
const BATCH_CONCURRENCY: usize = 4;

/// A message-level classifier returning one score vector per text, aligned
/// to the schema's label order.
#[async_trait]
pub trait ClassifierBackend: Send + Sync {
    fn id(&self) -> &str;
    fn supports(&self, schema_id: &str) -> bool;
    fn max_batch(&self) -> usize;
    async fn score(
        &self,
        texts: &[String],
        schema: &LabelSchema,
    ) -> Result<Vec<Vec<f64>>, ClassifyError>;
}

/// Scoring rule of the in-process stub.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum StubMode {
    /// The same logits for every text.
    Fixed { logits: Vec<f64> },
    /// Pseudo-random logits derived from a hash of the text.
    Hashed,
    /// Texts containing any of `terms` (case-insensitive) lean toxic,
    /// everything else leans towards the schema's negative label.
    Keyword { terms: Vec<String> },
}

/// Deterministic in-process classifier for tests and offline runs.
#[derive(Debug)]
pub struct StubBackend {
    id: String,
    mode: StubMode,
    schemas: Option<BTreeSet<String>>,
    max_batch: usize,
    delay: Duration,
    calls: AtomicUsize,
    texts_scored: AtomicUsize,
}

fn hash_logit(text: &str, label: &str) -> f64 {
    let digest = Sha256::new()
        .chain_update(text.as_bytes())
        .chain_update([0u8])
        .chain_update(label.as_bytes())
        .finalize();
    let v = u16::from_be_bytes([digest[0], digest[1]]) as f64 / u16::MAX as f64;
    4.0 * v - 2.0
}

impl StubBackend {
    pub fn new(id: impl Into<String>, mode: StubMode) -> Self {
        Self {
            id: id.into(),
            mode,
            schemas: None,
            max_batch: 16,
            delay: Duration::ZERO,
            calls: AtomicUsize::new(0),
            texts_scored: AtomicUsize::new(0),
        }
    }

    /// Restricts the stub to the given schemas (default: any).
    pub fn with_schemas<I, S>(mut self, schemas: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.schemas = Some(schemas.into_iter().map(Into::into).collect());
        self
    }

    pub fn with_max_batch(mut self, max_batch: usize) -> Self {
        self.max_batch = max_batch.max(1);
        self
    }

    pub fn with_delay(mut self, delay: Duration) -> Self {
        self.delay = delay;
        self
    }

    /// Number of `score` invocations so far.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn texts_scored(&self) -> usize {
        self.texts_scored.load(Ordering::SeqCst)
    }

    fn logits(&self, text: &str, schema: &LabelSchema) -> Vec<f64> {
        match &self.mode {
            StubMode::Fixed { logits } => logits.clone(),
            StubMode::Hashed => schema.labels.iter().map(|l| hash_logit(text, l)).collect(),
            StubMode::Keyword { terms } => {
                let lowered = text.to_lowercase();
                let hit = terms.iter().any(|t| lowered.contains(&t.to_lowercase()));
                schema
                    .labels
                    .iter()
                    .map(|l| {
                        let negative = schema.negative_label.as_deref() == Some(l.as_str());
                        match (negative, hit) {
                            (true, true) => -4.0,
                            (true, false) => 4.0,
                            (false, _) => hash_logit(text, l),
                        }
                    })
                    .collect()
            }
        }
    }
}

#[async_trait]
impl ClassifierBackend for StubBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn supports(&self, schema_id: &str) -> bool {
        self.schemas.as_ref().is_none_or(|s| s.contains(schema_id))
    }

    fn max_batch(&self) -> usize {
        self.max_batch
    }

    async fn score(
        &self,
        texts: &[String],
        schema: &LabelSchema,
    ) -> Result<Vec<Vec<f64>>, ClassifyError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        if !self.delay.is_zero() {
            tokio::time::sleep(self.delay).await;
        }
        self.texts_scored.fetch_add(texts.len(), Ordering::SeqCst);
        Ok(texts.iter().map(|t| self.logits(t, schema)).collect())
    }
}

#[derive(Serialize)]
struct ScoreRequest<'a> {
    texts: &'a [String],
    schema_id: &'a str,
}

#[derive(Deserialize)]
struct ScoreResponse {
    scores: Vec<Vec<f64>>,
}

/// Remote inference endpoint: POST `{texts, schema_id}` → `{scores}`.
#[derive(Debug)]
pub struct HttpBackend {
    id: String,
    url: String,
    schemas: BTreeSet<String>,
    max_batch: usize,
    client: reqwest::Client,
    permits: Semaphore,
}

impl HttpBackend {
    pub fn new(
        id: impl Into<String>,
        url: impl Into<String>,
        schemas: BTreeSet<String>,
        max_batch: usize,
        max_parallel: usize,
        timeout: Duration,
    ) -> Result<Self, ClassifyError> {
        let id = id.into();
        let client = reqwest::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| ClassifyError::BackendUnavailable(format!("{id}: {e}")))?;
        Ok(Self {
            id,
            url: url.into(),
            schemas,
            max_batch: max_batch.max(1),
            client,
            permits: Semaphore::new(max_parallel.max(1)),
        })
    }
}

#[async_trait]
impl ClassifierBackend for HttpBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn supports(&self, schema_id: &str) -> bool {
        self.schemas.contains(schema_id)
    }

    fn max_batch(&self) -> usize {
        self.max_batch
    }

    async fn score(
        &self,
        texts: &[String],
        schema: &LabelSchema,
    ) -> Result<Vec<Vec<f64>>, ClassifyError> {
        let unavailable = |e: reqwest::Error| ClassifyError::BackendUnavailable(format!("{}: {e}", self.id));
        let _permit = self.permits.acquire().await.expect("semaphore never closed");
        let response = self
            .client
            .post(&self.url)
            .json(&ScoreRequest {
                texts,
                schema_id: &schema.schema_id,
            })
            .send()
            .await
            .map_err(unavailable)?;
        let status = response.status();
        if !status.is_success() {
            let body = response.text().await.unwrap_or_default();
            return Err(ClassifyError::BackendUnavailable(format!(
                "{}: HTTP {status}: {body}",
                self.id
            )));
        }
        let parsed: ScoreResponse = response.json().await.map_err(unavailable)?;
        Ok(parsed.scores)
    }
}

/// Classifier backends by id.
#[derive(Clone, Default)]
pub struct ClassifierRegistry {
    backends: BTreeMap<String, Arc<dyn ClassifierBackend>>,
}

impl ClassifierRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, backend: Arc<dyn ClassifierBackend>) {
        self.backends.insert(backend.id().to_string(), backend);
    }

    pub fn get(&self, id: &str) -> Result<Arc<dyn ClassifierBackend>, ClassifyError> {
        self.backends
            .get(id)
            .cloned()
            .ok_or_else(|| ClassifyError::BackendUnavailable(format!("unknown classifier `{id}`")))
    }

    pub fn ids(&self) -> Vec<&str> {
        self.backends.keys().map(String::as_str).collect()
    }
}

/// Classifies messages in bounded batches, one prediction per message in input order.
pub async fn classify_batch(
    registry: &ClassifierRegistry,
    messages: &[MessageRecord],
    classifier_id: &str,
    schema: &LabelSchema,
) -> Result<Vec<Prediction>, ClassifyError> {
    let backend = registry.get(classifier_id)?;
    if !backend.supports(&schema.schema_id) {
        return Err(ClassifyError::SchemaMismatch(format!(
            "classifier `{classifier_id}` does not support `{}`",
            schema.schema_id
        )));
    }
    if messages.is_empty() {
        return Ok(Vec::new());
    }
    let size = backend.max_batch().max(1);
    let ranges: Vec<(usize, usize)> = (0..messages.len())
        .step_by(size)
        .map(|start| (start, (start + size).min(messages.len())))
        .collect();
    let per_batch: Vec<Vec<Prediction>> = stream::iter(ranges)
        .map(|(start, end)| {
            let backend = Arc::clone(&backend);
            async move {
                let batch = &messages[start..end];
                let texts: Vec<String> = batch.iter().map(|m| m.text.clone()).collect();
                let scores = backend.score(&texts, schema).await?;
                if scores.len() != batch.len() {
                    return Err(ClassifyError::SchemaMismatch(format!(
                        "classifier `{}` returned {} score vectors for {} texts",
                        backend.id(),
                        scores.len(),
                        batch.len()
                    )));
                }
                batch
                    .iter()
                    .zip(&scores)
                    .map(|(m, s)| Prediction::from_scores(&m.id, schema, s))
                    .collect()
            }
        })
        .buffered(BATCH_CONCURRENCY)
        .try_collect()
        .await?;
    Ok(per_batch.into_iter().flatten().collect())
}
