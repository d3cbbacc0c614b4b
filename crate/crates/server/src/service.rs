//! Operations behind the HTTP routes and CLI verbs.
//!
//! Each long-running operation has a `validate_*` step that runs before a job
//! is enqueued and a `run_*` step that does the work under a [`Progress`].

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use toxlens_core::assistant::{LabeledMessage, PredictionContext};
use toxlens_core::chunker::ChunkParams;
use toxlens_core::classify::{
    classification_report, classify_batch, classify_ensemble, llm_verify, ClassificationReport,
    LabelProbability, LabelSchema, Prediction, Verdict,
};
use toxlens_core::persona::{analyze_persona, PersonaProfile};
use toxlens_core::ppl_gain::{analyze, GainOptions, Granularity, PplReport};
use toxlens_core::store::{
    label_histogram, ConversationRecord, DataFormat, DatasetDescriptor, DatasetLayout, IngestReport,
    MessageRecord,
};
use toxlens_core::summarize::{
    summarize_conversation, ConversationSummary, KeyedSummaries, LabelContext, SummarizeParams,
};
use toxlens_core::template::VERIFY_PREDICTION;
use toxlens_core::{content_hash, Progress};

use crate::error::ApiError;
use crate::state::AppState;

const LABELS: &str = "labels";
const SUMMARY: &str = "summary";
const PERSONA: &str = "persona";
const PPL_GAIN: &str = "ppl_gain";
const LATEST: &str = "latest";
const CLASSIFY_GROUP: usize = 64;

// ---------------------------------------------------------------- datasets

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetDetail {
    pub descriptor: DatasetDescriptor,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub conversation_keys: Vec<String>,
    pub label_histogram: BTreeMap<String, usize>,
}

pub fn upload_dataset(state: &AppState, name: &str, raw: &[u8], format: DataFormat) -> Result<IngestReport, ApiError> {
    Ok(state.store.ingest_dataset(name, raw, format)?)
}

pub fn dataset_detail(state: &AppState, dataset_id: &str) -> Result<DatasetDetail, ApiError> {
    let descriptor = state.store.descriptor(dataset_id)?;
    let conversation_keys = if descriptor.layout == DatasetLayout::ConversationLevel {
        state.store.conversation_keys(dataset_id)?
    } else {
        Vec::new()
    };
    let records = state.store.records(dataset_id)?;
    Ok(DatasetDetail {
        descriptor,
        conversation_keys,
        label_histogram: label_histogram(&records),
    })
}

pub fn conversation(state: &AppState, dataset_id: &str, key: &str) -> Result<ConversationRecord, ApiError> {
    Ok(state.store.get_conversation(dataset_id, key)?)
}

// ---------------------------------------------------------- classification

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyOptions {
    #[serde(default)]
    pub template_id: Option<String>,
    #[serde(default)]
    pub provider: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifyRequest {
    /// Dataset to classify; omit to classify `texts` directly.
    #[serde(default)]
    pub dataset_id: Option<String>,
    #[serde(default)]
    pub texts: Vec<String>,
    /// Restrict to these message ids.
    #[serde(default)]
    pub message_ids: Option<Vec<String>>,
    /// Classifier or ensemble id.
    #[serde(default)]
    pub classifier: Option<String>,
    #[serde(default)]
    pub schema: Option<String>,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    #[serde(default)]
    pub verify: Option<VerifyOptions>,
}

fn default_top_k() -> usize {
    2
}

impl Default for ClassifyRequest {
    fn default() -> Self {
        Self {
            dataset_id: None,
            texts: Vec::new(),
            message_ids: None,
            classifier: None,
            schema: None,
            top_k: default_top_k(),
            verify: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionView {
    #[serde(flatten)]
    pub prediction: Prediction,
    pub top_k: Vec<LabelProbability>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_label: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifyResponse {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset_id: Option<String>,
    pub classifier: String,
    pub schema_id: String,
    pub predictions: Vec<PredictionView>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<ClassificationReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdicts: Option<Vec<Verdict>>,
}

/// Labels persisted after a classification run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredLabels {
    pub classifier: String,
    pub schema_id: String,
    pub labels: BTreeMap<String, String>,
}

struct ClassifyPlan {
    classifier: String,
    schema: LabelSchema,
    messages: Vec<MessageRecord>,
}

fn resolve_schema(state: &AppState, schema: Option<&str>) -> Result<LabelSchema, ApiError> {
    let id = schema.unwrap_or(&state.config.defaults.schema);
    Ok(state.schemas.get(id)?.clone())
}

fn resolve_classifier(state: &AppState, requested: Option<&str>) -> Result<String, ApiError> {
    let id = requested
        .or_else(|| state.config.default_classifier())
        .ok_or_else(|| ApiError::Unavailable("no classifier configured".into()))?;
    if state.ensembles.contains_key(id) || state.classifiers.get(id).is_ok() {
        Ok(id.to_string())
    } else {
        Err(ApiError::Validation(format!("unknown classifier `{id}`")))
    }
}

fn plan_classification(state: &AppState, req: &ClassifyRequest) -> Result<ClassifyPlan, ApiError> {
    let schema = resolve_schema(state, req.schema.as_deref())?;
    let classifier = resolve_classifier(state, req.classifier.as_deref())?;
    if req.top_k == 0 || req.top_k > schema.len() {
        return Err(ApiError::Validation(format!(
            "top_k must be between 1 and {}",
            schema.len()
        )));
    }
    let mut messages = match &req.dataset_id {
        Some(id) => state.store.records(id)?,
        None => req
            .texts
            .iter()
            .enumerate()
            .map(|(i, t)| MessageRecord::new(format!("t{}", i + 1), t.clone()))
            .collect(),
    };
    if let Some(ids) = &req.message_ids {
        let wanted: std::collections::BTreeSet<&str> = ids.iter().map(String::as_str).collect();
        messages.retain(|m| wanted.contains(m.id.as_str()));
        if messages.len() != wanted.len() {
            return Err(ApiError::Validation("some message_ids are not in the dataset".into()));
        }
    }
    if req.dataset_id.is_none() && messages.is_empty() {
        return Err(ApiError::Validation("provide dataset_id or texts".into()));
    }
    if req.verify.is_some() {
        state.chat_lm(req.verify.as_ref().and_then(|v| v.provider.as_deref()))?;
    }
    Ok(ClassifyPlan {
        classifier,
        schema,
        messages,
    })
}

pub fn validate_classify(state: &AppState, req: &ClassifyRequest) -> Result<(), ApiError> {
    plan_classification(state, req).map(|_| ())
}

async fn predict(
    state: &AppState,
    classifier: &str,
    schema: &LabelSchema,
    messages: &[MessageRecord],
    progress: &Progress,
) -> Result<Vec<Prediction>, ApiError> {
    progress.set_total(messages.len().div_ceil(CLASSIFY_GROUP).max(1));
    let mut out = Vec::with_capacity(messages.len());
    for group in messages.chunks(CLASSIFY_GROUP) {
        if progress.is_cancelled() {
            return Err(ApiError::Cancelled);
        }
        let predictions = match state.ensembles.get(classifier) {
            Some(ensemble) => classify_ensemble(&state.classifiers, group, ensemble, schema).await?,
            None => classify_batch(&state.classifiers, group, classifier, schema).await?,
        };
        out.extend(predictions);
        progress.advance();
    }
    if messages.is_empty() {
        progress.advance();
    }
    Ok(out)
}

fn labels_key(classifier: &str, schema_id: &str) -> String {
    format!("{classifier}/{schema_id}")
}

fn report_for(
    schema: &LabelSchema,
    messages: &[MessageRecord],
    predictions: &[Prediction],
) -> Result<Option<ClassificationReport>, ApiError> {
    let (gold, pred): (Vec<&str>, Vec<&str>) = messages
        .iter()
        .zip(predictions)
        .filter_map(|(m, p)| {
            m.gold_label
                .as_deref()
                .filter(|g| schema.contains(g))
                .map(|g| (g, p.argmax_label.as_str()))
        })
        .unzip();
    if gold.is_empty() {
        return Ok(None);
    }
    Ok(Some(classification_report(&gold, &pred, schema)?))
}

pub async fn run_classify(
    state: &AppState,
    req: &ClassifyRequest,
    progress: Arc<Progress>,
) -> Result<ClassifyResponse, ApiError> {
    let plan = plan_classification(state, req)?;
    let predictions = predict(state, &plan.classifier, &plan.schema, &plan.messages, &progress).await?;
    let report = report_for(&plan.schema, &plan.messages, &predictions)?;

    let verdicts = match &req.verify {
        Some(options) => {
            let lm = AppState::cancellable(state.chat_lm(options.provider.as_deref())?, &progress);
            let template = options.template_id.as_deref().unwrap_or(VERIFY_PREDICTION);
            Some(llm_verify(&plan.messages, &predictions, &state.templates, template, lm.as_ref()).await?)
        }
        None => None,
    };

    if let Some(dataset_id) = &req.dataset_id {
        let mut stored = state
            .store
            .get_result(dataset_id, LABELS, &labels_key(&plan.classifier, &plan.schema.schema_id))?
            .and_then(|v| serde_json::from_value::<StoredLabels>(v).ok())
            .unwrap_or(StoredLabels {
                classifier: plan.classifier.clone(),
                schema_id: plan.schema.schema_id.clone(),
                labels: BTreeMap::new(),
            });
        for p in &predictions {
            stored.labels.insert(p.message_id.clone(), p.argmax_label.clone());
        }
        let value = serde_json::to_value(&stored).map_err(|e| ApiError::Internal(e.to_string()))?;
        state
            .store
            .put_result(dataset_id, LABELS, &labels_key(&plan.classifier, &plan.schema.schema_id), &value)?;
        state.store.put_result(dataset_id, LABELS, LATEST, &value)?;
    }

    let predictions = plan
        .messages
        .iter()
        .zip(predictions)
        .map(|(m, prediction)| {
            Ok(PredictionView {
                top_k: prediction.top_k(req.top_k)?,
                gold_label: m.gold_label.clone(),
                prediction,
            })
        })
        .collect::<Result<Vec<_>, ApiError>>()?;
    Ok(ClassifyResponse {
        dataset_id: req.dataset_id.clone(),
        classifier: plan.classifier,
        schema_id: plan.schema.schema_id,
        predictions,
        report,
        verdicts,
    })
}

// ------------------------------------------------------------------ report

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportRequest {
    #[serde(default)]
    pub schema: Option<String>,
    #[serde(default)]
    pub gold: Vec<String>,
    #[serde(default)]
    pub pred: Vec<String>,
    /// Evaluate stored predictions against the dataset's gold labels instead.
    #[serde(default)]
    pub dataset_id: Option<String>,
    #[serde(default)]
    pub classifier: Option<String>,
    /// `json` (default) or `csv`.
    #[serde(default)]
    pub format: Option<String>,
}

pub fn report(state: &AppState, req: &ReportRequest) -> Result<ClassificationReport, ApiError> {
    let schema = resolve_schema(state, req.schema.as_deref())?;
    let Some(dataset_id) = &req.dataset_id else {
        return Ok(classification_report(&req.gold, &req.pred, &schema)?);
    };
    let classifier = resolve_classifier(state, req.classifier.as_deref())?;
    let stored = stored_labels(state, dataset_id, &classifier, &schema.schema_id)?.ok_or_else(|| {
        ApiError::Validation(format!(
            "no `{classifier}` predictions for schema `{}`; classify the dataset first",
            schema.schema_id
        ))
    })?;
    let mut gold = Vec::new();
    let mut pred = Vec::new();
    for record in state.store.records(dataset_id)? {
        if let (Some(g), Some(p)) = (&record.gold_label, stored.labels.get(&record.id)) {
            if schema.contains(g) {
                gold.push(g.clone());
                pred.push(p.clone());
            }
        }
    }
    if gold.is_empty() {
        return Err(ApiError::Validation(format!(
            "dataset `{dataset_id}` has no gold labels in schema `{}`",
            schema.schema_id
        )));
    }
    Ok(classification_report(&gold, &pred, &schema)?)
}

fn stored_labels(
    state: &AppState,
    dataset_id: &str,
    classifier: &str,
    schema_id: &str,
) -> Result<Option<StoredLabels>, ApiError> {
    Ok(state
        .store
        .get_result(dataset_id, LABELS, &labels_key(classifier, schema_id))?
        .and_then(|v| serde_json::from_value(v).ok()))
}

// --------------------------------------------------------------- ppl gain

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PplGainRequest {
    pub dataset_id: String,
    pub conversation_key: String,
    /// The output being explained, e.g. a predicted label or LM answer.
    pub output: String,
    #[serde(default)]
    pub granularity: Granularity,
    #[serde(default)]
    pub provider: Option<String>,
    #[serde(default = "yes")]
    pub use_cache: bool,
}

fn yes() -> bool {
    true
}

pub fn validate_ppl_gain(state: &AppState, req: &PplGainRequest) -> Result<(), ApiError> {
    if req.output.is_empty() {
        return Err(ApiError::Validation("output must not be empty".into()));
    }
    state.store.get_conversation(&req.dataset_id, &req.conversation_key)?;
    state.scoring_lm(req.provider.as_deref())?;
    Ok(())
}

pub fn ppl_gain_hash(req: &PplGainRequest) -> String {
    let granularity = serde_json::to_string(&req.granularity).unwrap_or_default();
    content_hash([
        PPL_GAIN,
        &req.dataset_id,
        &req.conversation_key,
        &req.output,
        &granularity,
        req.provider.as_deref().unwrap_or(""),
    ])
}

pub async fn run_ppl_gain(
    state: &AppState,
    req: &PplGainRequest,
    progress: Arc<Progress>,
) -> Result<PplReport, ApiError> {
    validate_ppl_gain(state, req)?;
    let conversation = state.store.get_conversation(&req.dataset_id, &req.conversation_key)?;
    let lm = AppState::cancellable(state.scoring_lm(req.provider.as_deref())?, &progress);
    let options = GainOptions {
        max_concurrency: None,
        cache: req.use_cache.then(|| Arc::clone(&state.score_cache)),
        progress: Some(progress),
    };
    let report = analyze(&conversation, &req.output, req.granularity, lm.as_ref(), &options).await?;
    let value = serde_json::to_value(&report).map_err(|e| ApiError::Internal(e.to_string()))?;
    state
        .store
        .put_result(&req.dataset_id, PPL_GAIN, &ppl_gain_hash(req), &value)?;
    Ok(report)
}

// ----------------------------------------------------------- summarization

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SummarizeRequest {
    pub dataset_id: String,
    pub conversation_key: String,
    /// Classifier whose labels condition the summaries.
    #[serde(default)]
    pub classifier: Option<String>,
    #[serde(default)]
    pub schema: Option<String>,
    #[serde(default)]
    pub chat_provider: Option<String>,
    #[serde(default)]
    pub embedding_provider: Option<String>,
    #[serde(default)]
    pub chunking: Option<ChunkParams>,
    #[serde(default)]
    pub parallelism: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryResult {
    pub dataset_id: String,
    pub conversation_key: String,
    pub classifier: String,
    pub schema_id: String,
    /// `group → chunk → speaker → summary`.
    pub summaries: KeyedSummaries,
    pub detail: ConversationSummary,
}

pub fn validate_summarize(state: &AppState, req: &SummarizeRequest) -> Result<(), ApiError> {
    state.store.get_conversation(&req.dataset_id, &req.conversation_key)?;
    resolve_schema(state, req.schema.as_deref())?;
    resolve_classifier(state, req.classifier.as_deref())?;
    state.chat_lm(req.chat_provider.as_deref())?;
    state.embedding_lm(req.embedding_provider.as_deref())?;
    if let Some(chunking) = &req.chunking {
        chunking.validate()?;
    }
    Ok(())
}

pub fn summarize_hash(req: &SummarizeRequest) -> String {
    content_hash([
        SUMMARY.to_string(),
        serde_json::to_string(req).unwrap_or_default(),
    ])
}

pub async fn run_summarize(
    state: &AppState,
    req: &SummarizeRequest,
    progress: Arc<Progress>,
) -> Result<SummaryResult, ApiError> {
    validate_summarize(state, req)?;
    let conversation = state.store.get_conversation(&req.dataset_id, &req.conversation_key)?;
    let schema = resolve_schema(state, req.schema.as_deref())?;
    let classifier = resolve_classifier(state, req.classifier.as_deref())?;

    let stored = stored_labels(state, &req.dataset_id, &classifier, &schema.schema_id)?;
    let covered = stored
        .as_ref()
        .is_some_and(|s| conversation.turns.iter().all(|t| s.labels.contains_key(&t.id)));
    let labels: BTreeMap<String, String> = if covered {
        let stored = stored.expect("checked above");
        conversation
            .turns
            .iter()
            .map(|t| (t.id.clone(), stored.labels[&t.id].clone()))
            .collect()
    } else {
        let scratch = Progress::new();
        predict(state, &classifier, &schema, &conversation.turns, &scratch)
            .await?
            .into_iter()
            .map(|p| (p.message_id, p.argmax_label))
            .collect()
    };
    let label_context = LabelContext::new(labels, schema.negative_label.clone());

    let chat = AppState::cancellable(state.chat_lm(req.chat_provider.as_deref())?, &progress);
    let embed = AppState::cancellable(state.embedding_lm(req.embedding_provider.as_deref())?, &progress);
    let params = SummarizeParams {
        chunking: req.chunking.clone().unwrap_or_else(|| state.config.chunker.clone()),
        parallelism: req.parallelism.unwrap_or(state.config.summarizer.parallelism).max(1),
    };
    let summary = summarize_conversation(
        &conversation,
        &label_context,
        chat.as_ref(),
        embed.as_ref(),
        &state.summary_template,
        &params,
        progress,
    )
    .await?;
    let value = serde_json::to_value(&summary).map_err(|e| ApiError::Internal(e.to_string()))?;
    state
        .store
        .put_result(&req.dataset_id, SUMMARY, &req.conversation_key, &value)?;
    Ok(SummaryResult {
        dataset_id: req.dataset_id.clone(),
        conversation_key: req.conversation_key.clone(),
        classifier,
        schema_id: schema.schema_id,
        summaries: summary.keyed(),
        detail: summary,
    })
}

// ----------------------------------------------------------------- persona

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PersonaRequest {
    /// Dataset whose stored summaries describe the speaker.
    #[serde(default)]
    pub dataset_id: Option<String>,
    /// Conversations to draw summaries from; all summarised ones by default.
    #[serde(default)]
    pub conversation_keys: Option<Vec<String>>,
    /// Explicit summaries, used instead of stored ones.
    #[serde(default)]
    pub summaries: Vec<String>,
    #[serde(default)]
    pub provider: Option<String>,
}

fn speaker_summaries(state: &AppState, speaker: &str, req: &PersonaRequest) -> Result<Vec<String>, ApiError> {
    if !req.summaries.is_empty() {
        return Ok(req.summaries.clone());
    }
    let dataset_id = req
        .dataset_id
        .as_deref()
        .ok_or_else(|| ApiError::Validation("provide dataset_id or summaries".into()))?;
    let keys = match &req.conversation_keys {
        Some(keys) => keys.clone(),
        None => state.store.conversation_keys(dataset_id)?,
    };
    let mut out = Vec::new();
    for key in keys {
        if let Some(value) = state.store.get_result(dataset_id, SUMMARY, &key)? {
            let summary: ConversationSummary =
                serde_json::from_value(value).map_err(|e| ApiError::Internal(e.to_string()))?;
            out.extend(summary.speaker_summaries(speaker));
        }
    }
    if out.is_empty() {
        return Err(ApiError::Validation(format!(
            "no summaries mention `{speaker}`; summarise a conversation first"
        )));
    }
    Ok(out)
}

pub fn validate_persona(state: &AppState, speaker: &str, req: &PersonaRequest) -> Result<(), ApiError> {
    if speaker.is_empty() {
        return Err(ApiError::Validation("speaker must not be empty".into()));
    }
    speaker_summaries(state, speaker, req)?;
    state.chat_lm(req.provider.as_deref())?;
    Ok(())
}

pub async fn run_persona(
    state: &AppState,
    speaker: &str,
    req: &PersonaRequest,
    progress: Arc<Progress>,
) -> Result<PersonaProfile, ApiError> {
    validate_persona(state, speaker, req)?;
    let summaries = speaker_summaries(state, speaker, req)?;
    progress.set_total(1);
    let lm = AppState::cancellable(state.chat_lm(req.provider.as_deref())?, &progress);
    let profile = analyze_persona(speaker, &summaries, lm.as_ref(), None).await?;
    debug_assert!(profile.scores.is_valid());
    if let Some(dataset_id) = &req.dataset_id {
        let value = serde_json::to_value(&profile).map_err(|e| ApiError::Internal(e.to_string()))?;
        state.store.put_result(dataset_id, PERSONA, speaker, &value)?;
    }
    progress.advance();
    Ok(profile)
}

pub fn stored_persona(state: &AppState, dataset_id: &str, speaker: &str) -> Result<Option<PersonaProfile>, ApiError> {
    state
        .store
        .get_result(dataset_id, PERSONA, speaker)?
        .map(|v| serde_json::from_value(v).map_err(|e| ApiError::Internal(e.to_string())))
        .transpose()
}

// --------------------------------------------------------------- assistant

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSessionRequest {
    #[serde(default)]
    pub context: Option<PredictionContext>,
    /// Bind the session to a dataset's stored predictions.
    #[serde(default)]
    pub dataset_id: Option<String>,
    #[serde(default)]
    pub classifier: Option<String>,
    #[serde(default)]
    pub schema: Option<String>,
    /// A transcript previously exported as JSON.
    #[serde(default)]
    pub history: Option<Value>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionCreated {
    pub session_id: String,
}

/// Toxic-labelled messages of a dataset, for the session preamble.
fn dataset_context(state: &AppState, req: &CreateSessionRequest, dataset_id: &str) -> Result<PredictionContext, ApiError> {
    let stored: StoredLabels = match (&req.classifier, &req.schema) {
        (None, None) => state
            .store
            .get_result(dataset_id, LABELS, LATEST)?
            .and_then(|v| serde_json::from_value(v).ok()),
        _ => {
            let schema = resolve_schema(state, req.schema.as_deref())?;
            let classifier = resolve_classifier(state, req.classifier.as_deref())?;
            stored_labels(state, dataset_id, &classifier, &schema.schema_id)?
        }
    }
    .ok_or_else(|| ApiError::Validation(format!("dataset `{dataset_id}` has no stored predictions")))?;
    let schema = state.schemas.get(&stored.schema_id)?;
    let predictions = state
        .store
        .records(dataset_id)?
        .into_iter()
        .filter_map(|r| {
            let label = stored.labels.get(&r.id)?;
            schema.is_toxic(label).then(|| LabeledMessage {
                message_id: r.id.clone(),
                text: Some(r.speaker_prefixed()),
                label: label.clone(),
            })
        })
        .collect();
    Ok(PredictionContext {
        dataset_id: Some(dataset_id.to_string()),
        predictions,
    })
}

pub fn create_session(state: &AppState, req: &CreateSessionRequest) -> Result<SessionCreated, ApiError> {
    let context = match (&req.context, &req.dataset_id) {
        (Some(context), _) => Some(context.clone()),
        (None, Some(dataset_id)) => Some(dataset_context(state, req, dataset_id)?),
        (None, None) => None,
    };
    let session_id = match &req.history {
        Some(history) => {
            let json = match history {
                Value::String(s) => s.clone(),
                other => other.to_string(),
            };
            state.sessions.import(&json, context)?
        }
        None => state.sessions.create(context),
    };
    Ok(SessionCreated { session_id })
}
