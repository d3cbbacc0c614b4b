//! Per-speaker chunk summaries conditioned on message-level labels.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use futures::future::join_all;
use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chunker::{plan_conversation, ChunkError, ChunkParams, ChunkPlan};
use crate::lm_gateway::{ChatMessage, ChatParams, LanguageModel, LmError};
use crate::progress::{JobState, Progress};
use crate::store::{ConversationRecord, MessageRecord};
use crate::template::{count_placeholder, render, TemplateError};

pub const DEFAULT_SUMMARY_TEMPLATE: &str = include_str!("../templates/summary.txt");

const UNKNOWN_SPEAKER: &str = "unknown";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SummarizeError {
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("chunk has no turns")]
    EmptyChunk,
    #[error(transparent)]
    Chunking(#[from] ChunkError),
    #[error("every chunk failed; first error: {0}")]
    AllChunksFailed(String),
    #[error("summarization cancelled")]
    Cancelled,
}

/// Message labels used to condition summaries. Any label other than the
/// negative label counts as toxic.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelContext {
    pub labels: BTreeMap<String, String>,
    #[serde(default)]
    pub negative_label: Option<String>,
}

impl LabelContext {
    pub fn new(labels: BTreeMap<String, String>, negative_label: Option<String>) -> Self {
        Self {
            labels,
            negative_label,
        }
    }

    /// The toxic label of a message, if it has one.
    pub fn toxic_label(&self, message_id: &str) -> Option<&str> {
        self.labels
            .get(message_id)
            .map(String::as_str)
            .filter(|l| self.negative_label.as_deref() != Some(*l))
    }
}

fn speaker_of(turn: &MessageRecord) -> &str {
    turn.speaker.as_deref().unwrap_or(UNKNOWN_SPEAKER)
}

/// Renders the summary instruction for one chunk and one speaker.
///
/// The template must contain `{conversation}` and `{toxic_messages}` exactly
/// once; `{speaker}` is optional.
pub fn build_summary_prompt(
    turns: &[MessageRecord],
    labels: &LabelContext,
    template: &str,
    speaker: &str,
) -> Result<String, SummarizeError> {
    for name in ["conversation", "toxic_messages"] {
        if count_placeholder(template, name) != 1 {
            return Err(TemplateError::MissingPlaceholder(name.to_string()).into());
        }
    }
    let conversation = turns
        .iter()
        .map(MessageRecord::speaker_prefixed)
        .collect::<Vec<_>>()
        .join("\n");
    let toxic: Vec<String> = turns
        .iter()
        .filter_map(|t| {
            labels
                .toxic_label(&t.id)
                .map(|label| format!("[{label}] {}", t.speaker_prefixed()))
        })
        .enumerate()
        .map(|(i, line)| format!("{}. {line}", i + 1))
        .collect();
    let toxic_messages = if toxic.is_empty() {
        "none".to_string()
    } else {
        toxic.join("\n")
    };
    Ok(render(template, |name| match name {
        "conversation" => Some(conversation.as_str()),
        "toxic_messages" => Some(toxic_messages.as_str()),
        "speaker" => Some(speaker),
        _ => None,
    }))
}

/// Summaries of one chunk, one entry per speaker that succeeded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToxicAwareSummary {
    pub conversation_key: String,
    pub group_id: usize,
    pub chunk_id: usize,
    pub start: usize,
    pub end: usize,
    pub per_speaker: BTreeMap<String, String>,
    /// Speakers whose summary call failed, with the error message.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub failed_speakers: BTreeMap<String, String>,
    /// Toxic-labelled message ids inside the chunk.
    pub flagged_refs: Vec<String>,
}

impl ToxicAwareSummary {
    /// A chunk fails only when no speaker could be summarised.
    pub fn failed(&self) -> bool {
        self.per_speaker.is_empty() && !self.failed_speakers.is_empty()
    }
}

pub struct ChunkInput<'a> {
    pub conversation_key: &'a str,
    pub group_id: usize,
    pub chunk_id: usize,
    pub start: usize,
    pub turns: &'a [MessageRecord],
}

/// One chat call per speaker present in the chunk.
pub async fn summarize_chunk(
    chunk: ChunkInput<'_>,
    labels: &LabelContext,
    template: &str,
    lm: &dyn LanguageModel,
) -> Result<ToxicAwareSummary, SummarizeError> {
    if chunk.turns.is_empty() {
        return Err(SummarizeError::EmptyChunk);
    }
    let speakers: BTreeSet<&str> = chunk.turns.iter().map(speaker_of).collect();
    let prompts = speakers
        .iter()
        .map(|s| Ok((*s, build_summary_prompt(chunk.turns, labels, template, s)?)))
        .collect::<Result<Vec<_>, SummarizeError>>()?;
    let params = ChatParams::default();
    let replies = join_all(prompts.iter().map(|(_, prompt)| {
        let messages = [ChatMessage::user(prompt.clone())];
        let params = &params;
        async move { lm.chat(&messages, params).await }
    }))
    .await;

    let mut per_speaker = BTreeMap::new();
    let mut failed_speakers = BTreeMap::new();
    for ((speaker, _), reply) in prompts.iter().zip(replies) {
        match reply {
            Ok(text) => {
                per_speaker.insert(speaker.to_string(), text.trim().to_string());
            }
            Err(LmError::Cancelled) => return Err(SummarizeError::Cancelled),
            Err(e) => {
                tracing::warn!(speaker, chunk = chunk.chunk_id, error = %e, "speaker summary failed");
                failed_speakers.insert(speaker.to_string(), e.to_string());
            }
        }
    }
    let flagged_refs = chunk
        .turns
        .iter()
        .filter(|t| labels.toxic_label(&t.id).is_some())
        .map(|t| t.id.clone())
        .collect();
    Ok(ToxicAwareSummary {
        conversation_key: chunk.conversation_key.to_string(),
        group_id: chunk.group_id,
        chunk_id: chunk.chunk_id,
        start: chunk.start,
        end: chunk.start + chunk.turns.len() - 1,
        per_speaker,
        failed_speakers,
        flagged_refs,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SummarizeParams {
    pub chunking: ChunkParams,
    /// Chunks summarised concurrently.
    pub parallelism: usize,
}

impl Default for SummarizeParams {
    fn default() -> Self {
        Self {
            chunking: ChunkParams::default(),
            parallelism: 2,
        }
    }
}

/// All chunk summaries of one conversation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConversationSummary {
    pub conversation_key: String,
    pub plan: ChunkPlan,
    /// Ordered by chunk start.
    pub chunks: Vec<ToxicAwareSummary>,
}

/// `group → chunk → speaker → summary`.
pub type KeyedSummaries = BTreeMap<usize, BTreeMap<usize, BTreeMap<String, String>>>;

impl ConversationSummary {
    pub fn keyed(&self) -> KeyedSummaries {
        let mut out = KeyedSummaries::new();
        for chunk in &self.chunks {
            out.entry(chunk.group_id)
                .or_default()
                .insert(chunk.chunk_id, chunk.per_speaker.clone());
        }
        out
    }

    /// A speaker's summaries in chronological order.
    pub fn speaker_summaries(&self, speaker: &str) -> Vec<String> {
        self.chunks
            .iter()
            .filter_map(|c| c.per_speaker.get(speaker).cloned())
            .collect()
    }

    pub fn speakers(&self) -> BTreeSet<String> {
        self.chunks
            .iter()
            .flat_map(|c| c.per_speaker.keys().cloned())
            .collect()
    }
}

/// Chunks the conversation, regroups topics and summarises every chunk.
///
/// `progress` counts finished chunks; it is checked for cancellation before
/// each chunk starts. The job fails only when every chunk fails.
pub async fn summarize_conversation(
    conversation: &ConversationRecord,
    labels: &LabelContext,
    chat_lm: &dyn LanguageModel,
    embed_lm: &dyn LanguageModel,
    template: &str,
    params: &SummarizeParams,
    progress: Arc<Progress>,
) -> Result<ConversationSummary, SummarizeError> {
    if conversation.turns.is_empty() {
        return Err(ChunkError::EmptyConversation.into());
    }
    let plan = if conversation.turns.len() == 1 {
        ChunkPlan::single(1)
    } else {
        let (chunks, groups) = match plan_conversation(conversation, embed_lm, &params.chunking).await {
            Err(ChunkError::Lm(LmError::Cancelled)) => return Err(SummarizeError::Cancelled),
            other => other?,
        };
        ChunkPlan::new(&chunks, &groups)
    };
    progress.set_total(plan.chunks.len());

    let group_of: BTreeMap<usize, usize> = plan
        .groups
        .iter()
        .flat_map(|g| g.chunks.iter().map(move |c| (*c, g.id)))
        .collect();
    let results: Vec<Result<ToxicAwareSummary, SummarizeError>> = stream::iter(plan.chunks.clone())
        .map(|span| {
            let progress = Arc::clone(&progress);
            let group_id = group_of[&span.id];
            let turns = &conversation.turns[span.start..=span.end];
            async move {
                if progress.is_cancelled() {
                    return Err(SummarizeError::Cancelled);
                }
                let input = ChunkInput {
                    conversation_key: &conversation.key,
                    group_id,
                    chunk_id: span.id,
                    start: span.start,
                    turns,
                };
                let summary = summarize_chunk(input, labels, template, chat_lm).await;
                if summary.is_ok() {
                    progress.advance();
                }
                summary
            }
        })
        .buffered(params.parallelism.max(1))
        .collect()
        .await;

    let mut chunks = Vec::with_capacity(results.len());
    for result in results {
        chunks.push(result?);
    }
    if chunks.iter().all(ToxicAwareSummary::failed) {
        let first = chunks
            .iter()
            .flat_map(|c| c.failed_speakers.values())
            .next()
            .cloned()
            .unwrap_or_default();
        return Err(SummarizeError::AllChunksFailed(first));
    }
    Ok(ConversationSummary {
        conversation_key: conversation.key.clone(),
        plan,
        chunks,
    })
}

/// Snapshot of a summarization job for polling clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryJob {
    pub job_id: String,
    pub total_chunks: usize,
    pub completed_chunks: usize,
    pub state: JobState,
}

impl SummaryJob {
    pub fn snapshot(job_id: &str, progress: &Progress, state: JobState) -> Self {
        let (completed_chunks, total_chunks) = progress.counts();
        Self {
            job_id: job_id.to_string(),
            total_chunks,
            completed_chunks,
            state,
        }
    }

    pub fn progress(&self) -> f64 {
        if self.state == JobState::Done {
            1.0
        } else if self.total_chunks == 0 {
            0.0
        } else {
            self.completed_chunks as f64 / self.total_chunks as f64
        }
    }
}
