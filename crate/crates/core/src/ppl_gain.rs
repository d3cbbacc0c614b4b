//! Leave-one-out perplexity-gain attribution.
//!
//! The model's output `Y` is scored once against the full input `X` and once
//! per unit with that unit removed. A unit's gain is how much more perplexed
//! the model becomes about `Y` without it:
//!
//! ```text
//! R(s_i) = PPL(Y | X without s_i) - PPL(Y | X),   PPL = exp(-mean logprob)
//! ```

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use futures::stream::{self, StreamExt, TryStreamExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hashing::content_hash;
use crate::lm_gateway::{Capability, LanguageModel, LmError, TokenScore};
use crate::progress::Progress;
use crate::store::ConversationRecord;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PplError {
    #[error("conversation has no turns")]
    EmptyConversation,
    #[error("no token scores")]
    EmptyScores,
    #[error("output to explain is empty")]
    EmptyOutput,
    #[error(transparent)]
    Lm(#[from] LmError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    #[default]
    Message,
    Sentence,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnitOrigin {
    /// Position of the turn in the conversation (0-based).
    pub turn: usize,
    /// Char offset of the sentence within the speaker-prefixed turn.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sentence_offset: Option<usize>,
}

/// One removable piece of the input. Concatenating `text + separator` over
/// all units in order reproduces the input exactly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributionUnit {
    /// 1-based.
    pub index: usize,
    pub text: String,
    pub separator: String,
    pub granularity: Granularity,
    pub origin: UnitOrigin,
}

/// Splits `text` after runs of `.`, `!` or `?` that are followed by
/// whitespace, never before `protect` bytes. Returns (sentence, separator,
/// offset) triples.
fn split_sentences(text: &str, protect: usize) -> Vec<(String, String, usize)> {
    let mut out = Vec::new();
    let mut start = 0;
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut i = 0;
    while i < chars.len() {
        let (pos, c) = chars[i];
        let next_is_space = chars.get(i + 1).is_some_and(|(_, n)| n.is_whitespace());
        if pos >= protect && matches!(c, '.' | '!' | '?') && next_is_space {
            let end = pos + c.len_utf8();
            let mut j = i + 1;
            while j < chars.len() && chars[j].1.is_whitespace() {
                j += 1;
            }
            let sep_end = chars.get(j).map_or(text.len(), |(p, _)| *p);
            if sep_end < text.len() {
                out.push((
                    text[start..end].to_string(),
                    text[end..sep_end].to_string(),
                    start,
                ));
                start = sep_end;
            }
            i = j;
        } else {
            i += 1;
        }
    }
    out.push((text[start..].to_string(), String::new(), start));
    out
}

/// The input text `X` as analysed: speaker-prefixed turns joined by newlines.
pub fn render_input(conversation: &ConversationRecord) -> String {
    conversation.render()
}

pub fn segment_units(
    conversation: &ConversationRecord,
    granularity: Granularity,
) -> Result<Vec<AttributionUnit>, PplError> {
    if conversation.turns.is_empty() {
        return Err(PplError::EmptyConversation);
    }
    let last_turn = conversation.turns.len() - 1;
    let mut units = Vec::new();
    for (turn, record) in conversation.turns.iter().enumerate() {
        let line = record.speaker_prefixed();
        let turn_sep = if turn == last_turn { "" } else { "\n" };
        match granularity {
            Granularity::Message => units.push(AttributionUnit {
                index: units.len() + 1,
                text: line,
                separator: turn_sep.to_string(),
                granularity,
                origin: UnitOrigin {
                    turn,
                    sentence_offset: None,
                },
            }),
            Granularity::Sentence => {
                let protect = line.len() - record.text.len();
                let pieces = split_sentences(&line, protect);
                let last_piece = pieces.len() - 1;
                for (k, (text, sep, offset)) in pieces.into_iter().enumerate() {
                    let separator = if k == last_piece { turn_sep.to_string() } else { sep };
                    units.push(AttributionUnit {
                        index: units.len() + 1,
                        text,
                        separator,
                        granularity,
                        origin: UnitOrigin {
                            turn,
                            sentence_offset: Some(line[..offset].chars().count()),
                        },
                    });
                }
            }
        }
    }
    Ok(units)
}

pub fn reconstruct(units: &[AttributionUnit]) -> String {
    units.iter().map(|u| format!("{}{}", u.text, u.separator)).collect()
}

/// Input with unit `index` (1-based) removed together with its separator.
/// Removing the final unit drops the now-dangling separator before it.
pub fn ablate(units: &[AttributionUnit], index: usize) -> String {
    let kept: Vec<&AttributionUnit> = units.iter().filter(|u| u.index != index).collect();
    let removed_last = units.last().is_some_and(|u| u.index == index);
    let mut out = String::new();
    for (k, unit) in kept.iter().enumerate() {
        out.push_str(&unit.text);
        if removed_last && k + 1 == kept.len() {
            out.push_str(&units[units.len() - 1].separator);
        } else {
            out.push_str(&unit.separator);
        }
    }
    out
}

/// `exp(-(1/T) Σ logprob)`, in nats.
pub fn perplexity(scores: &[TokenScore]) -> Result<f64, PplError> {
    if scores.is_empty() {
        return Err(PplError::EmptyScores);
    }
    let mean = scores.iter().map(|s| s.logprob).sum::<f64>() / scores.len() as f64;
    Ok((-mean).exp())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceScore {
    pub unit_index: usize,
    /// `ppl_ablated - ppl_full`.
    pub gain: f64,
    pub ppl_full: f64,
    pub ppl_ablated: f64,
}

/// Clamps negative gains to 0 and scales by the largest positive gain.
pub fn heatmap_normalize(gains: &[f64]) -> Vec<f64> {
    let max = gains.iter().copied().fold(0.0f64, f64::max);
    gains
        .iter()
        .map(|g| if max > 0.0 { g.max(0.0) / max } else { 0.0 })
        .collect()
}

/// Token scores keyed by provider and content hashes of context and output.
#[derive(Debug, Default)]
pub struct ScoreCache {
    entries: Mutex<HashMap<(String, String, String), Vec<TokenScore>>>,
}

impl ScoreCache {
    pub fn new() -> Self {
        Self::default()
    }

    fn key(provider: &str, context: &str, output: &str) -> (String, String, String) {
        (
            provider.to_string(),
            content_hash([context]),
            content_hash([output]),
        )
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Default)]
pub struct GainOptions {
    /// Scoring calls in flight at once (the provider applies its own cap too).
    pub max_concurrency: Option<usize>,
    pub cache: Option<Arc<ScoreCache>>,
    pub progress: Option<Arc<Progress>>,
}

async fn score_cached(
    lm: &dyn LanguageModel,
    context: &str,
    output: &str,
    options: &GainOptions,
) -> Result<Vec<TokenScore>, PplError> {
    let key = ScoreCache::key(lm.id(), context, output);
    if let Some(cache) = &options.cache {
        if let Some(hit) = cache.entries.lock().expect("cache lock").get(&key) {
            return Ok(hit.clone());
        }
    }
    let scores = lm.score_output(context, output).await?;
    if let Some(cache) = &options.cache {
        cache
            .entries
            .lock()
            .expect("cache lock")
            .insert(key, scores.clone());
    }
    if let Some(progress) = &options.progress {
        progress.advance();
    }
    Ok(scores)
}

/// Scores `output` against the full input and each ablation (N+1 calls
/// without a cache), returning one score per unit in index order.
pub async fn perplexity_gain(
    units: &[AttributionUnit],
    output: &str,
    lm: &dyn LanguageModel,
    options: &GainOptions,
) -> Result<Vec<RelevanceScore>, PplError> {
    if units.is_empty() {
        return Err(PplError::EmptyConversation);
    }
    if output.is_empty() {
        return Err(PplError::EmptyOutput);
    }
    if !lm.supports(Capability::Logprobs) {
        return Err(LmError::LogprobsUnsupported(lm.id().to_string()).into());
    }
    if let Some(progress) = &options.progress {
        progress.set_total(units.len() + 1);
    }
    let full = reconstruct(units);
    let contexts: Vec<String> = std::iter::once(full)
        .chain(units.iter().map(|u| ablate(units, u.index)))
        .collect();
    let limit = options.max_concurrency.unwrap_or(4).max(1);
    let ppls: Vec<f64> = stream::iter(contexts)
        .map(|context| async move {
            let scores = score_cached(lm, &context, output, options).await?;
            perplexity(&scores)
        })
        .buffered(limit)
        .try_collect()
        .await?;
    let ppl_full = ppls[0];
    Ok(units
        .iter()
        .zip(&ppls[1..])
        .map(|(unit, ppl_ablated)| RelevanceScore {
            unit_index: unit.index,
            gain: ppl_ablated - ppl_full,
            ppl_full,
            ppl_ablated: *ppl_ablated,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreEntry {
    pub index: usize,
    pub gain: f64,
    pub intensity: f64,
    pub ppl_ablated: f64,
}

/// Serialised analysis result for heatmap display.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PplReport {
    pub units: Vec<AttributionUnit>,
    pub output: String,
    pub ppl_full: f64,
    pub scores: Vec<ScoreEntry>,
}

impl PplReport {
    pub fn new(units: Vec<AttributionUnit>, output: &str, scores: &[RelevanceScore]) -> Self {
        let gains: Vec<f64> = scores.iter().map(|s| s.gain).collect();
        let intensities = heatmap_normalize(&gains);
        Self {
            units,
            output: output.to_string(),
            ppl_full: scores.first().map_or(f64::NAN, |s| s.ppl_full),
            scores: scores
                .iter()
                .zip(intensities)
                .map(|(s, intensity)| ScoreEntry {
                    index: s.unit_index,
                    gain: s.gain,
                    intensity,
                    ppl_ablated: s.ppl_ablated,
                })
                .collect(),
        }
    }
}

/// Segments, scores and normalises in one go.
pub async fn analyze(
    conversation: &ConversationRecord,
    output: &str,
    granularity: Granularity,
    lm: &dyn LanguageModel,
    options: &GainOptions,
) -> Result<PplReport, PplError> {
    let units = segment_units(conversation, granularity)?;
    let scores = perplexity_gain(&units, output, lm, options).await?;
    Ok(PplReport::new(units, output, &scores))
}
