//! Embedding-distance segmentation of conversations into chunks, and
//! regrouping of non-adjacent chunks that share a topic.
//!
//! Each turn is embedded together with `window` neighbours on either side.
//! A cut is placed between turns `i` and `i+1` when their distance
//! `1 - cos(e_i, e_{i+1})` is strictly above the nearest-rank percentile of
//! all distances, subject to a minimum chunk size.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lm_gateway::{l2_normalize, LanguageModel, LmError};
use crate::store::ConversationRecord;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChunkError {
    #[error("conversation has no turns")]
    EmptyConversation,
    #[error("invalid chunker parameters: {0}")]
    InvalidParams(String),
    #[error("expected {expected} embeddings, got {got}")]
    EmbeddingCount { expected: usize, got: usize },
    #[error(transparent)]
    Lm(#[from] LmError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChunkParams {
    pub window: usize,
    pub percentile: f64,
    pub min_chunk_size: usize,
    pub merge_threshold: f64,
}

impl Default for ChunkParams {
    fn default() -> Self {
        Self {
            window: 1,
            percentile: 95.0,
            min_chunk_size: 2,
            merge_threshold: 0.85,
        }
    }
}

impl ChunkParams {
    pub fn validate(&self) -> Result<(), ChunkError> {
        if !(self.percentile > 0.0 && self.percentile <= 100.0) {
            return Err(ChunkError::InvalidParams(format!(
                "percentile {} outside (0, 100]",
                self.percentile
            )));
        }
        if self.min_chunk_size == 0 {
            return Err(ChunkError::InvalidParams("min_chunk_size must be ≥ 1".into()));
        }
        if !(self.merge_threshold > 0.0 && self.merge_threshold <= 1.0) {
            return Err(ChunkError::InvalidParams(format!(
                "merge threshold {} outside (0, 1]",
                self.merge_threshold
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Chunk {
    pub chunk_id: usize,
    /// First turn position (0-based, inclusive).
    pub start: usize,
    /// Last turn position (inclusive).
    pub end: usize,
    pub centroid: Vec<f64>,
}

impl Chunk {
    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicGroup {
    pub group_id: usize,
    /// Ascending by chunk start.
    pub member_chunk_ids: Vec<usize>,
    pub centroid: Vec<f64>,
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Speaker-prefixed text of turns `[i-w, i+w]` for each turn `i`.
pub fn window_texts(conversation: &ConversationRecord, window: usize) -> Vec<String> {
    let lines: Vec<String> = conversation
        .turns
        .iter()
        .map(|t| t.speaker_prefixed())
        .collect();
    (0..lines.len())
        .map(|i| {
            let lo = i.saturating_sub(window);
            let hi = (i + window).min(lines.len() - 1);
            lines[lo..=hi].join("\n")
        })
        .collect()
}

pub fn distances(embeddings: &[Vec<f64>]) -> Vec<f64> {
    embeddings
        .windows(2)
        .map(|pair| 1.0 - cosine(&pair[0], &pair[1]))
        .collect()
}

async fn embed_windows(
    conversation: &ConversationRecord,
    lm: &dyn LanguageModel,
    window: usize,
) -> Result<Vec<Vec<f64>>, ChunkError> {
    let texts = window_texts(conversation, window);
    let embeddings = lm.embed(&texts).await?;
    if embeddings.len() != texts.len() {
        return Err(ChunkError::EmbeddingCount {
            expected: texts.len(),
            got: embeddings.len(),
        });
    }
    Ok(embeddings)
}

/// `N - 1` consecutive-turn distances in `[0, 2]`.
pub async fn distance_series(
    conversation: &ConversationRecord,
    lm: &dyn LanguageModel,
    window: usize,
) -> Result<Vec<f64>, ChunkError> {
    if conversation.turns.len() < 2 {
        return Err(ChunkError::InvalidParams(
            "distance series needs at least two turns".into(),
        ));
    }
    Ok(distances(&embed_windows(conversation, lm, window).await?))
}

/// Nearest-rank percentile: the smallest value with at least `p`% of the
/// data at or below it.
pub fn nearest_rank(values: &[f64], p: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    // the epsilon keeps exact products such as 0.5 * 4 from rounding up
    let rank = ((p / 100.0) * n as f64 - 1e-9).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

/// Gap indices `i` (cut between turn `i` and `i+1`) kept after the
/// threshold and a left-to-right minimum-size pass.
pub fn detect_breakpoints(distances: &[f64], percentile: f64, min_chunk_size: usize) -> BTreeSet<usize> {
    let mut cuts = BTreeSet::new();
    if distances.is_empty() {
        return cuts;
    }
    let threshold = nearest_rank(distances, percentile);
    let n_turns = distances.len() + 1;
    let mut chunk_start = 0;
    for (i, d) in distances.iter().enumerate() {
        let next_start = i + 1;
        if *d > threshold
            && next_start - chunk_start >= min_chunk_size
            && n_turns - next_start >= min_chunk_size
        {
            cuts.insert(i);
            chunk_start = next_start;
        }
    }
    cuts
}

fn mean_direction(vectors: &[&Vec<f64>]) -> Vec<f64> {
    let dim = vectors[0].len();
    let mut sum = vec![0.0; dim];
    for v in vectors {
        for (s, x) in sum.iter_mut().zip(v.iter()) {
            *s += x;
        }
    }
    l2_normalize(&sum).unwrap_or_else(|| vectors[0].clone())
}

/// Cuts a conversation given one embedding per turn.
pub fn chunks_from_embeddings(
    embeddings: &[Vec<f64>],
    params: &ChunkParams,
) -> Result<Vec<Chunk>, ChunkError> {
    params.validate()?;
    if embeddings.is_empty() {
        return Err(ChunkError::EmptyConversation);
    }
    let cuts = detect_breakpoints(&distances(embeddings), params.percentile, params.min_chunk_size);
    let mut bounds: Vec<(usize, usize)> = Vec::new();
    let mut start = 0;
    for cut in &cuts {
        bounds.push((start, *cut));
        start = cut + 1;
    }
    bounds.push((start, embeddings.len() - 1));
    Ok(bounds
        .into_iter()
        .enumerate()
        .map(|(chunk_id, (start, end))| {
            let members: Vec<&Vec<f64>> = embeddings[start..=end].iter().collect();
            Chunk {
                chunk_id,
                start,
                end,
                centroid: mean_direction(&members),
            }
        })
        .collect())
}

/// Embeds windowed turns once and cuts at detected breakpoints. Centroids
/// average the same windowed embeddings.
pub async fn chunk_conversation(
    conversation: &ConversationRecord,
    lm: &dyn LanguageModel,
    params: &ChunkParams,
) -> Result<Vec<Chunk>, ChunkError> {
    params.validate()?;
    if conversation.turns.is_empty() {
        return Err(ChunkError::EmptyConversation);
    }
    let embeddings = embed_windows(conversation, lm, params.window).await?;
    chunks_from_embeddings(&embeddings, params)
}

/// Single-linkage grouping: chunks whose centroids have cosine ≥ `tau` end
/// up in the same group, transitively.
pub fn regroup_topics(chunks: &[Chunk], tau: f64) -> Vec<TopicGroup> {
    let mut ordered: Vec<&Chunk> = chunks.iter().collect();
    ordered.sort_by_key(|c| (c.start, c.chunk_id));
    let n = ordered.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for i in 0..n {
        for j in i + 1..n {
            if cosine(&ordered[i].centroid, &ordered[j].centroid) >= tau {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n];
    for i in 0..n {
        let root = find(&mut parent, i);
        members[root].push(i);
    }
    // roots are the minimum index of each set, so this is ordered by earliest member
    members
        .into_iter()
        .filter(|m| !m.is_empty())
        .enumerate()
        .map(|(group_id, idx)| {
            let centroids: Vec<&Vec<f64>> = idx.iter().map(|i| &ordered[*i].centroid).collect();
            TopicGroup {
                group_id,
                member_chunk_ids: idx.iter().map(|i| ordered[*i].chunk_id).collect(),
                centroid: mean_direction(&centroids),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkSpan {
    pub id: usize,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupSpan {
    pub id: usize,
    pub chunks: Vec<usize>,
}

/// Serialisable chunk plan consumed by summarisation and the UI.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkPlan {
    pub chunks: Vec<ChunkSpan>,
    pub groups: Vec<GroupSpan>,
}

impl ChunkPlan {
    pub fn new(chunks: &[Chunk], groups: &[TopicGroup]) -> Self {
        Self {
            chunks: chunks
                .iter()
                .map(|c| ChunkSpan {
                    id: c.chunk_id,
                    start: c.start,
                    end: c.end,
                })
                .collect(),
            groups: groups
                .iter()
                .map(|g| GroupSpan {
                    id: g.group_id,
                    chunks: g.member_chunk_ids.clone(),
                })
                .collect(),
        }
    }

    /// A plan with one chunk spanning all `n_turns` turns.
    pub fn single(n_turns: usize) -> Self {
        Self {
            chunks: vec![ChunkSpan {
                id: 0,
                start: 0,
                end: n_turns.saturating_sub(1),
            }],
            groups: vec![GroupSpan { id: 0, chunks: vec![0] }],
        }
    }
}

/// Chunks and groups a conversation in one call.
pub async fn plan_conversation(
    conversation: &ConversationRecord,
    lm: &dyn LanguageModel,
    params: &ChunkParams,
) -> Result<(Vec<Chunk>, Vec<TopicGroup>), ChunkError> {
    let chunks = chunk_conversation(conversation, lm, params).await?;
    let groups = regroup_topics(&chunks, params.merge_threshold);
    Ok((chunks, groups))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm_gateway::Capability;
    use crate::store::MessageRecord;
    use async_trait::async_trait;
    use proptest::prelude::*;

    fn unit(v: &[f64]) -> Vec<f64> {
        l2_normalize(v).unwrap()
    }

    #[test]
    fn distance_examples() {
        assert_eq!(distances(&[unit(&[1.0, 0.0]), unit(&[1.0, 0.0])]), vec![0.0]);
        assert_eq!(distances(&[unit(&[1.0, 0.0]), unit(&[0.0, 1.0])]), vec![1.0]);
        assert_eq!(distances(&[unit(&[1.0, 0.0]), unit(&[-1.0, 0.0])]), vec![2.0]);
    }

    #[test]
    fn percentile_and_breakpoints() {
        // rank = ceil(0.66 * 3) = 2 → threshold 0.1; only 0.9 exceeds it
        assert_eq!(nearest_rank(&[0.1, 0.9, 0.1], 66.0), 0.1);
        assert_eq!(detect_breakpoints(&[0.1, 0.9, 0.1], 66.0, 1), BTreeSet::from([1]));
        assert!(detect_breakpoints(&[0.5; 5], 10.0, 1).is_empty());
        assert!(detect_breakpoints(&[0.0, 1.0, 0.0, 1.0, 0.0], 10.0, 6).is_empty());
        assert_eq!(nearest_rank(&[4.0, 1.0, 3.0, 2.0], 50.0), 2.0);
        assert_eq!(nearest_rank(&[4.0, 1.0, 3.0, 2.0], 100.0), 4.0);
    }

    #[test]
    fn cut_semantics() {
        let a = unit(&[1.0, 0.0]);
        let b = unit(&[0.0, 1.0]);
        let emb = vec![a.clone(), a.clone(), a, b.clone(), b.clone(), b];
        let params = ChunkParams {
            percentile: 50.0,
            ..ChunkParams::default()
        };
        let chunks = chunks_from_embeddings(&emb, &params).unwrap();
        let spans: Vec<_> = chunks.iter().map(|c| (c.start, c.end)).collect();
        assert_eq!(spans, [(0, 2), (3, 5)]);
        assert_eq!(chunks[1].centroid, vec![0.0, 1.0]);
        let single = chunks_from_embeddings(&[unit(&[1.0, 2.0])], &params).unwrap();
        assert_eq!((single[0].start, single[0].end), (0, 0));
    }

    fn chunk(id: usize, start: usize, centroid: Vec<f64>) -> Chunk {
        Chunk {
            chunk_id: id,
            start,
            end: start,
            centroid,
        }
    }

    #[test]
    fn interrupted_topic_rejoins() {
        let a = unit(&[1.0, 0.0, 0.0]);
        let a2 = unit(&[0.95, (1.0f64 - 0.95 * 0.95).sqrt(), 0.0]);
        let b = unit(&[0.1, 0.0, (1.0f64 - 0.01).sqrt()]);
        let chunks = vec![chunk(0, 0, a), chunk(1, 1, b), chunk(2, 2, a2)];
        let groups = regroup_topics(&chunks, 0.85);
        let members: Vec<_> = groups.iter().map(|g| g.member_chunk_ids.clone()).collect();
        assert_eq!(members, [vec![0, 2], vec![1]]);
        assert_eq!(regroup_topics(&chunks, 1.0).len(), 3);
        let same: Vec<_> = (0..4).map(|i| chunk(i, i, unit(&[1.0, 1.0]))).collect();
        assert_eq!(regroup_topics(&same, 0.85).len(), 1);

        let plan = ChunkPlan::new(&chunks, &groups);
        let json = serde_json::to_value(&plan).unwrap();
        assert_eq!(json["groups"][0]["chunks"], serde_json::json!([0, 2]));
        assert_eq!(json["chunks"][1], serde_json::json!({"id": 1, "start": 1, "end": 1}));
    }

    #[test]
    fn params_validation() {
        assert!(ChunkParams::default().validate().is_ok());
        for bad in [
            ChunkParams { percentile: 0.0, ..Default::default() },
            ChunkParams { percentile: 101.0, ..Default::default() },
            ChunkParams { min_chunk_size: 0, ..Default::default() },
            ChunkParams { merge_threshold: 0.0, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    struct Axis;

    #[async_trait]
    impl LanguageModel for Axis {
        fn id(&self) -> &str {
            "axis"
        }
        fn supports(&self, c: Capability) -> bool {
            c == Capability::Embeddings
        }
        async fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, LmError> {
            Ok(texts
                .iter()
                .map(|t| if t.contains("cats") { vec![1.0, 0.0] } else { vec![0.0, 1.0] })
                .collect())
        }
    }

    #[tokio::test]
    async fn windows_and_end_to_end() {
        let turns = ["cats a", "cats b", "cats c", "dogs a", "dogs b", "dogs c"]
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let mut r = MessageRecord::new(format!("m{i}"), *t);
                r.speaker = Some("s".into());
                r
            })
            .collect();
        let conv = ConversationRecord::from_turns("c", turns);
        let w = window_texts(&conv, 1);
        assert_eq!(w[0], "s: cats a\ns: cats b");
        assert_eq!(w[5], "s: dogs b\ns: dogs c");
        let params = ChunkParams { window: 0, percentile: 50.0, ..Default::default() };
        let d = distance_series(&conv, &Axis, 0).await.unwrap();
        assert_eq!(d, vec![0.0, 0.0, 1.0, 0.0, 0.0]);
        let (chunks, groups) = plan_conversation(&conv, &Axis, &params).await.unwrap();
        assert_eq!(chunks.len(), 2);
        assert_eq!(groups.len(), 2);
    }

    fn embedding_seq() -> impl Strategy<Value = Vec<Vec<f64>>> {
        (1usize..=50).prop_flat_map(|n| {
            proptest::collection::vec(proptest::collection::vec(-1.0f64..1.0, 3), n)
                .prop_map(|vs| vs.into_iter().map(|v| l2_normalize(&v).unwrap_or(vec![1.0, 0.0, 0.0])).collect())
        })
    }

    proptest! {
        #[test]
        fn partition_tiles_turns(emb in embedding_seq(), p in 1.0f64..=100.0, min in 1usize..5) {
            let params = ChunkParams { percentile: p, min_chunk_size: min, ..Default::default() };
            let chunks = chunks_from_embeddings(&emb, &params).unwrap();
            let mut next = 0;
            for c in &chunks {
                prop_assert_eq!(c.start, next);
                prop_assert!(c.start <= c.end);
                prop_assert!((c.centroid.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-9);
                next = c.end + 1;
            }
            prop_assert_eq!(next, emb.len());
        }

        #[test]
        fn higher_percentile_never_adds_breakpoints(
            d in proptest::collection::vec(0.0f64..2.0, 1..50),
            p1 in 1.0f64..=100.0,
            p2 in 1.0f64..=100.0,
            min in 1usize..4,
        ) {
            let (lo, hi) = if p1 <= p2 { (p1, p2) } else { (p2, p1) };
            prop_assert!(detect_breakpoints(&d, hi, min).len() <= detect_breakpoints(&d, lo, min).len());
        }

        #[test]
        fn regroup_ignores_input_order(emb in embedding_seq(), seed in any::<u64>(), tau in 0.1f64..=1.0) {
            let chunks: Vec<Chunk> = emb.into_iter().enumerate().map(|(i, v)| chunk(i, i, v)).collect();
            let base = regroup_topics(&chunks, tau);
            let mut shuffled = chunks.clone();
            let mut state = seed;
            for i in (1..shuffled.len()).rev() {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                shuffled.swap(i, (state >> 33) as usize % (i + 1));
            }
            prop_assert_eq!(&regroup_topics(&shuffled, tau), &base);
            for g in &base {
                prop_assert!(g.member_chunk_ids.windows(2).all(|w| w[0] < w[1]));
            }
        }
    }
}
