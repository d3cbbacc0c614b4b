//! Toxic content analysis for messages and multi-turn conversations.
//!
//! The crate is organised by capability:
//!
//! - [`store`]: dataset ingestion, layout inference and persistence.
//! - [`classify`]: message-level classification backends, the voting ensemble
//!   with fallback, LLM verification and evaluation reports.
//! - [`lm_gateway`]: OpenAI-compatible client for chat, streaming, token
//!   log-probability scoring and embeddings.
//! - [`ppl_gain`]: leave-one-out perplexity gain attribution.
//! - [`chunker`]: embedding-distance segmentation and topic regrouping.
//! - [`summarize`]: label-conditioned, per-speaker chunk summaries.
//! - [`persona`]: Big-Five persona profiling from summaries.
//! - [`assistant`]: template prompts and label-aware chat sessions.

pub mod assistant;
pub mod chunker;
pub mod classify;
pub mod hashing;
pub mod lm_gateway;
pub mod persona;
pub mod ppl_gain;
pub mod progress;
pub mod store;
pub mod summarize;
pub mod template;

pub use hashing::content_hash;
pub use progress::{JobState, Progress};
