//! Uniform client for language-model providers.
//!
//! Every provider speaks the OpenAI-compatible wire protocol
//! (`/chat/completions`, `/completions`, `/embeddings`). Downstream modules
//! only see the [`LanguageModel`] trait, so tests can substitute in-process
//! fakes and the service can wrap providers (for example with
//! [`CancellableLm`]).

mod openai;

use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::progress::Progress;

pub use openai::{join_prompt, HttpProvider};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LmError {
    #[error("language model unavailable: {0}")]
    Unavailable(String),
    #[error("context too long: {0}")]
    ContextTooLong(String),
    #[error("stream interrupted after {} bytes", partial.len())]
    StreamInterrupted { partial: String },
    #[error("provider `{0}` does not support log-probability scoring")]
    LogprobsUnsupported(String),
    #[error("provider `{provider}` lacks the `{capability}` capability")]
    Unsupported {
        provider: String,
        capability: Capability,
    },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("invalid response from provider: {0}")]
    InvalidResponse(String),
    #[error("unknown provider `{0}`")]
    UnknownProvider(String),
    #[error("operation cancelled")]
    Cancelled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Capability {
    Chat,
    Stream,
    Logprobs,
    Embeddings,
}

impl std::fmt::Display for Capability {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            Capability::Chat => "chat",
            Capability::Stream => "stream",
            Capability::Logprobs => "logprobs",
            Capability::Embeddings => "embeddings",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatParams {
    pub temperature: f64,
    pub max_tokens: Option<u32>,
    pub seed: Option<u64>,
}

impl Default for ChatParams {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            max_tokens: None,
            seed: None,
        }
    }
}

/// Log-probability of one output token, in nats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenScore {
    pub token_text: String,
    pub logprob: f64,
}

fn default_max_parallel() -> usize {
    4
}

fn default_timeout_secs() -> u64 {
    120
}

/// One configured provider endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderSpec {
    pub provider_id: String,
    /// Base URL including the API version prefix, e.g. `http://localhost:11434/v1`.
    pub base_url: String,
    pub model_name: String,
    /// Embedding model, when it differs from `model_name`.
    #[serde(default)]
    pub embedding_model: Option<String>,
    /// Environment variable holding the API key. Empty for local runners.
    #[serde(default)]
    pub auth_env_var: String,
    pub capabilities: BTreeSet<Capability>,
    #[serde(default = "default_max_parallel")]
    pub max_parallel: usize,
    /// Base of the logarithms reported by the provider. `None` means natural log.
    #[serde(default)]
    pub logprob_base: Option<f64>,
    #[serde(default = "default_timeout_secs")]
    pub request_timeout_secs: u64,
}

impl ProviderSpec {
    pub fn validate(&self) -> Result<(), LmError> {
        if self.capabilities.is_empty() {
            return Err(LmError::InvalidRequest(format!(
                "provider `{}` declares no capabilities",
                self.provider_id
            )));
        }
        if self.max_parallel == 0 {
            return Err(LmError::InvalidRequest(format!(
                "provider `{}` needs max_parallel >= 1",
                self.provider_id
            )));
        }
        if let Some(base) = self.logprob_base {
            if !(base.is_finite() && base > 1.0) {
                return Err(LmError::InvalidRequest(format!(
                    "provider `{}` has invalid logprob_base {base}",
                    self.provider_id
                )));
            }
        }
        Ok(())
    }

    pub fn supports(&self, capability: Capability) -> bool {
        self.capabilities.contains(&capability)
    }
}

/// Retries apply to transport failures, 429 and 5xx responses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 2,
            base_delay_ms: 200,
        }
    }
}

impl RetryPolicy {
    pub fn delay_for(&self, retry: u32) -> Duration {
        Duration::from_millis(self.base_delay_ms.saturating_mul(1u64 << retry.min(16)))
    }
}

/// Sink receiving incremental deltas from a streamed completion.
pub type DeltaSink<'a> = dyn FnMut(&str) + Send + 'a;

#[async_trait]
pub trait LanguageModel: Send + Sync {
    fn id(&self) -> &str;

    fn supports(&self, capability: Capability) -> bool;

    async fn chat(&self, messages: &[ChatMessage], params: &ChatParams) -> Result<String, LmError> {
        let _ = (messages, params);
        Err(self.unsupported(Capability::Chat))
    }

    /// Streams a completion into `sink`. The concatenation of all deltas
    /// equals the returned text.
    async fn stream_chat(
        &self,
        messages: &[ChatMessage],
        params: &ChatParams,
        sink: &mut DeltaSink<'_>,
    ) -> Result<String, LmError> {
        let _ = (messages, params, sink);
        Err(self.unsupported(Capability::Stream))
    }

    /// Log-probabilities of the tokens of `output` conditioned on `context`.
    async fn score_output(&self, context: &str, output: &str) -> Result<Vec<TokenScore>, LmError> {
        let _ = (context, output);
        Err(LmError::LogprobsUnsupported(self.id().to_string()))
    }

    /// Unit-normalised embeddings, one per input text.
    async fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, LmError> {
        let _ = texts;
        Err(self.unsupported(Capability::Embeddings))
    }

    fn unsupported(&self, capability: Capability) -> LmError {
        LmError::Unsupported {
            provider: self.id().to_string(),
            capability,
        }
    }
}

/// Scales a vector to unit L2 norm. Returns `None` for zero or non-finite input.
pub fn l2_normalize(v: &[f64]) -> Option<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !norm.is_finite() || norm == 0.0 {
        return None;
    }
    Some(v.iter().map(|x| x / norm).collect())
}

/// Registry of configured providers.
#[derive(Default, Clone)]
pub struct Gateway {
    providers: HashMap<String, Arc<HttpProvider>>,
}

impl Gateway {
    pub fn new(specs: &[ProviderSpec], retry: RetryPolicy) -> Result<Self, LmError> {
        let mut providers = HashMap::new();
        for spec in specs {
            let provider = HttpProvider::new(spec.clone(), retry)?;
            if providers
                .insert(spec.provider_id.clone(), Arc::new(provider))
                .is_some()
            {
                return Err(LmError::InvalidRequest(format!(
                    "duplicate provider id `{}`",
                    spec.provider_id
                )));
            }
        }
        Ok(Self { providers })
    }

    pub fn provider(&self, id: &str) -> Result<Arc<HttpProvider>, LmError> {
        self.providers
            .get(id)
            .cloned()
            .ok_or_else(|| LmError::UnknownProvider(id.to_string()))
    }

    pub fn get(&self, id: &str) -> Result<Arc<dyn LanguageModel>, LmError> {
        Ok(self.provider(id)? as Arc<dyn LanguageModel>)
    }

    pub fn specs(&self) -> Vec<&ProviderSpec> {
        let mut specs: Vec<_> = self.providers.values().map(|p| p.spec()).collect();
        specs.sort_by(|a, b| a.provider_id.cmp(&b.provider_id));
        specs
    }

    pub fn is_empty(&self) -> bool {
        self.providers.is_empty()
    }
}

/// Refuses new calls once the attached [`Progress`] is cancelled.
pub struct CancellableLm {
    inner: Arc<dyn LanguageModel>,
    progress: Arc<Progress>,
}

impl CancellableLm {
    pub fn new(inner: Arc<dyn LanguageModel>, progress: Arc<Progress>) -> Self {
        Self { inner, progress }
    }

    fn check(&self) -> Result<(), LmError> {
        if self.progress.is_cancelled() {
            Err(LmError::Cancelled)
        } else {
            Ok(())
        }
    }
}

#[async_trait]
impl LanguageModel for CancellableLm {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn supports(&self, capability: Capability) -> bool {
        self.inner.supports(capability)
    }

    async fn chat(&self, messages: &[ChatMessage], params: &ChatParams) -> Result<String, LmError> {
        self.check()?;
        self.inner.chat(messages, params).await
    }

    async fn stream_chat(
        &self,
        messages: &[ChatMessage],
        params: &ChatParams,
        sink: &mut DeltaSink<'_>,
    ) -> Result<String, LmError> {
        self.check()?;
        self.inner.stream_chat(messages, params, sink).await
    }

    async fn score_output(&self, context: &str, output: &str) -> Result<Vec<TokenScore>, LmError> {
        self.check()?;
        self.inner.score_output(context, output).await
    }

    async fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, LmError> {
        self.check()?;
        self.inner.embed(texts).await
    }
}
