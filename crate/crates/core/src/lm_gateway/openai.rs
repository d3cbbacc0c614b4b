use std::time::Duration;

use async_trait::async_trait;
use futures::StreamExt;
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;

use super::{
    l2_normalize, Capability, ChatMessage, ChatParams, DeltaSink, LanguageModel, LmError,
    ProviderSpec, RetryPolicy, TokenScore,
};
use crate::hashing::content_hash;

/// Prompt sent for log-probability scoring: the context, a newline, then the
/// output. An empty context scores the output alone.
pub fn join_prompt(context: &str, output: &str) -> String {
    if context.is_empty() {
        output.to_string()
    } else {
        format!("{context}\n{output}")
    }
}

fn output_start_chars(context: &str) -> usize {
    if context.is_empty() {
        0
    } else {
        context.chars().count() + 1
    }
}

/// OpenAI-compatible HTTP provider.
pub struct HttpProvider {
    spec: ProviderSpec,
    client: reqwest::Client,
    permits: Semaphore,
    retry: RetryPolicy,
    api_key: Option<String>,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    max_tokens: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    stream: bool,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatChoiceMessage,
}

#[derive(Deserialize)]
struct ChatChoiceMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct StreamChunk {
    #[serde(default)]
    choices: Vec<StreamChoice>,
}

#[derive(Deserialize)]
struct StreamChoice {
    #[serde(default)]
    delta: StreamDelta,
}

#[derive(Deserialize, Default)]
struct StreamDelta {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Serialize)]
struct CompletionRequest<'a> {
    model: &'a str,
    prompt: &'a str,
    max_tokens: u32,
    echo: bool,
    logprobs: u32,
    temperature: f64,
}

#[derive(Deserialize)]
struct CompletionResponse {
    choices: Vec<CompletionChoice>,
}

#[derive(Deserialize)]
struct CompletionChoice {
    logprobs: Option<CompletionLogprobs>,
}

#[derive(Deserialize)]
struct CompletionLogprobs {
    tokens: Vec<String>,
    token_logprobs: Vec<Option<f64>>,
    text_offset: Vec<usize>,
}

#[derive(Serialize)]
struct EmbeddingRequest<'a> {
    model: &'a str,
    input: &'a [String],
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingItem>,
}

#[derive(Deserialize)]
struct EmbeddingItem {
    index: usize,
    embedding: Vec<f64>,
}

impl HttpProvider {
    pub fn new(spec: ProviderSpec, retry: RetryPolicy) -> Result<Self, LmError> {
        spec.validate()?;
        let client = reqwest::Client::builder()
            .timeout(Duration::from_secs(spec.request_timeout_secs))
            .build()
            .map_err(|e| LmError::InvalidRequest(e.to_string()))?;
        let api_key = if spec.auth_env_var.is_empty() {
            None
        } else {
            std::env::var(&spec.auth_env_var).ok()
        };
        Ok(Self {
            permits: Semaphore::new(spec.max_parallel),
            spec,
            client,
            retry,
            api_key,
        })
    }

    pub fn spec(&self) -> &ProviderSpec {
        &self.spec
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{}", self.spec.base_url.trim_end_matches('/'), path)
    }

    fn require(&self, capability: Capability) -> Result<(), LmError> {
        if self.spec.supports(capability) {
            Ok(())
        } else if capability == Capability::Logprobs {
            Err(LmError::LogprobsUnsupported(self.spec.provider_id.clone()))
        } else {
            Err(self.unsupported(capability))
        }
    }

    /// POSTs `body`, retrying transport errors, 429 and 5xx with exponential
    /// backoff. At most `max_retries + 1` attempts are made.
    async fn post<B: Serialize>(&self, path: &str, body: &B) -> Result<reqwest::Response, LmError> {
        let url = self.url(path);
        let payload =
            serde_json::to_vec(body).map_err(|e| LmError::InvalidRequest(e.to_string()))?;
        tracing::debug!(
            provider = %self.spec.provider_id,
            path,
            request_hash = %content_hash([&payload]),
            "lm request"
        );
        let mut last_error = String::new();
        for attempt in 0..=self.retry.max_retries {
            if attempt > 0 {
                tokio::time::sleep(self.retry.delay_for(attempt - 1)).await;
            }
            let mut request = self
                .client
                .post(&url)
                .header("content-type", "application/json")
                .body(payload.clone());
            if let Some(key) = &self.api_key {
                request = request.bearer_auth(key);
            }
            match request.send().await {
                Ok(response) => {
                    let status = response.status();
                    if status.is_success() {
                        return Ok(response);
                    }
                    let text = response.text().await.unwrap_or_default();
                    if status.as_u16() == 429 || status.is_server_error() {
                        last_error = format!("{status}: {text}");
                        continue;
                    }
                    if text.contains("context_length_exceeded") {
                        return Err(LmError::ContextTooLong(text));
                    }
                    return Err(LmError::Unavailable(format!("{status}: {text}")));
                }
                Err(e) => last_error = e.to_string(),
            }
        }
        Err(LmError::Unavailable(last_error))
    }

    async fn post_json<B: Serialize, R: for<'de> Deserialize<'de>>(
        &self,
        path: &str,
        body: &B,
    ) -> Result<R, LmError> {
        let response = self.post(path, body).await?;
        let bytes = response
            .bytes()
            .await
            .map_err(|e| LmError::Unavailable(e.to_string()))?;
        tracing::debug!(
            provider = %self.spec.provider_id,
            response_hash = %content_hash([&bytes]),
            "lm response"
        );
        serde_json::from_slice(&bytes).map_err(|e| LmError::InvalidResponse(e.to_string()))
    }

    fn to_nats(&self, logprob: f64) -> f64 {
        match self.spec.logprob_base {
            Some(base) => logprob * base.ln(),
            None => logprob,
        }
    }
}

#[async_trait]
impl LanguageModel for HttpProvider {
    fn id(&self) -> &str {
        &self.spec.provider_id
    }

    fn supports(&self, capability: Capability) -> bool {
        self.spec.supports(capability)
    }

    async fn chat(&self, messages: &[ChatMessage], params: &ChatParams) -> Result<String, LmError> {
        self.require(Capability::Chat)?;
        let _permit = self.permits.acquire().await.map_err(|_| LmError::Cancelled)?;
        let request = ChatRequest {
            model: &self.spec.model_name,
            messages,
            temperature: params.temperature,
            max_tokens: params.max_tokens,
            seed: params.seed,
            stream: false,
        };
        let response: ChatResponse = self.post_json("chat/completions", &request).await?;
        response
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| LmError::InvalidResponse("no completion choice".into()))
    }

    async fn stream_chat(
        &self,
        messages: &[ChatMessage],
        params: &ChatParams,
        sink: &mut DeltaSink<'_>,
    ) -> Result<String, LmError> {
        self.require(Capability::Stream)?;
        let _permit = self.permits.acquire().await.map_err(|_| LmError::Cancelled)?;
        let request = ChatRequest {
            model: &self.spec.model_name,
            messages,
            temperature: params.temperature,
            max_tokens: params.max_tokens,
            seed: params.seed,
            stream: true,
        };
        let response = self.post("chat/completions", &request).await?;
        let mut body = response.bytes_stream();
        let mut buffer: Vec<u8> = Vec::new();
        let mut text = String::new();
        loop {
            let Some(next) = body.next().await else {
                return Err(LmError::StreamInterrupted { partial: text });
            };
            let bytes = match next {
                Ok(bytes) => bytes,
                Err(_) => return Err(LmError::StreamInterrupted { partial: text }),
            };
            buffer.extend_from_slice(&bytes);
            while let Some(pos) = buffer.iter().position(|b| *b == b'\n') {
                let line: Vec<u8> = buffer.drain(..=pos).collect();
                let line = String::from_utf8_lossy(&line);
                let line = line.trim_end_matches(['\r', '\n']);
                let Some(data) = line.strip_prefix("data:") else {
                    continue;
                };
                let data = data.trim_start();
                if data == "[DONE]" {
                    return Ok(text);
                }
                let chunk: StreamChunk = serde_json::from_str(data)
                    .map_err(|e| LmError::InvalidResponse(e.to_string()))?;
                for choice in chunk.choices {
                    if let Some(delta) = choice.delta.content {
                        if !delta.is_empty() {
                            sink(&delta);
                            text.push_str(&delta);
                        }
                    }
                }
            }
        }
    }

    async fn score_output(&self, context: &str, output: &str) -> Result<Vec<TokenScore>, LmError> {
        self.require(Capability::Logprobs)?;
        if output.is_empty() {
            return Err(LmError::InvalidRequest("output to score is empty".into()));
        }
        let _permit = self.permits.acquire().await.map_err(|_| LmError::Cancelled)?;
        let prompt = join_prompt(context, output);
        let request = CompletionRequest {
            model: &self.spec.model_name,
            prompt: &prompt,
            max_tokens: 0,
            echo: true,
            logprobs: 0,
            temperature: 0.0,
        };
        let response: CompletionResponse = self.post_json("completions", &request).await?;
        let logprobs = response
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.logprobs)
            .ok_or_else(|| LmError::InvalidResponse("response carries no logprobs".into()))?;
        extract_output_scores(&logprobs, output_start_chars(context), |lp| self.to_nats(lp))
    }

    async fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, LmError> {
        self.require(Capability::Embeddings)?;
        if texts.is_empty() {
            return Err(LmError::InvalidRequest("no texts to embed".into()));
        }
        let _permit = self.permits.acquire().await.map_err(|_| LmError::Cancelled)?;
        let model = self
            .spec
            .embedding_model
            .as_deref()
            .unwrap_or(&self.spec.model_name);
        let response: EmbeddingResponse = self
            .post_json(
                "embeddings",
                &EmbeddingRequest {
                    model,
                    input: texts,
                },
            )
            .await?;
        let mut items = response.data;
        items.sort_by_key(|item| item.index);
        if items.len() != texts.len() {
            return Err(LmError::InvalidResponse(format!(
                "expected {} embeddings, got {}",
                texts.len(),
                items.len()
            )));
        }
        let dim = items[0].embedding.len();
        items
            .into_iter()
            .map(|item| {
                if item.embedding.len() != dim {
                    return Err(LmError::InvalidResponse("ragged embedding dimensions".into()));
                }
                l2_normalize(&item.embedding)
                    .ok_or_else(|| LmError::InvalidResponse("zero or non-finite embedding".into()))
            })
            .collect()
    }
}

/// Keeps the tokens that overlap the output span, i.e. whose end lies past
/// `output_start` (a char offset into the prompt).
fn extract_output_scores(
    logprobs: &CompletionLogprobs,
    output_start: usize,
    to_nats: impl Fn(f64) -> f64,
) -> Result<Vec<TokenScore>, LmError> {
    let n = logprobs.tokens.len();
    if logprobs.token_logprobs.len() != n || logprobs.text_offset.len() != n {
        return Err(LmError::InvalidResponse("misaligned logprob arrays".into()));
    }
    let mut scores = Vec::new();
    for i in 0..n {
        let token = &logprobs.tokens[i];
        let end = logprobs.text_offset[i] + token.chars().count();
        if end <= output_start {
            continue;
        }
        match logprobs.token_logprobs[i] {
            Some(lp) if lp.is_finite() => scores.push(TokenScore {
                token_text: token.clone(),
                logprob: to_nats(lp),
            }),
            // The first prompt token has no conditional probability.
            None if i == 0 => continue,
            _ => {
                return Err(LmError::InvalidResponse(format!(
                    "missing or non-finite logprob for token {i}"
                )))
            }
        }
    }
    if scores.is_empty() {
        return Err(LmError::InvalidResponse("no output tokens were scored".into()));
    }
    Ok(scores)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lp(tokens: &[&str], values: &[Option<f64>]) -> CompletionLogprobs {
        let mut offset = 0;
        let mut offsets = Vec::new();
        for t in tokens {
            offsets.push(offset);
            offset += t.chars().count();
        }
        CompletionLogprobs {
            tokens: tokens.iter().map(|s| s.to_string()).collect(),
            token_logprobs: values.to_vec(),
            text_offset: offsets,
        }
    }

    #[test]
    fn joins_context_and_output() {
        assert_eq!(join_prompt("", "y"), "y");
        assert_eq!(join_prompt("x", "y"), "x\ny");
        assert_eq!(output_start_chars("héllo"), 6);
    }

    #[test]
    fn keeps_only_output_tokens() {
        let l = lp(
            &["ctx", "\n", "a", "b"],
            &[None, Some(-1.0), Some(-0.5), Some(-0.25)],
        );
        let s = extract_output_scores(&l, 4, |x| x).unwrap();
        let got: Vec<f64> = s.iter().map(|t| t.logprob).collect();
        assert_eq!(got, vec![-0.5, -0.25]);
    }

    #[test]
    fn converts_log_base() {
        let l = lp(&["a"], &[Some(-1.0)]);
        let s = extract_output_scores(&l, 0, |x| x * 2f64.ln()).unwrap();
        assert!((s[0].logprob + 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn rejects_null_inside_output() {
        let l = lp(&["a", "b"], &[Some(-1.0), None]);
        assert!(extract_output_scores(&l, 0, |x| x).is_err());
    }
}
