//! Scripted OpenAI-compatible LM server for tests and offline demos.
//!
//! Serves `/v1/chat/completions` (plain and SSE), `/v1/completions` in
//! echo + logprobs mode, `/v1/embeddings` and a classifier endpoint at
//! `/classify`. Behaviour is driven by a [`MockScript`] that can be swapped
//! at runtime through `/_mock/script`; call counters are exposed at
//! `/_mock/stats`.
//!
//! Log-probability fixtures are keyed by the SHA-256 of the scored prompt,
//! which is `output` alone for an empty context and `context + "\n" + output`
//! otherwise. Unknown prompts get deterministic hash-derived values.

use std::collections::{BTreeMap, VecDeque};
use std::net::SocketAddr;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::body::{Body, Bytes};
use axum::extract::State;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::{stream, StreamExt};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use tokio::net::TcpListener;
use tokio::task::JoinHandle;

/// Reply rule: the first rule whose `contains` occurs in the last user
/// message wins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRule {
    pub contains: String,
    pub reply: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreFixture {
    pub context: String,
    pub output: String,
    /// Natural-log probabilities of the output tokens.
    pub logprobs: Vec<f64>,
    /// Output tokenisation; defaults to an even split of `output`.
    #[serde(default)]
    pub tokens: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRule {
    pub contains: String,
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockScript {
    /// Replies consumed in order before rules and echo apply.
    pub chat_queue: VecDeque<String>,
    pub chat_rules: Vec<ChatRule>,
    /// Explicit deltas for streamed replies; otherwise replies stream word by word.
    pub stream_chunks: Option<Vec<String>>,
    /// Drop the stream after this many deltas, without `[DONE]`.
    pub disconnect_after: Option<usize>,
    pub scores: Vec<ScoreFixture>,
    pub embeddings: BTreeMap<String, Vec<f64>>,
    pub embedding_rules: Vec<EmbeddingRule>,
    pub embedding_dim: usize,
    /// Label count per classifier schema.
    pub classifier_widths: BTreeMap<String, usize>,
    /// Texts containing any of these lean towards label 0.
    pub classifier_keywords: Vec<String>,
    /// Fail this many upcoming requests with `fail_status`.
    pub fail_next: u32,
    pub always_fail: bool,
    pub fail_status: u16,
    pub delay_ms: u64,
    /// Reject chat requests whose total message length exceeds this.
    pub max_context_chars: Option<usize>,
}

impl Default for MockScript {
    fn default() -> Self {
        Self {
            chat_queue: VecDeque::new(),
            chat_rules: Vec::new(),
            stream_chunks: None,
            disconnect_after: None,
            scores: Vec::new(),
            embeddings: BTreeMap::new(),
            embedding_rules: Vec::new(),
            embedding_dim: 8,
            classifier_widths: [
                ("edos-binary".to_string(), 2),
                ("edos-category".to_string(), 4),
                ("edos-vector".to_string(), 11),
            ]
            .into(),
            classifier_keywords: Vec::new(),
            fail_next: 0,
            always_fail: false,
            fail_status: 500,
            delay_ms: 0,
            max_context_chars: None,
        }
    }
}

impl MockScript {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn from_file(path: impl AsRef<Path>) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(std::io::Error::other)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MockStats {
    pub chat_calls: u64,
    pub stream_calls: u64,
    pub completion_calls: u64,
    pub embedding_calls: u64,
    pub classify_calls: u64,
    /// Requests rejected by failure injection.
    pub injected_failures: u64,
    pub in_flight: u64,
    pub max_in_flight: u64,
    /// Bodies of recent chat requests (newest last, at most 100).
    pub recent_chat_requests: Vec<Value>,
}

impl MockStats {
    pub fn lm_calls(&self) -> u64 {
        self.chat_calls + self.stream_calls + self.completion_calls + self.embedding_calls
    }
}

#[derive(Default)]
struct Shared {
    script: Mutex<MockScript>,
    stats: Mutex<MockStats>,
}

type AppState = Arc<Shared>;

const STREAM_PACE: Duration = Duration::from_millis(2);

/// Running mock server; stops when dropped.
pub struct MockLm {
    addr: SocketAddr,
    shared: AppState,
    task: JoinHandle<()>,
}

impl MockLm {
    /// Binds an ephemeral localhost port.
    pub async fn start(script: MockScript) -> std::io::Result<Self> {
        Self::bind("127.0.0.1:0".parse().expect("literal address"), script).await
    }

    pub async fn bind(addr: SocketAddr, script: MockScript) -> std::io::Result<Self> {
        let listener = TcpListener::bind(addr).await?;
        let addr = listener.local_addr()?;
        let shared: AppState = Arc::new(Shared {
            script: Mutex::new(script),
            stats: Mutex::new(MockStats::default()),
        });
        let app = router(shared.clone());
        let task = tokio::spawn(async move {
            let _ = axum::serve(listener, app).await;
        });
        Ok(Self { addr, shared, task })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Base URL for OpenAI-compatible clients (ends in `/v1`).
    pub fn base_url(&self) -> String {
        format!("http://{}/v1", self.addr)
    }

    pub fn classify_url(&self) -> String {
        format!("http://{}/classify", self.addr)
    }

    pub fn stats(&self) -> MockStats {
        self.shared.stats.lock().expect("stats lock").clone()
    }

    pub fn reset_stats(&self) {
        *self.shared.stats.lock().expect("stats lock") = MockStats::default();
    }

    pub fn set_script(&self, script: MockScript) {
        *self.shared.script.lock().expect("script lock") = script;
    }

    pub fn update_script(&self, f: impl FnOnce(&mut MockScript)) {
        f(&mut self.shared.script.lock().expect("script lock"));
    }

    /// Serves until the task is aborted; for the CLI.
    pub async fn wait(mut self) {
        let _ = (&mut self.task).await;
    }
}

impl Drop for MockLm {
    fn drop(&mut self) {
        self.task.abort();
    }
}

fn router(state: AppState) -> Router {
    Router::new()
        .route("/v1/chat/completions", post(chat))
        .route("/v1/completions", post(completions))
        .route("/v1/embeddings", post(embeddings))
        .route("/classify", post(classify))
        .route("/v1/classify", post(classify))
        .route("/_mock/stats", get(stats))
        .route("/_mock/script", post(replace_script).get(current_script))
        .route("/_mock/reset", post(reset))
        .with_state(state)
}

/// SHA-256 (hex) of the prompt scored for `(context, output)`.
pub fn prompt_key(context: &str, output: &str) -> String {
    let prompt = if context.is_empty() {
        output.to_string()
    } else {
        format!("{context}\n{output}")
    };
    sha256_hex(prompt.as_bytes())
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn unit_from_hash(parts: &[&[u8]]) -> f64 {
    let mut hasher = Sha256::new();
    for p in parts {
        hasher.update((p.len() as u64).to_le_bytes());
        hasher.update(p);
    }
    let d = hasher.finalize();
    u32::from_be_bytes([d[0], d[1], d[2], d[3]]) as f64 / u32::MAX as f64
}

/// Splits `text` after each whitespace run, so a newline always ends a token.
pub fn whitespace_tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut current = String::new();
    let mut in_space = false;
    for c in text.chars() {
        if in_space && !c.is_whitespace() {
            out.push(std::mem::take(&mut current));
        }
        in_space = c.is_whitespace();
        current.push(c);
    }
    if !current.is_empty() {
        out.push(current);
    }
    out
}

/// Splits `text` into `n` non-empty pieces of near-equal char length.
fn even_split(text: &str, n: usize) -> Option<Vec<String>> {
    let chars: Vec<char> = text.chars().collect();
    if n == 0 || chars.len() < n {
        return None;
    }
    let base = chars.len() / n;
    let extra = chars.len() % n;
    let mut out = Vec::with_capacity(n);
    let mut at = 0;
    for i in 0..n {
        let len = base + usize::from(i < extra);
        out.push(chars[at..at + len].iter().collect());
        at += len;
    }
    Some(out)
}

fn fixture_tokens(fixture: &ScoreFixture) -> Option<Vec<String>> {
    let n = fixture.logprobs.len();
    match &fixture.tokens {
        Some(tokens) if tokens.len() == n && tokens.concat() == fixture.output => Some(tokens.clone()),
        Some(_) => None,
        None => {
            let words = whitespace_tokens(&fixture.output);
            if words.len() == n {
                Some(words)
            } else {
                even_split(&fixture.output, n)
            }
        }
    }
}

/// Deterministic stand-in logprob in `[-2.05, -0.05]`.
pub fn fallback_logprob(prompt: &str, index: usize) -> f64 {
    -(0.05 + 2.0 * unit_from_hash(&[prompt.as_bytes(), &index.to_le_bytes()]))
}

/// Deterministic stand-in embedding (not normalised).
pub fn fallback_embedding(text: &str, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|i| 2.0 * unit_from_hash(&[text.as_bytes(), &i.to_le_bytes()]) - 1.0)
        .collect()
}

fn error_response(status: StatusCode, code: &str, message: &str) -> Response {
    (
        status,
        Json(json!({"error": {"message": message, "type": code, "code": code}})),
    )
        .into_response()
}

struct InFlight(AppState);

impl InFlight {
    fn enter(state: &AppState) -> Self {
        let mut s = state.stats.lock().expect("stats lock");
        s.in_flight += 1;
        s.max_in_flight = s.max_in_flight.max(s.in_flight);
        Self(state.clone())
    }
}

impl Drop for InFlight {
    fn drop(&mut self) {
        self.0.stats.lock().expect("stats lock").in_flight -= 1;
    }
}

/// Applies delay and failure injection. Returns a response when the request
/// must fail.
async fn gate(state: &AppState) -> Option<Response> {
    let (delay, fail, status) = {
        let mut script = state.script.lock().expect("script lock");
        let fail = script.always_fail || script.fail_next > 0;
        if script.fail_next > 0 {
            script.fail_next -= 1;
        }
        (script.delay_ms, fail, script.fail_status)
    };
    if delay > 0 {
        tokio::time::sleep(Duration::from_millis(delay)).await;
    }
    if fail {
        state.stats.lock().expect("stats lock").injected_failures += 1;
        let status = StatusCode::from_u16(status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        return Some(error_response(status, "injected_failure", "scripted failure"));
    }
    None
}

#[derive(Deserialize)]
struct ChatMessageIn {
    role: String,
    #[serde(default)]
    content: String,
}

#[derive(Deserialize)]
struct ChatRequestIn {
    messages: Vec<ChatMessageIn>,
    #[serde(default)]
    max_tokens: Option<usize>,
    #[serde(default)]
    stream: bool,
}

fn choose_reply(script: &mut MockScript, last_user: &str) -> String {
    if let Some(reply) = script.chat_queue.pop_front() {
        return reply;
    }
    script
        .chat_rules
        .iter()
        .find(|r| last_user.contains(&r.contains))
        .map(|r| r.reply.clone())
        .unwrap_or_else(|| last_user.to_string())
}

fn truncate_tokens(reply: &str, max_tokens: Option<usize>) -> String {
    match max_tokens {
        Some(n) => whitespace_tokens(reply).into_iter().take(n).collect::<String>(),
        None => reply.to_string(),
    }
}

fn sse_line(value: &Value) -> Bytes {
    Bytes::from(format!("data: {value}\n\n"))
}

async fn chat(State(state): State<AppState>, Json(body): Json<Value>) -> Response {
    let _guard = InFlight::enter(&state);
    let request: ChatRequestIn = match serde_json::from_value(body.clone()) {
        Ok(r) => r,
        Err(e) => return error_response(StatusCode::BAD_REQUEST, "invalid_request", &e.to_string()),
    };
    {
        let mut stats = state.stats.lock().expect("stats lock");
        if request.stream {
            stats.stream_calls += 1;
        } else {
            stats.chat_calls += 1;
        }
        stats.recent_chat_requests.push(body);
        if stats.recent_chat_requests.len() > 100 {
            stats.recent_chat_requests.remove(0);
        }
    }
    if let Some(failure) = gate(&state).await {
        return failure;
    }
    let (reply, chunks, disconnect_after) = {
        let mut script = state.script.lock().expect("script lock");
        if let Some(limit) = script.max_context_chars {
            let total: usize = request.messages.iter().map(|m| m.content.chars().count()).sum();
            if total > limit {
                return error_response(
                    StatusCode::BAD_REQUEST,
                    "context_length_exceeded",
                    &format!("{total} chars exceed the {limit}-char context"),
                );
            }
        }
        let last_user = request
            .messages
            .iter()
            .rev()
            .find(|m| m.role == "user")
            .map(|m| m.content.as_str())
            .unwrap_or("");
        let reply = truncate_tokens(&choose_reply(&mut script, last_user), request.max_tokens);
        (reply, script.stream_chunks.clone(), script.disconnect_after)
    };

    if !request.stream {
        return Json(json!({
            "id": "mock-chat",
            "object": "chat.completion",
            "choices": [{"index": 0, "message": {"role": "assistant", "content": reply}, "finish_reason": "stop"}],
        }))
        .into_response();
    }

    let deltas = chunks.unwrap_or_else(|| whitespace_tokens(&reply));
    let mut events: Vec<Result<Bytes, std::io::Error>> = Vec::new();
    for (i, delta) in deltas.iter().enumerate() {
        if disconnect_after == Some(i) {
            events.push(Err(std::io::Error::other("scripted disconnect")));
            break;
        }
        events.push(Ok(sse_line(&json!({
            "object": "chat.completion.chunk",
            "choices": [{"index": 0, "delta": {"content": delta}}],
        }))));
    }
    if disconnect_after.is_none_or(|k| k >= deltas.len()) {
        if disconnect_after.is_some() {
            events.push(Err(std::io::Error::other("scripted disconnect")));
        } else {
            events.push(Ok(Bytes::from_static(b"data: [DONE]\n\n")));
        }
    }
    Response::builder()
        .header(header::CONTENT_TYPE, "text/event-stream")
        .body(Body::from_stream(stream::iter(events).then(|event| async move {
            tokio::time::sleep(STREAM_PACE).await;
            event
        })))
        .expect("valid response")
}

#[derive(Deserialize)]
struct CompletionRequestIn {
    prompt: String,
    #[serde(default)]
    echo: bool,
    #[serde(default)]
    logprobs: Option<u32>,
}

async fn completions(State(state): State<AppState>, Json(request): Json<CompletionRequestIn>) -> Response {
    let _guard = InFlight::enter(&state);
    state.stats.lock().expect("stats lock").completion_calls += 1;
    if let Some(failure) = gate(&state).await {
        return failure;
    }
    if !request.echo || request.logprobs.is_none() {
        return error_response(
            StatusCode::BAD_REQUEST,
            "invalid_request",
            "the mock only supports echo + logprobs scoring",
        );
    }
    let key = sha256_hex(request.prompt.as_bytes());
    let fixture = {
        let script = state.script.lock().expect("script lock");
        script
            .scores
            .iter()
            .find(|f| prompt_key(&f.context, &f.output) == key)
            .cloned()
    };
    let mut tokens: Vec<String> = Vec::new();
    let mut logprobs: Vec<Option<f64>> = Vec::new();
    match fixture {
        Some(fixture) => {
            let Some(output_tokens) = fixture_tokens(&fixture) else {
                return error_response(
                    StatusCode::BAD_REQUEST,
                    "invalid_fixture",
                    "fixture tokens do not match its logprobs",
                );
            };
            if !fixture.context.is_empty() {
                tokens.push(format!("{}\n", fixture.context));
                logprobs.push(None);
            }
            tokens.extend(output_tokens);
            logprobs.extend(fixture.logprobs.iter().map(|l| Some(*l)));
        }
        None => {
            tokens = whitespace_tokens(&request.prompt);
            logprobs = (0..tokens.len())
                .map(|i| (i > 0).then(|| fallback_logprob(&request.prompt, i)))
                .collect();
            if tokens.len() == 1 {
                logprobs[0] = Some(fallback_logprob(&request.prompt, 0));
            }
        }
    }
    let mut offsets = Vec::with_capacity(tokens.len());
    let mut at = 0;
    for t in &tokens {
        offsets.push(at);
        at += t.chars().count();
    }
    Json(json!({
        "id": "mock-completion",
        "object": "text_completion",
        "choices": [{
            "index": 0,
            "text": request.prompt,
            "logprobs": {"tokens": tokens, "token_logprobs": logprobs, "text_offset": offsets},
            "finish_reason": "length",
        }],
    }))
    .into_response()
}

#[derive(Deserialize)]
#[serde(untagged)]
enum EmbeddingInput {
    One(String),
    Many(Vec<String>),
}

#[derive(Deserialize)]
struct EmbeddingRequestIn {
    input: EmbeddingInput,
}

async fn embeddings(State(state): State<AppState>, Json(request): Json<EmbeddingRequestIn>) -> Response {
    let _guard = InFlight::enter(&state);
    state.stats.lock().expect("stats lock").embedding_calls += 1;
    if let Some(failure) = gate(&state).await {
        return failure;
    }
    let texts = match request.input {
        EmbeddingInput::One(t) => vec![t],
        EmbeddingInput::Many(ts) => ts,
    };
    let script = state.script.lock().expect("script lock").clone();
    let data: Vec<Value> = texts
        .iter()
        .enumerate()
        .map(|(index, text)| {
            let vector = script
                .embeddings
                .get(text)
                .cloned()
                .or_else(|| {
                    script
                        .embedding_rules
                        .iter()
                        .find(|r| text.contains(&r.contains))
                        .map(|r| r.vector.clone())
                })
                .unwrap_or_else(|| fallback_embedding(text, script.embedding_dim.max(1)));
            json!({"object": "embedding", "index": index, "embedding": vector})
        })
        .collect();
    Json(json!({"object": "list", "data": data})).into_response()
}

#[derive(Deserialize)]
struct ClassifyRequestIn {
    texts: Vec<String>,
    schema_id: String,
}

async fn classify(State(state): State<AppState>, Json(request): Json<ClassifyRequestIn>) -> Response {
    let _guard = InFlight::enter(&state);
    state.stats.lock().expect("stats lock").classify_calls += 1;
    if let Some(failure) = gate(&state).await {
        return failure;
    }
    let script = state.script.lock().expect("script lock").clone();
    let Some(width) = script.classifier_widths.get(&request.schema_id).copied() else {
        return error_response(StatusCode::BAD_REQUEST, "unknown_schema", &request.schema_id);
    };
    let scores: Vec<Vec<f64>> = request
        .texts
        .iter()
        .map(|text| {
            let lowered = text.to_lowercase();
            let hit = script
                .classifier_keywords
                .iter()
                .any(|k| lowered.contains(&k.to_lowercase()));
            (0..width)
                .map(|i| {
                    let base = 4.0 * unit_from_hash(&[text.as_bytes(), &i.to_le_bytes()]) - 2.0;
                    if hit && i == 0 {
                        base + 5.0
                    } else {
                        base
                    }
                })
                .collect()
        })
        .collect();
    Json(json!({"scores": scores})).into_response()
}

async fn stats(State(state): State<AppState>) -> Json<MockStats> {
    Json(state.stats.lock().expect("stats lock").clone())
}

async fn current_script(State(state): State<AppState>) -> Json<MockScript> {
    Json(state.script.lock().expect("script lock").clone())
}

async fn replace_script(State(state): State<AppState>, Json(script): Json<MockScript>) -> StatusCode {
    *state.script.lock().expect("script lock") = script;
    StatusCode::NO_CONTENT
}

async fn reset(State(state): State<AppState>) -> StatusCode {
    *state.stats.lock().expect("stats lock") = MockStats::default();
    StatusCode::NO_CONTENT
}

/// Fixture helpers shared by tests.
pub mod fixtures {
    use super::ScoreFixture;

    pub fn score(context: &str, output: &str, logprobs: &[f64]) -> ScoreFixture {
        ScoreFixture {
            context: context.to_string(),
            output: output.to_string(),
            logprobs: logprobs.to_vec(),
            tokens: None,
        }
    }
}
