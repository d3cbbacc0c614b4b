#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use reqwest::multipart::{Form, Part};
use serde_json::Value;
use toxlens_mock::{ChatRule, MockLm, MockScript};
use toxlens_server::{router, AppState, Config};

pub const PERSONA_REPLY: &str = "[6, 4, 7, 3, 6]\n\n\
**Openness to Experience**: Talks about several topics.\n\n\
**Conscientiousness**: Replies quickly without much care.\n\n\
**Extraversion**: Starts exchanges and addresses others directly.\n\n\
**Agreeableness**: Dismissive toward people who disagree.\n\n\
**Neuroticism**: Gets irritable when challenged.\n\n\
**Overall Persona Analysis**: Outspoken and quick to turn hostile.";

pub const SUMMARY_REPLY: &str = "The speaker chats about the match; one insulting message was flagged as sexist.";

pub fn repo_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn sample_chat() -> Vec<u8> {
    std::fs::read(repo_root().join("data/samples/chat_sample.csv")).expect("sample data")
}

/// Mock replies for the summary and persona prompts; everything else echoes.
pub fn analysis_script() -> MockScript {
    MockScript {
        chat_rules: vec![
            ChatRule {
                contains: "Big Five Personality".into(),
                reply: PERSONA_REPLY.into(),
            },
            ChatRule {
                contains: "Summarize the dialogue".into(),
                reply: SUMMARY_REPLY.into(),
            },
        ],
        ..MockScript::default()
    }
}

pub fn config_toml(mock: &MockLm, max_parallel: usize) -> String {
    format!(
        r#"
[server]
max_concurrent_jobs = 2
max_queued_jobs = 8

[defaults]
classifier = "keyword-stub"
schema = "edos-binary"

[retry]
max_retries = 0
base_delay_ms = 10

[[providers]]
provider_id = "mock"
base_url = "{url}"
model_name = "mock-model"
capabilities = ["chat", "stream", "logprobs", "embeddings"]
max_parallel = {max_parallel}
request_timeout_secs = 20

[[classifiers]]
kind = "stub"
id = "keyword-stub"
behaviour = {{ mode = "keyword", terms = ["idiot", "losers", "flagged"] }}

[[classifiers]]
kind = "stub"
id = "hashed-a"
behaviour = {{ mode = "hashed" }}

[[classifiers]]
kind = "stub"
id = "hashed-b"
behaviour = {{ mode = "hashed" }}

[[ensembles]]
id = "vote"
members = ["keyword-stub", "hashed-a", "hashed-b"]
fallback = "keyword-stub"

[summarizer]
parallelism = 2
"#,
        url = mock.base_url()
    )
}

pub struct TestServer {
    pub base: String,
    pub client: reqwest::Client,
    pub mock: MockLm,
    pub state: Arc<AppState>,
    task: tokio::task::JoinHandle<()>,
}

impl Drop for TestServer {
    fn drop(&mut self) {
        self.task.abort();
    }
}

impl TestServer {
    pub async fn start(script: MockScript) -> Self {
        Self::start_with(script, 4).await
    }

    pub async fn start_with(script: MockScript, max_parallel: usize) -> Self {
        let mock = MockLm::start(script).await.expect("mock starts");
        let config = Config::from_toml(&config_toml(&mock, max_parallel)).expect("test config");
        let state = AppState::new(config).expect("state");
        Self::serve(mock, state).await
    }

    pub async fn serve(mock: MockLm, state: Arc<AppState>) -> Self {
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let addr = listener.local_addr().unwrap();
        let app = router(Arc::clone(&state));
        let task = tokio::spawn(async move {
            axum::serve(listener, app).await.unwrap();
        });
        Self {
            base: format!("http://{addr}/v1"),
            client: reqwest::Client::new(),
            mock,
            state,
            task,
        }
    }

    pub fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    pub async fn get(&self, path: &str) -> (u16, Value) {
        let resp = self.client.get(self.url(path)).send().await.unwrap();
        let status = resp.status().as_u16();
        (status, resp.json().await.unwrap_or(Value::Null))
    }

    pub async fn get_text(&self, path: &str) -> (u16, String) {
        let resp = self.client.get(self.url(path)).send().await.unwrap();
        (resp.status().as_u16(), resp.text().await.unwrap())
    }

    pub async fn post(&self, path: &str, body: &Value) -> (u16, Value) {
        let resp = self.client.post(self.url(path)).json(body).send().await.unwrap();
        let status = resp.status().as_u16();
        (status, resp.json().await.unwrap_or(Value::Null))
    }

    pub async fn delete(&self, path: &str) -> (u16, Value) {
        let resp = self.client.delete(self.url(path)).send().await.unwrap();
        let status = resp.status().as_u16();
        (status, resp.json().await.unwrap_or(Value::Null))
    }

    /// Uploads a file and returns the new dataset id.
    pub async fn upload(&self, filename: &str, bytes: Vec<u8>) -> String {
        let (status, body) = self.upload_raw(filename, bytes, None).await;
        assert_eq!(status, 201, "upload failed: {body}");
        body["descriptor"]["dataset_id"].as_str().unwrap().to_string()
    }

    pub async fn upload_raw(&self, filename: &str, bytes: Vec<u8>, format: Option<&str>) -> (u16, Value) {
        let mut form = Form::new().part("file", Part::bytes(bytes).file_name(filename.to_string()));
        if let Some(f) = format {
            form = form.text("format", f.to_string());
        }
        let resp = self
            .client
            .post(self.url("/datasets"))
            .multipart(form)
            .send()
            .await
            .unwrap();
        let status = resp.status().as_u16();
        (status, resp.json().await.unwrap_or(Value::Null))
    }

    /// Polls a job until it is terminal, returning every observed handle.
    pub async fn poll_until_terminal(&self, job_id: &str, timeout: Duration) -> Vec<Value> {
        let deadline = Instant::now() + timeout;
        let mut seen = Vec::new();
        loop {
            let (status, handle) = self.get(&format!("/jobs/{job_id}")).await;
            assert_eq!(status, 200, "poll failed: {handle}");
            let state = handle["state"].as_str().unwrap().to_string();
            seen.push(handle);
            if matches!(state.as_str(), "done" | "failed" | "cancelled") {
                return seen;
            }
            assert!(Instant::now() < deadline, "job {job_id} did not finish in {timeout:?}");
            tokio::time::sleep(Duration::from_millis(5)).await;
        }
    }

    /// Posts a message and collects the SSE stream as `(event, data)` pairs.
    pub async fn send_message(&self, session: &str, body: &Value) -> Vec<(String, Value)> {
        let resp = self
            .client
            .post(self.url(&format!("/assistant/sessions/{session}/messages")))
            .json(body)
            .send()
            .await
            .unwrap();
        assert_eq!(resp.status().as_u16(), 200);
        parse_sse(&resp.text().await.unwrap())
    }
}

pub fn parse_sse(text: &str) -> Vec<(String, Value)> {
    let mut events = Vec::new();
    for block in text.split("\n\n") {
        let mut event = String::from("message");
        let mut data = String::new();
        for line in block.lines() {
            if let Some(rest) = line.strip_prefix("event:") {
                event = rest.trim().to_string();
            } else if let Some(rest) = line.strip_prefix("data:") {
                data.push_str(rest.strip_prefix(' ').unwrap_or(rest));
            }
        }
        if !data.is_empty() {
            events.push((event, serde_json::from_str(&data).unwrap_or(Value::String(data))));
        }
    }
    events
}

/// A conversation-level CSV with `n` turns, every text distinct.
pub fn long_conversation_csv(key: &str, n: usize) -> Vec<u8> {
    let speakers = ["ana", "ben", "cy"];
    let mut out = String::from("conversation_id,turn_index,speaker,text,label\n");
    for i in 0..n {
        let label = if i % 7 == 3 { "sexist" } else { "not sexist" };
        let text = if i % 7 == 3 {
            format!("you are an idiot number {i}")
        } else {
            format!("ordinary remark {i} about the weather")
        };
        out.push_str(&format!("{key},{i},{},{text},{label}\n", speakers[i % 3]));
    }
    out.into_bytes()
}
