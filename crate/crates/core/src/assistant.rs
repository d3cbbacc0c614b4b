//! Label-aware chat sessions over the gateway.
//!
//! A session may be bound to classifier predictions; the first message sent
//! then carries a system preamble listing those labels. The transcript is
//! append-only and never truncated; only the context sent to the LM is.

use std::collections::{BTreeMap, HashMap};
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lm_gateway::{Capability, ChatMessage, ChatParams, DeltaSink, LanguageModel, LmError};
use crate::template::{TemplateError, TemplateRegistry};

pub const DEFAULT_MAX_CONTEXT: usize = 200;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AssistantError {
    #[error("session `{0}` not found")]
    NotFound(String),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error("invalid history: {0}")]
    InvalidHistory(String),
    #[error("unknown export format `{0}`")]
    UnknownFormat(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TranscriptRole {
    System,
    User,
    Assistant,
    /// A failed LM call; never sent back to the model.
    Error,
}

impl TranscriptRole {
    fn as_str(self) -> &'static str {
        match self {
            Self::System => "system",
            Self::User => "user",
            Self::Assistant => "assistant",
            Self::Error => "error",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub role: TranscriptRole,
    pub text: String,
    pub timestamp: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledMessage {
    pub message_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    pub label: String,
}

/// Predictions a session is bound to.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionContext {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset_id: Option<String>,
    pub predictions: Vec<LabeledMessage>,
}

impl PredictionContext {
    pub fn preamble(&self) -> String {
        let lines: Vec<String> = self
            .predictions
            .iter()
            .map(|p| match &p.text {
                Some(text) => format!("- [{}] {text}", p.label),
                None => format!("- {}: {}", p.message_id, p.label),
            })
            .collect();
        format!(
            "Based on the analysis of a classifier, the conversation below contains messages with the following labels. The details are as follows:\n\n{}",
            lines.join("\n")
        )
    }
}

/// What the user sends: free text or a rendered template.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MessageInput {
    Template {
        template_id: String,
        #[serde(default)]
        bindings: BTreeMap<String, String>,
    },
    Text {
        text: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatSession {
    pub session_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context: Option<PredictionContext>,
    pub transcript: Vec<TranscriptEntry>,
    pub preamble_sent: bool,
    pub created_at: DateTime<Utc>,
}

impl ChatSession {
    pub fn new(session_id: impl Into<String>, context: Option<PredictionContext>) -> Self {
        Self {
            session_id: session_id.into(),
            context,
            transcript: Vec::new(),
            preamble_sent: false,
            created_at: Utc::now(),
        }
    }

    fn push(&mut self, role: TranscriptRole, text: impl Into<String>) {
        self.transcript.push(TranscriptEntry {
            role,
            text: text.into(),
            timestamp: Utc::now(),
        });
    }

    /// The transcript as sent to the LM: error events dropped, system
    /// messages kept, and only the newest `max_context` other entries.
    pub fn lm_context(&self, max_context: usize) -> Vec<ChatMessage> {
        let mut keep: Vec<&TranscriptEntry> = self
            .transcript
            .iter()
            .filter(|e| e.role != TranscriptRole::Error)
            .collect();
        let systems = keep.iter().filter(|e| e.role == TranscriptRole::System).count();
        let budget = max_context.saturating_sub(systems).max(1);
        let others = keep.len() - systems;
        if others > budget {
            let mut drop = others - budget;
            keep.retain(|e| {
                if drop > 0 && e.role != TranscriptRole::System {
                    drop -= 1;
                    false
                } else {
                    true
                }
            });
        }
        keep.into_iter()
            .map(|e| match e.role {
                TranscriptRole::System => ChatMessage::system(e.text.clone()),
                TranscriptRole::Assistant => ChatMessage::assistant(e.text.clone()),
                _ => ChatMessage::user(e.text.clone()),
            })
            .collect()
    }
}

pub fn render_input(input: &MessageInput, templates: &TemplateRegistry) -> Result<String, AssistantError> {
    match input {
        MessageInput::Text { text } => Ok(text.clone()),
        MessageInput::Template {
            template_id,
            bindings,
        } => Ok(templates.render(template_id, bindings)?),
    }
}

/// Appends the user message, calls the LM (streaming when supported) and
/// appends the reply, or an error event when the call fails.
pub async fn send_message(
    session: &mut ChatSession,
    input: &MessageInput,
    templates: &TemplateRegistry,
    lm: &dyn LanguageModel,
    max_context: usize,
    sink: &mut DeltaSink<'_>,
) -> Result<String, AssistantError> {
    let text = render_input(input, templates)?;
    if !session.preamble_sent {
        if let Some(context) = &session.context {
            let preamble = context.preamble();
            session.push(TranscriptRole::System, preamble);
            session.preamble_sent = true;
        }
    }
    session.push(TranscriptRole::User, text);
    let messages = session.lm_context(max_context);
    let params = ChatParams::default();
    let reply = if lm.supports(Capability::Stream) {
        lm.stream_chat(&messages, &params, sink).await
    } else {
        lm.chat(&messages, &params).await.inspect(|full| sink(full))
    };
    match reply {
        Ok(full) => {
            session.push(TranscriptRole::Assistant, full.clone());
            Ok(full)
        }
        Err(e) => {
            session.push(TranscriptRole::Error, e.to_string());
            Err(e.into())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HistoryFormat {
    Json,
    Txt,
}

impl FromStr for HistoryFormat {
    type Err = AssistantError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "json" => Ok(Self::Json),
            "txt" | "text" => Ok(Self::Txt),
            other => Err(AssistantError::UnknownFormat(other.to_string())),
        }
    }
}

pub fn export_history(transcript: &[TranscriptEntry], format: HistoryFormat) -> String {
    match format {
        HistoryFormat::Json => serde_json::to_string_pretty(transcript).expect("transcript serialises"),
        HistoryFormat::Txt => transcript
            .iter()
            .map(|e| format!("[{}] {}: {}\n", e.timestamp.to_rfc3339(), e.role.as_str(), e.text))
            .collect(),
    }
}

pub fn import_history(json: &str) -> Result<Vec<TranscriptEntry>, AssistantError> {
    serde_json::from_str(json).map_err(|e| AssistantError::InvalidHistory(e.to_string()))
}

/// In-memory sessions. Each session is locked for the duration of a send,
/// so calls within one session are serialised.
#[derive(Default)]
pub struct SessionManager {
    sessions: Mutex<HashMap<String, Arc<tokio::sync::Mutex<ChatSession>>>>,
}

impl SessionManager {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn create(&self, context: Option<PredictionContext>) -> String {
        let id = uuid::Uuid::new_v4().to_string();
        self.insert(ChatSession::new(id.clone(), context));
        id
    }

    pub fn insert(&self, session: ChatSession) {
        self.sessions
            .lock()
            .expect("session map lock")
            .insert(session.session_id.clone(), Arc::new(tokio::sync::Mutex::new(session)));
    }

    pub fn get(&self, id: &str) -> Result<Arc<tokio::sync::Mutex<ChatSession>>, AssistantError> {
        self.sessions
            .lock()
            .expect("session map lock")
            .get(id)
            .cloned()
            .ok_or_else(|| AssistantError::NotFound(id.to_string()))
    }

    /// Creates a session from an exported JSON transcript.
    pub fn import(&self, json: &str, context: Option<PredictionContext>) -> Result<String, AssistantError> {
        let transcript = import_history(json)?;
        let id = uuid::Uuid::new_v4().to_string();
        let mut session = ChatSession::new(id.clone(), context);
        session.preamble_sent = transcript.iter().any(|e| e.role == TranscriptRole::System);
        session.transcript = transcript;
        self.insert(session);
        Ok(id)
    }

    pub async fn export(&self, id: &str, format: HistoryFormat) -> Result<String, AssistantError> {
        let session = self.get(id)?;
        let guard = session.lock().await;
        Ok(export_history(&guard.transcript, format))
    }

    pub fn len(&self) -> usize {
        self.sessions.lock().expect("session map lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
