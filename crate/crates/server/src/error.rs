use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use toxlens_core::assistant::AssistantError;
use toxlens_core::chunker::ChunkError;
use toxlens_core::classify::ClassifyError;
use toxlens_core::lm_gateway::LmError;
use toxlens_core::persona::PersonaError;
use toxlens_core::ppl_gain::PplError;
use toxlens_core::store::StoreError;
use toxlens_core::summarize::SummarizeError;
use toxlens_core::template::TemplateError;

/// Error body returned by every endpoint: `{"error": {"code", "message"}}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, Error)]
pub enum ApiError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    NotFound(String),
    #[error("job queue is full ({0} waiting)")]
    QueueFull(usize),
    #[error("job `{0}` already finished")]
    AlreadyTerminal(String),
    #[error("{0}")]
    Conflict(String),
    #[error("{0}")]
    Unavailable(String),
    #[error("{0}")]
    Unsupported(String),
    #[error("{0}")]
    Upstream(String),
    #[error("cancelled")]
    Cancelled,
    #[error("{0}")]
    Internal(String),
}

impl ApiError {
    pub fn code(&self) -> &'static str {
        match self {
            ApiError::Validation(_) => "validation_error",
            ApiError::NotFound(_) => "not_found",
            ApiError::QueueFull(_) => "queue_full",
            ApiError::AlreadyTerminal(_) => "already_terminal",
            ApiError::Conflict(_) => "conflict",
            ApiError::Unavailable(_) => "unavailable",
            ApiError::Unsupported(_) => "unsupported",
            ApiError::Upstream(_) => "upstream_error",
            ApiError::Cancelled => "cancelled",
            ApiError::Internal(_) => "internal_error",
        }
    }

    pub fn status(&self) -> StatusCode {
        match self {
            ApiError::Validation(_) => StatusCode::BAD_REQUEST,
            ApiError::NotFound(_) => StatusCode::NOT_FOUND,
            ApiError::QueueFull(_) => StatusCode::TOO_MANY_REQUESTS,
            ApiError::AlreadyTerminal(_) | ApiError::Conflict(_) => StatusCode::CONFLICT,
            ApiError::Unavailable(_) => StatusCode::SERVICE_UNAVAILABLE,
            ApiError::Unsupported(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ApiError::Upstream(_) => StatusCode::BAD_GATEWAY,
            ApiError::Cancelled => StatusCode::CONFLICT,
            ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }

    pub fn body(&self) -> ErrorBody {
        ErrorBody {
            code: self.code().to_string(),
            message: self.to_string(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = self.status();
        (status, Json(serde_json::json!({ "error": self.body() }))).into_response()
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::NotFound(_) => ApiError::NotFound(e.to_string()),
            StoreError::BuiltinProtected(_) => ApiError::Conflict(e.to_string()),
            StoreError::Backend(_) => ApiError::Internal(e.to_string()),
            _ => ApiError::Validation(e.to_string()),
        }
    }
}

impl From<LmError> for ApiError {
    fn from(e: LmError) -> Self {
        match e {
            LmError::Unavailable(_) | LmError::StreamInterrupted { .. } => {
                ApiError::Unavailable(e.to_string())
            }
            LmError::LogprobsUnsupported(_) | LmError::Unsupported { .. } => {
                ApiError::Unsupported(e.to_string())
            }
            LmError::ContextTooLong(_) | LmError::InvalidRequest(_) => {
                ApiError::Validation(e.to_string())
            }
            LmError::UnknownProvider(_) => ApiError::Validation(e.to_string()),
            LmError::InvalidResponse(_) => ApiError::Upstream(e.to_string()),
            LmError::Cancelled => ApiError::Cancelled,
        }
    }
}

impl From<TemplateError> for ApiError {
    fn from(e: TemplateError) -> Self {
        match e {
            TemplateError::UnknownTemplate(_) => ApiError::NotFound(e.to_string()),
            _ => ApiError::Validation(e.to_string()),
        }
    }
}

impl From<ClassifyError> for ApiError {
    fn from(e: ClassifyError) -> Self {
        match e {
            ClassifyError::BackendUnavailable(_) => ApiError::Unavailable(e.to_string()),
            ClassifyError::Lm(inner) => inner.into(),
            ClassifyError::Template(inner) => inner.into(),
            ClassifyError::UnknownSchema(_) => ApiError::NotFound(e.to_string()),
            ClassifyError::UnparseableVerdict { .. } | ClassifyError::InvalidScores(_) => {
                ApiError::Upstream(e.to_string())
            }
            _ => ApiError::Validation(e.to_string()),
        }
    }
}

impl From<PplError> for ApiError {
    fn from(e: PplError) -> Self {
        match e {
            PplError::Lm(inner) => inner.into(),
            PplError::EmptyScores => ApiError::Upstream(e.to_string()),
            _ => ApiError::Validation(e.to_string()),
        }
    }
}

impl From<ChunkError> for ApiError {
    fn from(e: ChunkError) -> Self {
        match e {
            ChunkError::Lm(inner) => inner.into(),
            ChunkError::EmbeddingCount { .. } => ApiError::Upstream(e.to_string()),
            _ => ApiError::Validation(e.to_string()),
        }
    }
}

impl From<SummarizeError> for ApiError {
    fn from(e: SummarizeError) -> Self {
        match e {
            SummarizeError::Template(inner) => inner.into(),
            SummarizeError::Chunking(inner) => inner.into(),
            SummarizeError::AllChunksFailed(_) => ApiError::Unavailable(e.to_string()),
            SummarizeError::Cancelled => ApiError::Cancelled,
            SummarizeError::EmptyChunk => ApiError::Validation(e.to_string()),
        }
    }
}

impl From<PersonaError> for ApiError {
    fn from(e: PersonaError) -> Self {
        match e {
            PersonaError::Lm(inner) => inner.into(),
            PersonaError::EmptySummary => ApiError::Validation(e.to_string()),
            PersonaError::ParseFailure(_) => ApiError::Upstream(e.to_string()),
        }
    }
}

impl From<AssistantError> for ApiError {
    fn from(e: AssistantError) -> Self {
        match e {
            AssistantError::NotFound(_) => ApiError::NotFound(e.to_string()),
            AssistantError::Lm(inner) => inner.into(),
            AssistantError::Template(inner) => inner.into(),
            _ => ApiError::Validation(e.to_string()),
        }
    }
}
