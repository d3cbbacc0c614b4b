use std::convert::Infallible;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Multipart, Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::Stream;
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::sync::mpsc;
use toxlens_core::assistant::{send_message, HistoryFormat, MessageInput};
use toxlens_core::classify::ReportFormat;
use toxlens_core::store::DataFormat;
use toxlens_core::Progress;

use crate::error::ApiError;
use crate::jobs::{JobFuture, JobHandle, JobKind};
use crate::service::{self, ClassifyRequest, CreateSessionRequest, PersonaRequest, PplGainRequest, ReportRequest, SummarizeRequest};
use crate::state::{format_from_path, AppState};

type Shared = State<Arc<AppState>>;

/// Every route, as `(method, path)`.
pub const ROUTES: &[(&str, &str)] = &[
    ("GET", "/v1/health"),
    ("GET", "/v1/config"),
    ("GET", "/v1/datasets"),
    ("POST", "/v1/datasets"),
    ("GET", "/v1/datasets/{id}"),
    ("DELETE", "/v1/datasets/{id}"),
    ("GET", "/v1/datasets/{id}/export"),
    ("GET", "/v1/datasets/{id}/conversations/{key}"),
    ("GET", "/v1/datasets/{id}/personas/{speaker}"),
    ("POST", "/v1/classify"),
    ("POST", "/v1/classify/report"),
    ("POST", "/v1/jobs/{kind}"),
    ("GET", "/v1/jobs/{id}"),
    ("DELETE", "/v1/jobs/{id}"),
    ("POST", "/v1/ppl-gain"),
    ("POST", "/v1/persona/{speaker}"),
    ("POST", "/v1/assistant/sessions"),
    ("POST", "/v1/assistant/sessions/{id}/messages"),
    ("GET", "/v1/assistant/sessions/{id}/export"),
];

const MAX_UPLOAD_BYTES: usize = 64 * 1024 * 1024;

pub fn router(state: Arc<AppState>) -> Router {
    let v1 = Router::new()
        .route("/health", get(health))
        .route("/config", get(config))
        .route("/datasets", get(list_datasets).post(upload_dataset))
        .route("/datasets/{id}", get(get_dataset).delete(delete_dataset))
        .route("/datasets/{id}/export", get(export_dataset))
        .route("/datasets/{id}/conversations/{key}", get(get_conversation))
        .route("/datasets/{id}/personas/{speaker}", get(get_persona))
        .route("/classify", post(classify))
        .route("/classify/report", post(report))
        // POST takes a job kind in the same segment GET and DELETE use for the id
        .route("/jobs/{id}", get(poll_job).post(submit_job).delete(cancel_job))
        .route("/ppl-gain", post(ppl_gain))
        .route("/persona/{speaker}", post(persona))
        .route("/assistant/sessions", post(create_session))
        .route("/assistant/sessions/{id}/messages", post(post_message))
        .route("/assistant/sessions/{id}/export", get(export_session));
    Router::new()
        .nest("/v1", v1)
        .layer(DefaultBodyLimit::max(MAX_UPLOAD_BYTES))
        .with_state(state)
}

/// Parses a JSON body, reporting malformed input as a validation error.
fn parse<T: serde::de::DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::Validation(format!("invalid request body: {e}")))
}

fn to_value<T: serde::Serialize>(value: &T) -> Result<Value, ApiError> {
    serde_json::to_value(value).map_err(|e| ApiError::Internal(e.to_string()))
}

async fn health(State(state): Shared) -> Json<Value> {
    Json(json!({
        "status": "ok",
        "version": env!("CARGO_PKG_VERSION"),
        "providers": state.gateway.specs().len(),
        "classifiers": state.classifiers.ids().len(),
        "jobs": state.jobs.len(),
    }))
}

async fn config(State(state): Shared) -> Json<Value> {
    let schemas: Vec<_> = state.schemas.all().cloned().collect();
    Json(json!({
        "server": state.config.server,
        "defaults": state.config.defaults,
        "providers": state.gateway.specs(),
        "classifiers": state.config.classifiers,
        "ensembles": state.config.ensembles,
        "schemas": schemas,
        "chunker": state.config.chunker,
        "summarizer": state.config.summarizer,
        "templates": state.templates.ids(),
    }))
}

async fn list_datasets(State(state): Shared) -> Result<Json<Value>, ApiError> {
    Ok(Json(to_value(&state.store.list_datasets()?)?))
}

/// Multipart upload: a `file` part plus optional `name` and `format` parts.
async fn upload_dataset(State(state): Shared, mut multipart: Multipart) -> Result<Response, ApiError> {
    let mut file: Option<(Option<String>, Bytes)> = None;
    let mut name = None;
    let mut format = None;
    while let Some(field) = multipart
        .next_field()
        .await
        .map_err(|e| ApiError::Validation(e.to_string()))?
    {
        let field_name = field.name().unwrap_or_default().to_string();
        match field_name.as_str() {
            "file" => {
                let filename = field.file_name().map(str::to_string);
                let bytes = field.bytes().await.map_err(|e| ApiError::Validation(e.to_string()))?;
                file = Some((filename, bytes));
            }
            "name" => name = Some(field.text().await.map_err(|e| ApiError::Validation(e.to_string()))?),
            "format" => format = Some(field.text().await.map_err(|e| ApiError::Validation(e.to_string()))?),
            _ => {}
        }
    }
    let (filename, bytes) = file.ok_or_else(|| ApiError::Validation("missing `file` part".into()))?;
    let format = match format {
        Some(f) => f.parse::<DataFormat>()?,
        None => filename
            .as_deref()
            .map(|f| format_from_path(std::path::Path::new(f)))
            .unwrap_or(DataFormat::Csv),
    };
    let name = name.or(filename).unwrap_or_else(|| "upload".into());
    let report = tokio::task::block_in_place(|| service::upload_dataset(&state, &name, &bytes, format))?;
    Ok((StatusCode::CREATED, Json(to_value(&report)?)).into_response())
}

async fn get_dataset(State(state): Shared, Path(id): Path<String>) -> Result<Json<Value>, ApiError> {
    Ok(Json(to_value(&service::dataset_detail(&state, &id)?)?))
}

async fn delete_dataset(State(state): Shared, Path(id): Path<String>) -> Result<StatusCode, ApiError> {
    state.store.delete_dataset(&id)?;
    Ok(StatusCode::NO_CONTENT)
}

#[derive(Deserialize)]
struct FormatQuery {
    format: Option<String>,
}

async fn export_dataset(
    State(state): Shared,
    Path(id): Path<String>,
    Query(q): Query<FormatQuery>,
) -> Result<Response, ApiError> {
    let format = q.format.as_deref().unwrap_or("csv").parse::<DataFormat>()?;
    let bytes = state.store.export_dataset(&id, format)?;
    let content_type = match format {
        DataFormat::Csv => "text/csv; charset=utf-8",
        DataFormat::Jsonl => "application/x-ndjson",
    };
    Ok(([(header::CONTENT_TYPE, content_type)], bytes).into_response())
}

async fn get_conversation(
    State(state): Shared,
    Path((id, key)): Path<(String, String)>,
) -> Result<Json<Value>, ApiError> {
    Ok(Json(to_value(&service::conversation(&state, &id, &key)?)?))
}

async fn get_persona(
    State(state): Shared,
    Path((id, speaker)): Path<(String, String)>,
) -> Result<Json<Value>, ApiError> {
    let profile = service::stored_persona(&state, &id, &speaker)?
        .ok_or_else(|| ApiError::NotFound(format!("no persona for `{speaker}` in `{id}`")))?;
    Ok(Json(to_value(&profile)?))
}

async fn classify(State(state): Shared, body: Bytes) -> Result<Json<Value>, ApiError> {
    let req: ClassifyRequest = parse(&body)?;
    let response = service::run_classify(&state, &req, Arc::new(Progress::new())).await?;
    Ok(Json(to_value(&response)?))
}

async fn report(State(state): Shared, body: Bytes) -> Result<Response, ApiError> {
    let req: ReportRequest = parse(&body)?;
    let format = req
        .format
        .as_deref()
        .unwrap_or("json")
        .parse::<ReportFormat>()
        .map_err(|_| ApiError::Validation("format must be json or csv".into()))?;
    let report = service::report(&state, &req)?;
    Ok(match format {
        ReportFormat::Json => Json(to_value(&report)?).into_response(),
        ReportFormat::Csv => ([(header::CONTENT_TYPE, "text/csv; charset=utf-8")], report.to_csv()).into_response(),
    })
}

async fn ppl_gain(State(state): Shared, body: Bytes) -> Result<Json<Value>, ApiError> {
    let req: PplGainRequest = parse(&body)?;
    let report = service::run_ppl_gain(&state, &req, Arc::new(Progress::new())).await?;
    Ok(Json(to_value(&report)?))
}

async fn persona(
    State(state): Shared,
    Path(speaker): Path<String>,
    body: Bytes,
) -> Result<Json<Value>, ApiError> {
    let req: PersonaRequest = if body.is_empty() { PersonaRequest::default() } else { parse(&body)? };
    let profile = service::run_persona(&state, &speaker, &req, Arc::new(Progress::new())).await?;
    Ok(Json(to_value(&profile)?))
}

/// Validates the parameters for `kind`, then enqueues the job.
pub fn submit(state: &Arc<AppState>, kind: JobKind, params: Value) -> Result<JobHandle, ApiError> {
    let bad = |e: serde_json::Error| ApiError::Validation(format!("invalid {} params: {e}", kind.as_str()));
    let st = Arc::clone(state);
    match kind {
        JobKind::Classification => {
            let req: ClassifyRequest = serde_json::from_value(params).map_err(bad)?;
            service::validate_classify(state, &req)?;
            state.jobs.submit(kind, None, move |progress| -> JobFuture {
                Box::pin(async move { to_value(&service::run_classify(&st, &req, progress).await?) })
            })
        }
        JobKind::Summarization => {
            let req: SummarizeRequest = serde_json::from_value(params).map_err(bad)?;
            service::validate_summarize(state, &req)?;
            let hash = service::summarize_hash(&req);
            state.jobs.submit(kind, Some(hash), move |progress| -> JobFuture {
                Box::pin(async move { to_value(&service::run_summarize(&st, &req, progress).await?) })
            })
        }
        JobKind::PplGain => {
            let req: PplGainRequest = serde_json::from_value(params).map_err(bad)?;
            service::validate_ppl_gain(state, &req)?;
            let hash = service::ppl_gain_hash(&req);
            state.jobs.submit(kind, Some(hash), move |progress| -> JobFuture {
                Box::pin(async move { to_value(&service::run_ppl_gain(&st, &req, progress).await?) })
            })
        }
        JobKind::Persona => {
            #[derive(Deserialize)]
            struct PersonaJob {
                speaker: String,
                #[serde(flatten)]
                request: PersonaRequest,
            }
            let job: PersonaJob = serde_json::from_value(params).map_err(bad)?;
            service::validate_persona(state, &job.speaker, &job.request)?;
            state.jobs.submit(kind, None, move |progress| -> JobFuture {
                Box::pin(async move {
                    to_value(&service::run_persona(&st, &job.speaker, &job.request, progress).await?)
                })
            })
        }
    }
}

async fn submit_job(
    State(state): Shared,
    Path(kind): Path<String>,
    body: Bytes,
) -> Result<Response, ApiError> {
    let kind: JobKind = kind.parse()?;
    let params: Value = parse(&body)?;
    let handle = submit(&state, kind, params)?;
    Ok((StatusCode::ACCEPTED, Json(to_value(&handle)?)).into_response())
}

async fn poll_job(State(state): Shared, Path(id): Path<String>) -> Result<Json<Value>, ApiError> {
    Ok(Json(to_value(&state.jobs.poll(&id)?)?))
}

async fn cancel_job(State(state): Shared, Path(id): Path<String>) -> Result<Json<Value>, ApiError> {
    Ok(Json(to_value(&state.jobs.cancel(&id)?)?))
}

async fn create_session(State(state): Shared, body: Bytes) -> Result<Response, ApiError> {
    let req: CreateSessionRequest = if body.is_empty() { CreateSessionRequest::default() } else { parse(&body)? };
    let created = service::create_session(&state, &req)?;
    Ok((StatusCode::CREATED, Json(to_value(&created)?)).into_response())
}

/// Streams the reply as server-sent events: `delta` events carry
/// `{"text"}`, then one `done` event with `{"reply"}` or an `error` event
/// with `{"code", "message"}`.
async fn post_message(
    State(state): Shared,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Sse<impl Stream<Item = Result<Event, Infallible>>>, ApiError> {
    let value: Value = parse(&body)?;
    let provider = value.get("provider").and_then(Value::as_str).map(str::to_string);
    let input: MessageInput = serde_json::from_value(value)
        .map_err(|e| ApiError::Validation(format!("expected {{text}} or {{template_id, bindings}}: {e}")))?;
    let session = state.sessions.get(&id)?;
    let lm = state.chat_lm(provider.as_deref())?;

    let (tx, rx) = mpsc::unbounded_channel::<Event>();
    tokio::spawn(async move {
        let mut guard = session.lock().await;
        let delta_tx = tx.clone();
        let mut sink = move |delta: &str| {
            let _ = delta_tx.send(Event::default().event("delta").data(json!({ "text": delta }).to_string()));
        };
        let outcome = send_message(
            &mut guard,
            &input,
            &state.templates,
            lm.as_ref(),
            state.config.server.assistant_max_context,
            &mut sink,
        )
        .await;
        let event = match outcome {
            Ok(reply) => Event::default().event("done").data(json!({ "reply": reply }).to_string()),
            Err(e) => {
                let body = ApiError::from(e).body();
                Event::default().event("error").data(json!(body).to_string())
            }
        };
        let _ = tx.send(event);
    });
    let stream = futures::stream::unfold(rx, |mut rx| async move {
        rx.recv().await.map(|event| (Ok(event), rx))
    });
    Ok(Sse::new(stream).keep_alive(KeepAlive::default()))
}

async fn export_session(
    State(state): Shared,
    Path(id): Path<String>,
    Query(q): Query<FormatQuery>,
) -> Result<Response, ApiError> {
    let format = q.format.as_deref().unwrap_or("json").parse::<HistoryFormat>()?;
    let text = state.sessions.export(&id, format).await?;
    let content_type = match format {
        HistoryFormat::Json => "application/json",
        HistoryFormat::Txt => "text/plain; charset=utf-8",
    };
    Ok(([(header::CONTENT_TYPE, content_type)], text).into_response())
}
