//! Bounded background job manager.
//!
//! Jobs wait for one of `workers` permits; at most `max_queued` may wait at
//! once. Each job owns a [`Progress`] that doubles as its cancellation flag,
//! and the reported progress of a job never decreases between polls.

use std::collections::HashMap;
use std::future::Future;
use std::pin::Pin;
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use tokio::sync::Semaphore;
use tokio::task::AbortHandle;
use toxlens_core::{JobState, Progress};

use crate::error::{ApiError, ErrorBody};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobKind {
    Classification,
    Summarization,
    PplGain,
    Persona,
}

impl JobKind {
    pub fn as_str(self) -> &'static str {
        match self {
            JobKind::Classification => "classification",
            JobKind::Summarization => "summarization",
            JobKind::PplGain => "ppl_gain",
            JobKind::Persona => "persona",
        }
    }
}

impl FromStr for JobKind {
    type Err = ApiError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "classification" | "classify" => Ok(JobKind::Classification),
            "summarization" | "summarize" => Ok(JobKind::Summarization),
            "ppl_gain" | "ppl-gain" => Ok(JobKind::PplGain),
            "persona" => Ok(JobKind::Persona),
            other => Err(ApiError::NotFound(format!("unknown job kind `{other}`"))),
        }
    }
}

/// Snapshot of a job, as returned by submit, poll and cancel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobHandle {
    pub job_id: String,
    pub kind: JobKind,
    pub state: JobState,
    pub progress: f64,
    pub total: usize,
    pub completed: usize,
    pub submitted_at: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ErrorBody>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<Value>,
}

pub type JobFuture = Pin<Box<dyn Future<Output = Result<Value, ApiError>> + Send>>;

struct JobEntry {
    kind: JobKind,
    state: JobState,
    progress: Arc<Progress>,
    reported: f64,
    submitted_at: DateTime<Utc>,
    error: Option<ErrorBody>,
    result: Option<Value>,
    content_hash: Option<String>,
    abort: Option<AbortHandle>,
}

impl JobEntry {
    fn transition(&mut self, next: JobState) -> bool {
        if self.state.can_become(next) {
            self.state = next;
            true
        } else {
            false
        }
    }

    /// Atomic state/progress snapshot; never reports less than before.
    fn snapshot(&mut self, job_id: &str, with_result: bool) -> JobHandle {
        let (completed, total) = self.progress.counts();
        let fraction = if self.state == JobState::Done {
            1.0
        } else {
            self.progress.fraction()
        };
        self.reported = self.reported.max(fraction);
        JobHandle {
            job_id: job_id.to_string(),
            kind: self.kind,
            state: self.state,
            progress: self.reported,
            total,
            completed: if self.state == JobState::Done { total } else { completed },
            submitted_at: self.submitted_at,
            error: self.error.clone(),
            result: if with_result { self.result.clone() } else { None },
        }
    }
}

#[derive(Default)]
struct Inner {
    jobs: HashMap<String, JobEntry>,
    by_hash: HashMap<String, String>,
}

#[derive(Clone)]
pub struct JobManager {
    inner: Arc<Mutex<Inner>>,
    permits: Arc<Semaphore>,
    max_queued: usize,
    reuse_results: bool,
}

impl JobManager {
    pub fn new(workers: usize, max_queued: usize, reuse_results: bool) -> Self {
        Self {
            inner: Arc::default(),
            permits: Arc::new(Semaphore::new(workers.max(1))),
            max_queued: max_queued.max(1),
            reuse_results,
        }
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Enqueues a job. `make` receives the job's progress handle and builds
    /// the work; it is only invoked once a worker permit is held.
    ///
    /// With result reuse enabled, a job whose `content_hash` matches an
    /// earlier job that has not failed or been cancelled returns that job's
    /// handle instead.
    pub fn submit<F>(&self, kind: JobKind, content_hash: Option<String>, make: F) -> Result<JobHandle, ApiError>
    where
        F: FnOnce(Arc<Progress>) -> JobFuture + Send + 'static,
    {
        let job_id = uuid::Uuid::new_v4().to_string();
        let progress = Arc::new(Progress::new());
        {
            let mut inner = self.lock();
            if self.reuse_results {
                if let Some(hash) = &content_hash {
                    if let Some(existing) = inner.by_hash.get(hash).cloned() {
                        if let Some(entry) = inner.jobs.get_mut(&existing) {
                            if !matches!(entry.state, JobState::Failed | JobState::Cancelled) {
                                return Ok(entry.snapshot(&existing, false));
                            }
                        }
                    }
                }
            }
            let waiting = inner
                .jobs
                .values()
                .filter(|j| j.state == JobState::Pending)
                .count();
            if waiting >= self.max_queued {
                return Err(ApiError::QueueFull(waiting));
            }
            if let Some(hash) = &content_hash {
                inner.by_hash.insert(hash.clone(), job_id.clone());
            }
            inner.jobs.insert(
                job_id.clone(),
                JobEntry {
                    kind,
                    state: JobState::Pending,
                    progress: Arc::clone(&progress),
                    reported: 0.0,
                    submitted_at: Utc::now(),
                    error: None,
                    result: None,
                    content_hash,
                    abort: None,
                },
            );
        }

        let manager = self.clone();
        let id = job_id.clone();
        let task = tokio::spawn(async move {
            let Ok(_permit) = Arc::clone(&manager.permits).acquire_owned().await else {
                return;
            };
            if !manager.update(&id, |entry| entry.transition(JobState::Running)) {
                return;
            }
            tracing::info!(job = %id, kind = kind.as_str(), "job started");
            let outcome = make(Arc::clone(&progress)).await;
            manager.update(&id, |entry| match outcome {
                Ok(value) => {
                    if entry.transition(JobState::Done) {
                        entry.result = Some(value);
                    }
                    true
                }
                Err(ApiError::Cancelled) => entry.transition(JobState::Cancelled),
                Err(e) => {
                    if entry.transition(JobState::Failed) {
                        tracing::warn!(job = %id, error = %e, "job failed");
                        entry.error = Some(e.body());
                    }
                    true
                }
            });
        });
        let mut inner = self.lock();
        let entry = inner.jobs.get_mut(&job_id).expect("job just inserted");
        entry.abort = Some(task.abort_handle());
        Ok(entry.snapshot(&job_id, false))
    }

    fn update(&self, id: &str, f: impl FnOnce(&mut JobEntry) -> bool) -> bool {
        let mut inner = self.lock();
        inner.jobs.get_mut(id).is_some_and(f)
    }

    pub fn poll(&self, id: &str) -> Result<JobHandle, ApiError> {
        let mut inner = self.lock();
        let entry = inner
            .jobs
            .get_mut(id)
            .ok_or_else(|| ApiError::NotFound(format!("job `{id}`")))?;
        Ok(entry.snapshot(id, true))
    }

    /// Cancels a pending or running job. No LM call starts after this
    /// returns; the job task is aborted, dropping any request in flight.
    pub fn cancel(&self, id: &str) -> Result<JobHandle, ApiError> {
        let mut inner = self.lock();
        let entry = inner
            .jobs
            .get_mut(id)
            .ok_or_else(|| ApiError::NotFound(format!("job `{id}`")))?;
        if entry.state.is_terminal() {
            return Err(ApiError::AlreadyTerminal(id.to_string()));
        }
        entry.progress.cancel();
        entry.transition(JobState::Cancelled);
        if let Some(abort) = entry.abort.take() {
            abort.abort();
        }
        let handle = entry.snapshot(id, false);
        if let Some(hash) = entry.content_hash.clone() {
            if inner.by_hash.get(&hash).map(String::as_str) == Some(id) {
                inner.by_hash.remove(&hash);
            }
        }
        tracing::info!(job = %id, "job cancelled");
        Ok(handle)
    }

    pub fn len(&self) -> usize {
        self.lock().jobs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
