use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use std::time::Duration;

use thiserror::Error;
use toxlens_core::assistant::SessionManager;
use toxlens_core::classify::{
    ClassifierBackend, ClassifierRegistry, EnsembleConfig, HttpBackend, SchemaRegistry, StubBackend,
};
use toxlens_core::lm_gateway::{CancellableLm, Gateway, LanguageModel};
use toxlens_core::ppl_gain::ScoreCache;
use toxlens_core::store::{ColumnSynonyms, DataFormat, IngestOptions, Store};
use toxlens_core::summarize::DEFAULT_SUMMARY_TEMPLATE;
use toxlens_core::template::TemplateRegistry;
use toxlens_core::Progress;

use crate::config::{ClassifierConfig, Config, ConfigError};
use crate::error::ApiError;
use crate::jobs::JobManager;

#[derive(Debug, Error)]
pub enum StartupError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("store: {0}")]
    Store(#[from] toxlens_core::store::StoreError),
    #[error("provider: {0}")]
    Provider(#[from] toxlens_core::lm_gateway::LmError),
    #[error("classifier: {0}")]
    Classifier(#[from] toxlens_core::classify::ClassifyError),
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
}

/// Everything the handlers share.
pub struct AppState {
    pub config: Config,
    pub store: Store,
    pub gateway: Gateway,
    pub classifiers: ClassifierRegistry,
    pub ensembles: BTreeMap<String, EnsembleConfig>,
    pub schemas: SchemaRegistry,
    pub templates: TemplateRegistry,
    pub summary_template: String,
    pub sessions: SessionManager,
    pub jobs: JobManager,
    pub score_cache: Arc<ScoreCache>,
}

fn read(path: &std::path::Path) -> Result<String, StartupError> {
    std::fs::read_to_string(path).map_err(|e| StartupError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

impl AppState {
    pub fn new(config: Config) -> Result<Arc<Self>, StartupError> {
        Self::with_backends(config, Vec::new())
    }

    /// Like [`AppState::new`], registering extra in-process classifier
    /// backends alongside the configured ones.
    pub fn with_backends(
        config: Config,
        extra: Vec<Arc<dyn ClassifierBackend>>,
    ) -> Result<Arc<Self>, StartupError> {
        config.validate()?;
        let synonyms = match &config.server.columns_file {
            Some(path) => ColumnSynonyms::from_toml(&read(path)?)?,
            None => ColumnSynonyms::default(),
        };
        let store = Store::open(&config.server.database, synonyms)?;

        let gateway = Gateway::new(&config.providers, config.retry)?;

        let mut schemas = SchemaRegistry::builtin();
        for schema in &config.schemas {
            schemas.insert(schema.clone())?;
        }

        let mut classifiers = ClassifierRegistry::new();
        for entry in &config.classifiers {
            let backend: Arc<dyn ClassifierBackend> = match entry {
                ClassifierConfig::Stub {
                    id,
                    behaviour,
                    schemas,
                    max_batch,
                } => {
                    let mut stub = StubBackend::new(id.clone(), behaviour.clone()).with_max_batch(*max_batch);
                    if !schemas.is_empty() {
                        stub = stub.with_schemas(schemas.iter().cloned());
                    }
                    Arc::new(stub)
                }
                ClassifierConfig::Http {
                    id,
                    url,
                    schemas,
                    max_batch,
                    max_parallel,
                    timeout_secs,
                } => Arc::new(HttpBackend::new(
                    id.clone(),
                    url.clone(),
                    schemas.iter().cloned().collect::<BTreeSet<_>>(),
                    *max_batch,
                    *max_parallel,
                    Duration::from_secs(*timeout_secs),
                )?),
            };
            classifiers.insert(backend);
        }
        for backend in extra {
            classifiers.insert(backend);
        }

        let mut ensembles = BTreeMap::new();
        for e in &config.ensembles {
            let ensemble = EnsembleConfig::new(e.members.clone(), e.fallback.clone())?;
            for member in &ensemble.member_ids {
                classifiers.get(member)?;
            }
            ensembles.insert(e.id.clone(), ensemble);
        }

        let summary_template = match &config.summarizer.template {
            Some(path) => read(path)?,
            None => DEFAULT_SUMMARY_TEMPLATE.to_string(),
        };

        for bench in &config.benchmarks {
            let format = match &bench.format {
                Some(f) => f.parse::<DataFormat>()?,
                None => format_from_path(&bench.path),
            };
            let options = IngestOptions {
                label_column: bench.label_column.clone(),
            };
            let report = store.register_builtin(&bench.name, &bench.path, format, &options)?;
            tracing::info!(benchmark = %bench.name, id = %report.descriptor.dataset_id, "benchmark registered");
        }

        let jobs = JobManager::new(
            config.server.worker_count(),
            config.server.max_queued_jobs,
            config.server.result_cache,
        );
        Ok(Arc::new(Self {
            config,
            store,
            gateway,
            classifiers,
            ensembles,
            schemas,
            templates: TemplateRegistry::builtin(),
            summary_template,
            sessions: SessionManager::new(),
            jobs,
            score_cache: Arc::new(ScoreCache::new()),
        }))
    }

    fn provider(&self, requested: Option<&str>, fallback: Option<&str>, role: &str) -> Result<Arc<dyn LanguageModel>, ApiError> {
        let id = requested.or(fallback).ok_or_else(|| {
            ApiError::Unavailable(format!("no {role} provider configured"))
        })?;
        Ok(self.gateway.get(id)?)
    }

    pub fn chat_lm(&self, requested: Option<&str>) -> Result<Arc<dyn LanguageModel>, ApiError> {
        self.provider(requested, self.config.chat_provider(), "chat")
    }

    pub fn scoring_lm(&self, requested: Option<&str>) -> Result<Arc<dyn LanguageModel>, ApiError> {
        self.provider(requested, self.config.scoring_provider(), "scoring")
    }

    pub fn embedding_lm(&self, requested: Option<&str>) -> Result<Arc<dyn LanguageModel>, ApiError> {
        self.provider(requested, self.config.embedding_provider(), "embedding")
    }

    /// Wraps `lm` so it refuses calls once `progress` is cancelled.
    pub fn cancellable(lm: Arc<dyn LanguageModel>, progress: &Arc<Progress>) -> Arc<dyn LanguageModel> {
        Arc::new(CancellableLm::new(lm, Arc::clone(progress)))
    }
}

pub fn format_from_path(path: &std::path::Path) -> DataFormat {
    match path.extension().and_then(|e| e.to_str()) {
        Some(ext) if ext.eq_ignore_ascii_case("jsonl") || ext.eq_ignore_ascii_case("ndjson") => {
            DataFormat::Jsonl
        }
        _ => DataFormat::Csv,
    }
}
