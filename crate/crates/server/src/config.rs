//! Service configuration, loaded from TOML.
//!
//! Secrets never appear in the file: providers name the environment
//! variable holding their API key. Relative paths resolve against the
//! directory containing the config file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use toxlens_core::chunker::ChunkParams;
use toxlens_core::classify::{LabelSchema, StubMode};
use toxlens_core::lm_gateway::{ProviderSpec, RetryPolicy};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub server: ServerConfig,
    pub defaults: Defaults,
    pub retry: RetryPolicy,
    pub providers: Vec<ProviderSpec>,
    pub classifiers: Vec<ClassifierConfig>,
    pub schemas: Vec<LabelSchema>,
    pub ensembles: Vec<EnsembleEntry>,
    pub chunker: ChunkParams,
    pub summarizer: SummarizerConfig,
    pub benchmarks: Vec<BenchmarkConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerConfig {
    pub bind: String,
    /// SQLite file, or `:memory:`.
    pub database: String,
    /// Jobs running at once; 0 means the number of CPUs.
    pub max_concurrent_jobs: usize,
    /// Jobs allowed to wait for a worker before submissions are refused.
    pub max_queued_jobs: usize,
    /// Reuse the handle of an identical earlier job instead of re-running it.
    pub result_cache: bool,
    /// TOML file overriding the column synonym lists.
    pub columns_file: Option<PathBuf>,
    /// Messages kept in an assistant session's LM context.
    pub assistant_max_context: usize,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:8080".into(),
            database: ":memory:".into(),
            max_concurrent_jobs: 0,
            max_queued_jobs: 64,
            result_cache: true,
            columns_file: None,
            assistant_max_context: toxlens_core::assistant::DEFAULT_MAX_CONTEXT,
        }
    }
}

impl ServerConfig {
    pub fn worker_count(&self) -> usize {
        if self.max_concurrent_jobs == 0 {
            std::thread::available_parallelism().map_or(1, |n| n.get())
        } else {
            self.max_concurrent_jobs
        }
    }
}

/// Providers and classifiers used when a request does not name one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Defaults {
    pub chat_provider: Option<String>,
    pub scoring_provider: Option<String>,
    pub embedding_provider: Option<String>,
    pub classifier: Option<String>,
    pub schema: String,
}

impl Default for Defaults {
    fn default() -> Self {
        Self {
            chat_provider: None,
            scoring_provider: None,
            embedding_provider: None,
            classifier: None,
            schema: toxlens_core::classify::EDOS_BINARY.into(),
        }
    }
}

fn default_max_batch() -> usize {
    16
}

fn default_backend_parallel() -> usize {
    2
}

fn default_backend_timeout() -> u64 {
    60
}

fn default_stub_mode() -> StubMode {
    StubMode::Hashed
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ClassifierConfig {
    /// Deterministic in-process backend.
    Stub {
        id: String,
        #[serde(default = "default_stub_mode")]
        behaviour: StubMode,
        /// Empty means every schema.
        #[serde(default)]
        schemas: Vec<String>,
        #[serde(default = "default_max_batch")]
        max_batch: usize,
    },
    /// Remote inference endpoint: POST `{texts, schema_id}` → `{scores}`.
    Http {
        id: String,
        url: String,
        schemas: Vec<String>,
        #[serde(default = "default_max_batch")]
        max_batch: usize,
        #[serde(default = "default_backend_parallel")]
        max_parallel: usize,
        #[serde(default = "default_backend_timeout")]
        timeout_secs: u64,
    },
}

impl ClassifierConfig {
    pub fn id(&self) -> &str {
        match self {
            ClassifierConfig::Stub { id, .. } | ClassifierConfig::Http { id, .. } => id,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleEntry {
    pub id: String,
    pub members: Vec<String>,
    pub fallback: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SummarizerConfig {
    pub parallelism: usize,
    /// Replacement for the bundled summary instruction.
    pub template: Option<PathBuf>,
}

impl Default for SummarizerConfig {
    fn default() -> Self {
        Self {
            parallelism: 2,
            template: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub name: String,
    pub path: PathBuf,
    /// `csv` or `jsonl`; inferred from the extension when absent.
    #[serde(default)]
    pub format: Option<String>,
    /// Column holding the gold label, when several could.
    #[serde(default)]
    pub label_column: Option<String>,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let config: Config = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut config = Self::from_toml(&text)?;
        if let Some(dir) = path.parent() {
            config.resolve_paths(dir);
        }
        Ok(config)
    }

    /// Makes relative paths relative to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = self.server.columns_file.as_mut() {
            fix(p);
        }
        if let Some(p) = self.summarizer.template.as_mut() {
            fix(p);
        }
        for b in &mut self.benchmarks {
            fix(&mut b.path);
        }
        if self.server.database != ":memory:" {
            let mut db = PathBuf::from(&self.server.database);
            fix(&mut db);
            self.server.database = db.to_string_lossy().into_owned();
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut ids = std::collections::BTreeSet::new();
        for c in &self.classifiers {
            if !ids.insert(c.id()) {
                return Err(ConfigError::Invalid(format!("duplicate classifier `{}`", c.id())));
            }
        }
        for e in &self.ensembles {
            if !ids.insert(&e.id) {
                return Err(ConfigError::Invalid(format!(
                    "ensemble id `{}` clashes with another classifier",
                    e.id
                )));
            }
        }
        let providers: std::collections::BTreeSet<&str> =
            self.providers.iter().map(|p| p.provider_id.as_str()).collect();
        for (role, id) in [
            ("chat_provider", &self.defaults.chat_provider),
            ("scoring_provider", &self.defaults.scoring_provider),
            ("embedding_provider", &self.defaults.embedding_provider),
        ] {
            if let Some(id) = id {
                if !providers.contains(id.as_str()) {
                    return Err(ConfigError::Invalid(format!("defaults.{role} names unknown provider `{id}`")));
                }
            }
        }
        if self.server.max_queued_jobs == 0 {
            return Err(ConfigError::Invalid("server.max_queued_jobs must be at least 1".into()));
        }
        self.chunker
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    /// Default chat provider, falling back to the only provider when there is one.
    pub fn chat_provider(&self) -> Option<&str> {
        self.defaults
            .chat_provider
            .as_deref()
            .or_else(|| self.sole_provider())
    }

    pub fn scoring_provider(&self) -> Option<&str> {
        self.defaults
            .scoring_provider
            .as_deref()
            .or_else(|| self.chat_provider())
    }

    pub fn embedding_provider(&self) -> Option<&str> {
        self.defaults
            .embedding_provider
            .as_deref()
            .or_else(|| self.chat_provider())
    }

    fn sole_provider(&self) -> Option<&str> {
        match self.providers.as_slice() {
            [only] => Some(&only.provider_id),
            _ => None,
        }
    }

    pub fn default_classifier(&self) -> Option<&str> {
        self.defaults.classifier.as_deref().or_else(|| {
            self.classifiers.first().map(ClassifierConfig::id)
        })
    }
}
