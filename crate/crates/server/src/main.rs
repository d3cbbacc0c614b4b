use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use toxlens_core::classify::ReportFormat;
use toxlens_core::ppl_gain::Granularity;
use toxlens_core::store::DataFormat;
use toxlens_core::Progress;
use toxlens_server::service::{self, ClassifyRequest, PersonaRequest, PplGainRequest, ReportRequest, SummarizeRequest};
use toxlens_server::state::format_from_path;
use toxlens_server::{router, AppState, Config};
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(name = "toxlens", version, about = "Conversation toxicity analysis service and CLI")]
struct Cli {
    /// TOML config file.
    #[arg(long, short, global = true, env = "TOXLENS_CONFIG")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the HTTP API.
    Serve {
        /// Overrides `server.bind`.
        #[arg(long)]
        bind: Option<String>,
    },
    /// Load a dataset file into the store and print its descriptor.
    Ingest {
        file: PathBuf,
        #[arg(long)]
        name: Option<String>,
        #[arg(long)]
        format: Option<String>,
    },
    /// Classify every message of a dataset.
    Classify {
        #[command(flatten)]
        source: Source,
        #[arg(long)]
        classifier: Option<String>,
        #[arg(long)]
        schema: Option<String>,
        #[arg(long, default_value_t = 2)]
        top_k: usize,
    },
    /// Classify a labelled dataset and print the evaluation report.
    Eval {
        #[command(flatten)]
        source: Source,
        #[arg(long)]
        classifier: Option<String>,
        #[arg(long)]
        schema: Option<String>,
        /// `json` or `csv`.
        #[arg(long, default_value = "json")]
        format: String,
    },
    /// Perplexity-gain attribution of an output to conversation units.
    PplGain {
        #[command(flatten)]
        source: Source,
        #[arg(long)]
        conversation: String,
        #[arg(long)]
        output: String,
        #[arg(long, default_value = "message")]
        granularity: String,
        #[arg(long)]
        provider: Option<String>,
    },
    /// Toxic-aware per-speaker summaries of one conversation.
    Summarize {
        #[command(flatten)]
        source: Source,
        #[arg(long)]
        conversation: String,
        #[arg(long)]
        classifier: Option<String>,
        #[arg(long)]
        schema: Option<String>,
    },
    /// Summarise conversations, then profile one speaker's personality.
    Persona {
        #[command(flatten)]
        source: Source,
        speaker: String,
        /// Conversations to summarise first; all by default.
        #[arg(long)]
        conversation: Vec<String>,
        #[arg(long)]
        provider: Option<String>,
    },
    /// Run the scripted mock LM server.
    MockLm {
        #[arg(long, default_value = "127.0.0.1:8090")]
        bind: String,
        /// JSON script with fixtures.
        #[arg(long)]
        script: Option<PathBuf>,
    },
}

/// Either a stored dataset id or a file to ingest first.
#[derive(Args)]
struct Source {
    #[arg(long, conflicts_with = "file", required_unless_present = "file")]
    dataset: Option<String>,
    #[arg(long)]
    file: Option<PathBuf>,
}

impl Source {
    fn resolve(&self, state: &AppState) -> Result<String> {
        match (&self.dataset, &self.file) {
            (Some(id), _) => Ok(id.clone()),
            (None, Some(file)) => Ok(ingest(state, file, None, None)?.descriptor.dataset_id),
            (None, None) => bail!("pass --dataset or --file"),
        }
    }
}

fn ingest(
    state: &AppState,
    file: &Path,
    name: Option<&str>,
    format: Option<&str>,
) -> Result<toxlens_core::store::IngestReport> {
    let raw = std::fs::read(file).with_context(|| format!("reading {}", file.display()))?;
    let format = match format {
        Some(f) => f.parse::<DataFormat>()?,
        None => format_from_path(file),
    };
    let name = name
        .map(str::to_string)
        .or_else(|| file.file_name().map(|n| n.to_string_lossy().into_owned()))
        .unwrap_or_else(|| "upload".into());
    Ok(service::upload_dataset(state, &name, &raw, format)?)
}

fn print<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn load_config(path: Option<&Path>) -> Result<Config> {
    match path {
        Some(p) => Config::load(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(Config::default()),
    }
}

#[tokio::main]
async fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();

    if let Command::MockLm { bind, script } = &cli.command {
        let script = match script {
            Some(path) => toxlens_mock::MockScript::from_file(path)?,
            None => toxlens_mock::MockScript::default(),
        };
        let mock = toxlens_mock::MockLm::bind(bind.parse()?, script).await?;
        tracing::info!(base_url = %mock.base_url(), "mock LM listening");
        mock.wait().await;
        return Ok(());
    }

    let mut config = load_config(cli.config.as_deref())?;
    if let Command::Serve { bind: Some(bind) } = &cli.command {
        config.server.bind = bind.clone();
    }
    let state = AppState::new(config)?;
    let progress = || Arc::new(Progress::new());

    match cli.command {
        Command::Serve { .. } => {
            let bind = state.config.server.bind.clone();
            let listener = tokio::net::TcpListener::bind(&bind)
                .await
                .with_context(|| format!("binding {bind}"))?;
            tracing::info!(addr = %listener.local_addr()?, "listening");
            axum::serve(listener, router(Arc::clone(&state)))
                .with_graceful_shutdown(async {
                    let _ = tokio::signal::ctrl_c().await;
                })
                .await?;
        }
        Command::Ingest { file, name, format } => {
            print(&ingest(&state, &file, name.as_deref(), format.as_deref())?)?;
        }
        Command::Classify {
            source,
            classifier,
            schema,
            top_k,
        } => {
            let req = ClassifyRequest {
                dataset_id: Some(source.resolve(&state)?),
                classifier,
                schema,
                top_k,
                ..ClassifyRequest::default()
            };
            print(&service::run_classify(&state, &req, progress()).await?)?;
        }
        Command::Eval {
            source,
            classifier,
            schema,
            format,
        } => {
            let format: ReportFormat = format.parse()?;
            let dataset_id = source.resolve(&state)?;
            let req = ClassifyRequest {
                dataset_id: Some(dataset_id.clone()),
                classifier: classifier.clone(),
                schema: schema.clone(),
                ..ClassifyRequest::default()
            };
            service::run_classify(&state, &req, progress()).await?;
            let report = service::report(
                &state,
                &ReportRequest {
                    dataset_id: Some(dataset_id),
                    classifier,
                    schema,
                    ..ReportRequest::default()
                },
            )?;
            print!("{}", report.export(format));
            if format == ReportFormat::Json {
                println!();
            }
        }
        Command::PplGain {
            source,
            conversation,
            output,
            granularity,
            provider,
        } => {
            let granularity: Granularity = serde_json::from_value(serde_json::Value::String(granularity))
                .context("granularity must be `message` or `sentence`")?;
            let req = PplGainRequest {
                dataset_id: source.resolve(&state)?,
                conversation_key: conversation,
                output,
                granularity,
                provider,
                use_cache: true,
            };
            print(&service::run_ppl_gain(&state, &req, progress()).await?)?;
        }
        Command::Summarize {
            source,
            conversation,
            classifier,
            schema,
        } => {
            let req = SummarizeRequest {
                dataset_id: source.resolve(&state)?,
                conversation_key: conversation,
                classifier,
                schema,
                ..SummarizeRequest::default()
            };
            print(&service::run_summarize(&state, &req, progress()).await?)?;
        }
        Command::Persona {
            source,
            speaker,
            conversation,
            provider,
        } => {
            let dataset_id = source.resolve(&state)?;
            let keys = if conversation.is_empty() {
                state.store.conversation_keys(&dataset_id)?
            } else {
                conversation
            };
            for key in &keys {
                let conv = state.store.get_conversation(&dataset_id, key)?;
                if !conv.participants.contains(&speaker) {
                    continue;
                }
                let req = SummarizeRequest {
                    dataset_id: dataset_id.clone(),
                    conversation_key: key.clone(),
                    ..SummarizeRequest::default()
                };
                service::run_summarize(&state, &req, progress()).await?;
            }
            let req = PersonaRequest {
                dataset_id: Some(dataset_id),
                conversation_keys: Some(keys),
                provider,
                ..PersonaRequest::default()
            };
            print(&service::run_persona(&state, &speaker, &req, progress()).await?)?;
        }
        Command::MockLm { .. } => unreachable!("handled above"),
    }
    Ok(())
}
