//! HTTP service and job manager for conversation toxicity analysis.

pub mod config;
pub mod error;
pub mod jobs;
pub mod routes;
pub mod service;
pub mod state;

pub use config::Config;
pub use error::ApiError;
pub use routes::router;
pub use state::AppState;
