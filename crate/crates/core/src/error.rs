use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("rejected input: {0}")]
    InvalidInput(String),

    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: u64, detail: String },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("missing artifact {path}: {hint}")]
    MissingArtifact { path: PathBuf, hint: String },

    #[error("config hash mismatch: checkpoint has {found}, current config is {expected}")]
    ConfigMismatch { expected: String, found: String },

    #[error("refusing to overwrite {0} (pass --force)")]
    WouldOverwrite(PathBuf),

    #[error("run directory {0} is locked by another process")]
    Locked(PathBuf),

    #[error("malformed checkpoint {path}: {detail}")]
    Checkpoint { path: PathBuf, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("png {path}: {detail}")]
    Png { path: PathBuf, detail: String },
}

impl Error {
    /// Stable machine-readable identifier, used by the CLI error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::InvalidInput(_) => "invalid_input",
            Error::Divergence { .. } => "divergence",
            Error::UndefinedMetric(_) => "undefined_metric",
            Error::MissingArtifact { .. } => "missing_artifact",
            Error::ConfigMismatch { .. } => "config_mismatch",
            Error::WouldOverwrite(_) => "would_overwrite",
            Error::Locked(_) => "locked",
            Error::Checkpoint { .. } => "checkpoint",
            Error::Io { .. } => "io",
            Error::Json { .. } => "json",
            Error::Config(_) => "config",
            Error::Png { .. } => "png",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }
}
