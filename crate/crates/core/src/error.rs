use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite value in `{segment}`")]
    Numeric { segment: String },

    #[error("invalid configuration: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("training diverged ({model}): {detail}")]
    Training { model: String, detail: String },

    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),

    #[error("index out of range: {0}")]
    OutOfRange(String),

    #[error("unsupported format version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },

    #[error("integrity check failed: {0}")]
    Integrity(String),

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("malformed input: {0}")]
    Parse(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable category, used by the CLI on failure.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::Numeric { .. } => "numeric",
            Error::Config(_) => "config",
            Error::Training { .. } => "training",
            Error::InsufficientSamples(_) => "insufficient-samples",
            Error::OutOfRange(_) => "out-of-range",
            Error::UnsupportedVersion { .. } => "unsupported-version",
            Error::Integrity(_) => "integrity",
            Error::MissingArtifact(_) => "missing-artifact",
            Error::Parse(_) => "parse",
            Error::Io(_) => "io",
            Error::Json(_) => "parse",
        }
    }

    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(vec![msg.into()])
    }
}
