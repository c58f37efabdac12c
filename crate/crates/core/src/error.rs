use std::path::PathBuf;

/// Errors produced anywhere in the synthesis stack.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid volume: {0}")]
    InvalidVolume(String),

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("orientation mismatch: stack is {stack}, requested {requested}")]
    OrientationMismatch { stack: String, requested: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("non-finite value in layer {layer} ({kind})")]
    NonFinite { layer: usize, kind: String },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("missing target volume for subject {0}")]
    MissingTarget(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("usage: {0}")]
    Usage(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short stable tag used as the CLI error prefix.
    pub fn tag(&self) -> &'static str {
        match self {
            Error::InvalidVolume(_) | Error::DimMismatch(_) | Error::OrientationMismatch { .. } => {
                "volume"
            }
            Error::Shape(_) | Error::NonFinite { .. } | Error::Numerical(_) => "numeric",
            Error::Config(_) => "config",
            Error::Usage(_) => "usage",
            Error::EmptyDataset(_) | Error::MissingTarget(_) => "data",
            Error::Format(_) | Error::Json(_) => "format",
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
