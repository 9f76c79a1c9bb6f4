use std::path::PathBuf;

/// Errors produced by the detection engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    /// Malformed UFT1 container or tensor that violates its invariants.
    #[error("{0}")]
    Format(String),
    /// Shapes of two inputs do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// Out-of-range parameter value.
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("bank: {0}")]
    Bank(String),
    #[error("empty input: {0}")]
    Empty(&'static str),
    /// Input contains NaN or infinity where finite values are required.
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    /// A metric is not defined for the given input (e.g. AUROC over one class).
    #[error("undefined {0}")]
    Undefined(&'static str),
    #[error("json {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
