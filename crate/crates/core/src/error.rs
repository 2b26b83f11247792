use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Caller misuse: bad arguments, unknown adapter, K out of range.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed input file or corrupted checkpoint.
    #[error("format error: {0}")]
    Format(String),

    #[error("unsupported checkpoint format_version {found} (this build reads version {supported}); re-export the checkpoint with a matching build")]
    UnsupportedVersion { found: u32, supported: u32 },

    /// Invalid configuration or a degenerate dataset that makes a constant undefined.
    #[error("config error: {0}")]
    Config(String),

    /// A numeric argument outside the domain of the function.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("unknown {kind} '{id}'")]
    Lookup { kind: &'static str, id: String },

    /// Non-finite values in training; carries a diagnostic dump of the offending batch.
    #[error("numeric error: {message}\n{dump}")]
    Numeric { message: String, dump: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag for the error class.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Usage(_) => "usage",
            Error::Io { .. } => "io",
            Error::Format(_) => "format",
            Error::UnsupportedVersion { .. } => "unsupported_version",
            Error::Config(_) => "config",
            Error::Domain(_) => "domain",
            Error::Shape(_) => "shape",
            Error::Lookup { .. } => "lookup",
            Error::Numeric { .. } => "numeric",
        }
    }
}
