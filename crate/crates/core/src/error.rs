use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite value at layer {layer}")]
    Numeric { layer: usize },

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: usize, actual: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error(
        "calibration error: target epsilon {target} not bracketed \
         (sigma {sigma_lo} -> eps {eps_at_lo}, sigma {sigma_hi} -> eps {eps_at_hi})"
    )]
    Calibration {
        target: f64,
        sigma_lo: f64,
        eps_at_lo: f64,
        sigma_hi: f64,
        eps_at_hi: f64,
    },

    #[error("privacy loss is unbounded at every order")]
    Unbounded,

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable tag used in machine-parsable CLI error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Schema(_) => "schema",
            Error::Config(_) => "config",
            Error::Numeric { .. } => "numeric",
            Error::Shape { .. } => "shape",
            Error::Domain(_) => "domain",
            Error::Calibration { .. } => "calibration",
            Error::Unbounded => "unbounded",
            Error::UndefinedMetric(_) => "metric",
            Error::Parse(_) => "parse",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
