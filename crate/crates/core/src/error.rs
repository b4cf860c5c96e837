use std::path::PathBuf;

use crate::tensor::Shape;

/// Errors produced by tensor algebra, mixers, models and file I/O.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch ({lhs} vs {rhs})")]
    ShapeMismatch {
        op: &'static str,
        lhs: Shape,
        rhs: Shape,
    },
    #[error("invalid shape {0:?}: rank must be 1..=3 and every extent >= 1")]
    InvalidShape(Vec<usize>),
    #[error("data length {len} does not match shape {shape}")]
    DataLength { len: usize, shape: Shape },
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },
    #[error("{op}: imaginary residue {residue:e} exceeds {limit:e}")]
    ImaginaryResidue {
        op: &'static str,
        residue: f64,
        limit: f64,
    },
    #[error("{0}")]
    Invalid(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
