use std::path::PathBuf;

use thiserror::Error;

use crate::fracdiff::DiagnosticRow;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("series too short: need at least {required} values, got {actual}")]
    SeriesTooShort { required: usize, actual: usize },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("no order in the grid passes the ADF test ({} rows evaluated)", diagnostics.len())]
    NoStationaryOrder { diagnostics: Vec<DiagnosticRow> },

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFinite { epoch: usize, batch: usize },

    #[error("training slice of split {split} holds a single class ({class}); refusing to fit")]
    SingleClass { split: usize, class: i8 },

    #[error("split {index} failed: {source}")]
    Split {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{module}: {source}")]
    Module {
        module: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("model format error: {0}")]
    Format(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Wraps the error with the name of the pipeline stage that produced it.
    pub fn in_module(self, module: &'static str) -> Self {
        Error::Module {
            module,
            source: Box::new(self),
        }
    }
}
