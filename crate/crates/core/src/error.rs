use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the allocator can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid tensor: {0}")]
    Tensor(String),

    #[error("layer `{layer}`: {msg}")]
    Shape { layer: String, msg: String },

    #[error("invalid network: {0}")]
    Network(String),

    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error("predicted probability of true class {label} is zero; loss is infinite")]
    ZeroProbability { label: usize },

    #[error("sample set is empty")]
    EmptySamples,

    #[error("invalid bit-width set: {0}")]
    Bits(String),

    #[error("non-finite value in quantizer input at index {0}")]
    NonFinite(usize),

    #[error("table: {0}")]
    Table(String),

    #[error("checkpoint {checkpoint} exceeds the {available} available samples")]
    Checkpoint { checkpoint: usize, available: usize },

    #[error(
        "infeasible target: capacity {capacity} bits is below the {minimum} bits \
         required by the minimum bit-width of every layer"
    )]
    Infeasible { capacity: u64, minimum: u64 },

    #[error("{what} needs {required} but the budget is {limit}; {advice}")]
    Budget {
        what: &'static str,
        required: u128,
        limit: u128,
        advice: &'static str,
    },

    #[error("manifest field `{field}`: {msg}")]
    Manifest { field: String, msg: String },

    #[error("{step}: {source}")]
    Step {
        step: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(layer: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Shape {
            layer: layer.into(),
            msg: msg.into(),
        }
    }

    pub fn manifest(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Manifest {
            field: field.into(),
            msg: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn in_step(self, step: &'static str) -> Self {
        Error::Step {
            step,
            source: Box::new(self),
        }
    }

    /// Strips step context wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Step { source, .. } => source.root(),
            other => other,
        }
    }

    /// Broad category used for process exit codes and C error codes.
    pub fn kind(&self) -> ErrorKind {
        match self.root() {
            Error::Manifest { .. } => ErrorKind::Manifest,
            Error::Infeasible { .. } => ErrorKind::Infeasible,
            Error::Io { .. } | Error::Csv(_) => ErrorKind::Io,
            Error::Budget { .. } => ErrorKind::Budget,
            _ => ErrorKind::Numeric,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Manifest,
    Infeasible,
    Numeric,
    Budget,
    Io,
}
