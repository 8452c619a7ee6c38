// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every module of the toolkit.

use std::path::PathBuf;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Broad failure class, mapped onto CLI exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Invalid configuration or registry content (exit 2).
    Config,
    /// Malformed, misaligned or insufficient data (exit 3).
    Data,
    /// Model, training or I/O failure while running (exit 4).
    Runtime,
}

impl ErrorClass {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorClass::Config => 2,
            ErrorClass::Data => 3,
            ErrorClass::Runtime => 4,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("registry has no entry for {0}")]
    Registry(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}:{line}: unknown label {label:?} for task {task}")]
    Label {
        path: PathBuf,
        line: usize,
        label: String,
        task: String,
    },

    #[error("duplicate instance id {id:?} in {path}")]
    DuplicateId { path: PathBuf, id: String },

    #[error("alignment error: {} orphan id(s): {}", .orphans.len(), .orphans.join(", "))]
    Alignment { orphans: Vec<String> },

    #[error("data error: {0}")]
    Data(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("context overflow: {len} tokens exceeds limit of {limit}")]
    ContextOverflow { len: usize, limit: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("adapter incompatible with model: {0}")]
    AdapterMismatch(String),

    #[error("backend does not support {0}")]
    Unsupported(String),

    #[error("non-finite loss {loss} at step {step}")]
    NonFinite { step: usize, loss: f64 },

    #[error("zero variance: {0}")]
    ZeroVariance(String),

    #[error("answer surfaces overlap with latent surfaces for language {lang}; pass --allow-overlap to trace it anyway")]
    Overlap { lang: String },

    #[error("missing artifacts: {}", .0.join(", "))]
    MissingArtifacts(Vec<String>),

    #[error("instance {id}: {source}")]
    Instance {
        id: String,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid blob: {0}")]
    Blob(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::Registry(_) => ErrorClass::Config,
            Error::Parse { .. }
            | Error::Label { .. }
            | Error::DuplicateId { .. }
            | Error::Alignment { .. }
            | Error::Data(_)
            | Error::ZeroVariance(_)
            | Error::Overlap { .. }
            | Error::MissingArtifacts(_)
            | Error::Csv(_)
            | Error::Json(_) => ErrorClass::Data,
            Error::Instance { source, .. } => source.class(),
            _ => ErrorClass::Runtime,
        }
    }

    pub fn exit_code(&self) -> i32 {
        self.class().exit_code()
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
