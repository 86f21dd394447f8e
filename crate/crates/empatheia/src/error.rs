//! Crate-wide error type with a stable mapping to process exit codes.

use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum EmpatheiaError {
    /// Corpus schema violation tied to a specific record and field.
    #[error("schema violation in {conversation_id}: {field}: {message}")]
    Schema {
        conversation_id: String,
        field: String,
        message: String,
    },

    /// Invalid enum label, config value, or other domain-rule breach.
    #[error("domain violation: {0}")]
    Domain(String),

    /// Tensor width/shape disagreement between configured contracts.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// Sequence longer than the backbone supports.
    #[error("sequence too long: {0}")]
    Length(String),

    /// Generated or stored text does not follow the expected layout.
    #[error("parse failure: {0}")]
    Parse(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Missing prerequisite artifact (checkpoint, feature store, ...).
    #[error("precondition not met: {0}")]
    Precondition(String),

    /// Non-finite loss or other numerical failure during training.
    #[error("numerical abort: {0}")]
    Numerical(String),
}

impl EmpatheiaError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn domain(msg: impl Into<String>) -> Self {
        Self::Domain(msg.into())
    }

    pub fn dimension(msg: impl Into<String>) -> Self {
        Self::Dimension(msg.into())
    }

    pub fn precondition(msg: impl Into<String>) -> Self {
        Self::Precondition(msg.into())
    }

    /// Process exit code for the CLI: 1 domain violation, 2 I/O,
    /// 3 unmet precondition, 4 numerical abort.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Schema { .. }
            | Self::Domain(_)
            | Self::Dimension(_)
            | Self::Length(_)
            | Self::Parse(_) => 1,
            Self::Io { .. } => 2,
            Self::Precondition(_) => 3,
            Self::Numerical(_) => 4,
        }
    }
}
