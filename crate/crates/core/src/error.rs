use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CrfError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CrfError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("instance too large for enumeration: {labels}^{nodes} configurations exceeds cap {cap}")]
    InstanceTooLarge { labels: usize, nodes: usize, cap: u64 },

    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    TrainingDiverged { epoch: usize, loss: f64 },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: parse error at line {line}, column {column}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("{}: unsupported schema_version {found} (expected {expected})", path.display())]
    SchemaVersion {
        path: PathBuf,
        found: String,
        expected: u32,
    },
}

impl CrfError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        CrfError::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        CrfError::InvalidParameter(msg.into())
    }
}
