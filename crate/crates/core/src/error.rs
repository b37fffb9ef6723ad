use std::path::PathBuf;

use thiserror::Error;

/// Every failure the engine can report.
#[derive(Debug, Error)]
pub enum KppError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot decode image {path}: {message}")]
    Decode { path: PathBuf, message: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("the visible patch set is empty")]
    EmptyVisibleSet,

    #[error("instance too large: {0}")]
    TooLarge(String),

    #[error("operation not supported by oracle {oracle}: {what}")]
    Unsupported { oracle: String, what: String },

    #[error("cannot reach oracle at {url}: {message}")]
    Connection { url: String, message: String },

    #[error("oracle request to {url} timed out after {attempts} attempt(s)")]
    Timeout { url: String, attempts: u32 },

    #[error("malformed oracle response: {0}")]
    Protocol(String),

    #[error("oracle error {code}: {message}")]
    Server { code: String, message: String },

    #[error("oracle geometry mismatch: server has patch_size {server_patch}, image_side {server_side}; local grid has patch_size {local_patch}, image_side {local_side}")]
    GeometryMismatch {
        server_patch: usize,
        server_side: usize,
        local_patch: usize,
        local_side: usize,
    },

    #[error("greedy step {step}: {source}")]
    Step {
        step: usize,
        #[source]
        source: Box<KppError>,
    },

    #[error("cannot write output: {0}")]
    Output(String),
}

impl KppError {
    /// True for failures that originate in a reconstruction oracle (local or remote).
    pub fn is_oracle_failure(&self) -> bool {
        match self {
            KppError::EmptyVisibleSet
            | KppError::Unsupported { .. }
            | KppError::Connection { .. }
            | KppError::Timeout { .. }
            | KppError::Protocol(_)
            | KppError::Server { .. }
            | KppError::GeometryMismatch { .. } => true,
            KppError::Step { source, .. } => source.is_oracle_failure(),
            _ => false,
        }
    }

    pub(crate) fn at_step(self, step: usize) -> Self {
        KppError::Step {
            step,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, KppError>;
