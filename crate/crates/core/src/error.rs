use std::path::PathBuf;

use thiserror::Error;

/// Error type shared by every stage of the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied argument or configuration value is unusable.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Input data violates a precondition (empty split, too few items, ...).
    #[error("invalid data: {0}")]
    Data(String),

    /// A JSON Lines input could not be parsed.
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    /// A text contains a literal reserved marker string.
    #[error("text contains reserved marker {0}")]
    ReservedMarker(String),

    /// A tokenized sequence does not fit into the model context.
    #[error("context overflow{}: {len} tokens exceed context length {context}", .id.as_ref().map(|i| format!(" in example {i}")).unwrap_or_default())]
    ContextOverflow {
        id: Option<String>,
        len: usize,
        context: usize,
    },

    /// A style identifier is not known to the model or corpus.
    #[error("unknown style {0:?}")]
    UnknownStyle(String),

    /// Training produced a non-finite loss.
    #[error("training diverged at step {step}: loss is not finite")]
    Diverged { step: u64 },

    /// A numeric input to a loss or metric is not finite.
    #[error("non-finite input: {0}")]
    NonFinite(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    /// A checkpoint file is truncated or has an unexpected layout.
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
