use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Backend(#[from] candle_core::Error),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("missing tensor `{0}`")]
    MissingKey(String),

    #[error("shape mismatch for `{name}`: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("arch descriptor line {line}: {msg}")]
    Arch { line: usize, msg: String },

    #[error("invalid partition at boundary {index}: {msg}")]
    Partition { index: usize, msg: String },

    #[error("surgery was already applied to this network")]
    SurgeryApplied,

    #[error("non-finite values in {0}")]
    NonFinite(String),

    #[error("config `{field}`: {msg}")]
    Config { field: String, msg: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("training diverged at step {step}: non-finite `{term}` (last checkpoint: {})",
        last_checkpoint.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "none".into()))]
    Divergence {
        step: u64,
        term: String,
        last_checkpoint: Option<PathBuf>,
    },

    #[error("data: {0}")]
    Data(String),

    #[error("{path}: {msg}")]
    Decode { path: PathBuf, msg: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("safetensors: {0}")]
    SafeTensors(#[from] safetensors::SafeTensorError),
}

impl Error {
    pub fn config(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
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
}
