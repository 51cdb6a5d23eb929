use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: String,
        expected: String,
        got: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("partition error at line {line}: {message}")]
    PartitionParse { line: usize, message: String },

    #[error("partition tiling violation: {0}")]
    PartitionTiling(String),

    #[error("batch norm has no running statistics (run in Train mode or load a checkpoint first)")]
    BatchNormUninitialized,

    #[error("missing gradient for parameter `{0}`")]
    MissingGrad(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("manifest error at line {line}: {message}")]
    Manifest { line: usize, message: String },

    #[error("rate-distortion data error: {0}")]
    RdCurve(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("training aborted: {0}")]
    Training(String),
}

impl Error {
    pub fn shape(context: impl Into<String>, expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            expected: expected.into(),
            got: got.into(),
        }
    }

    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}
