use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("decode error at byte {offset}: {cause}")]
    Decode { offset: usize, cause: String },

    #[error("encode error: {0}")]
    Encode(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: String, actual: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty region")]
    EmptyRegion,

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("training data contains a single class")]
    SingleClass,

    #[error(
        "SMO did not converge after {iterations} pair updates (max KKT violation {violation:.3e})"
    )]
    NotConverged { iterations: usize, violation: f64 },

    #[error("training diverged at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },

    #[error("model file: {0}")]
    Format(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dims(expected: impl ToString, actual: impl ToString) -> Self {
        Error::DimensionMismatch {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
