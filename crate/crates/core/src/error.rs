use std::path::PathBuf;

/// Errors produced anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("index {index} out of range for size {size} in {op}")]
    Index {
        op: &'static str,
        index: usize,
        size: usize,
    },

    #[error("{op} expects a scalar, got shape {shape:?}")]
    Rank { op: &'static str, shape: Vec<usize> },

    #[error("sequence length {len} exceeds max_len {max_len}")]
    Length { len: usize, max_len: usize },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("cross-entropy over a batch where every row is ignored")]
    UndefinedMean,

    #[error("missing gradient for parameter `{0}`")]
    MissingGradient(String),

    #[error("learning-rate step {step} out of range for schedule of {total} steps")]
    ScheduleStep { step: usize, total: usize },

    #[error("pairing mismatch: {0}")]
    Pairing(String),

    #[error("target labels of pair `{pair_id}` are not readable in mode `{mode}`")]
    LabelAccess { pair_id: String, mode: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid BIO tags in pair `{pair_id}`: {message}")]
    Bio { pair_id: String, message: String },

    #[error("data spec error: {0}")]
    Spec(String),

    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Dimension {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    /// True for errors caused by user configuration or input data rather than
    /// failures during execution.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Spec(_)
                | Error::Parse { .. }
                | Error::Bio { .. }
                | Error::LabelAccess { .. }
                | Error::VocabMismatch(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
