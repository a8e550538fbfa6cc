use std::path::PathBuf;

/// Errors raised anywhere in the ladder pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("config key `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("unsupported tape operation `{0}`")]
    UnsupportedOp(String),

    #[error("tape has already been consumed by a backward pass")]
    TapeConsumed,

    #[error("loss must be a 1x1 scalar, got {rows}x{cols}")]
    LossNotScalar { rows: usize, cols: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("non-finite gradient for parameter `{param}`")]
    NonFiniteGradient { param: String },

    #[error("sequence of length {len} exceeds max length {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("layer {0} is not an inserted layer")]
    NotInserted(usize),

    #[error("missing embeddings for scheduled layer {0}")]
    MissingLayer(usize),

    #[error("embedding cache corrupt: {0}")]
    CacheCorrupt(String),

    #[error("schedule mismatch: {0}")]
    ScheduleMismatch(String),

    #[error("backbone signature mismatch: {0}")]
    SignatureMismatch(String),

    #[error("checkpoint corrupt: {0}")]
    CheckpointCorrupt(String),

    #[error("split `{0}` is empty")]
    EmptySplit(String),

    #[error("node list is empty")]
    EmptyNodes,
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Bad inputs as opposed to runtime failures; used for CLI exit codes.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. }
                | Error::Validation(_)
                | Error::Config { .. }
                | Error::Shape(_)
                | Error::SequenceTooLong { .. }
                | Error::NotInserted(_)
                | Error::MissingLayer(_)
                | Error::CacheCorrupt(_)
                | Error::ScheduleMismatch(_)
                | Error::SignatureMismatch(_)
                | Error::CheckpointCorrupt(_)
                | Error::EmptySplit(_)
                | Error::EmptyNodes
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
