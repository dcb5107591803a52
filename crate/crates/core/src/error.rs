use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not agree.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A configuration or call argument is outside its valid range.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("index out of range: {0}")]
    Index(String),

    /// An operation was called on an object in the wrong state
    /// (missing snapshot, mismatched extractors, empty pool).
    #[error("invalid state: {0}")]
    State(String),

    /// Input data cannot support the requested computation.
    #[error("data error: {0}")]
    Data(String),

    #[error("unknown class id {0}")]
    Key(usize),

    #[error("numeric error: {0}")]
    Numeric(String),

    /// Malformed on-disk content. `line` is 1-based, `offset` is the byte
    /// offset of the start of the offending line.
    #[error("format error at line {line} (byte offset {offset}): {message}")]
    Format {
        line: usize,
        offset: usize,
        message: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub(crate) fn state(msg: impl Into<String>) -> Self {
        Error::State(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
}
