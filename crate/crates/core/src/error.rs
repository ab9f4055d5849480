use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        context: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("index out of range in {context}: {index} >= {bound}")]
    IndexOutOfRange {
        context: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("unsupported checkpoint version {found} (supported: {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("config error: {0}")]
    Config(String),

    #[error("training aborted at step {step}: non-finite {term}")]
    NonFiniteLoss { step: usize, term: &'static str },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
