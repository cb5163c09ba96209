use thiserror::Error;

/// Errors raised by the lab. Abnormal training outcomes (divergence,
/// failure) are statuses on the run summary, not errors.
#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite entry in {0}")]
    NonFinite(&'static str),

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    #[error("zero vector passed to {0}")]
    ZeroVector(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("optimizer {0} needs the gradient at initialization")]
    MissingInitGradient(&'static str),

    #[error("optimizer {0} needs a random stream")]
    MissingRng(&'static str),

    #[error("negative second-moment entry {value} at index {index}")]
    NegativeSecondMoment { index: usize, value: f64 },

    #[error("inverted bracket [{lower}, {upper}]")]
    InvertedBracket { lower: f64, upper: f64 },

    #[error("malformed record at byte offset {offset}: {reason}")]
    MalformedRecord { offset: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
