use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Error, Debug)]
pub enum Error {
    /// A tensor dimension does not match what an operation requires.
    #[error("shape mismatch in {what}: expected {expected}, got {got}")]
    ShapeMismatch {
        what: String,
        expected: String,
        got: String,
    },

    /// An argument is outside the operation's domain (zero stride, bad ratio, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A block or model was constructed with inconsistent hyperparameters.
    #[error("configuration error: {0}")]
    Config(String),

    /// A sample or file carries values outside the declared domain.
    #[error("data error: {0}")]
    Data(String),

    /// An internal contract was violated (e.g. classifier emitted an out-of-range class).
    #[error("logic error: {0}")]
    Logic(String),

    /// Malformed PNM raster, with the byte offset where parsing stopped.
    #[error("parse error at byte {offset}: {msg}")]
    Parse { offset: usize, msg: String },

    /// A metric was requested from an empty confusion matrix.
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// The optimizer was asked to step a parameter that has no gradient.
    #[error("missing gradient for parameter `{0}`")]
    MissingGradient(String),

    /// Checkpoint file rejected (bad magic, version, or layout).
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(what: impl Into<String>, expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            what: what.into(),
            expected: expected.into(),
            got: got.into(),
        }
    }
}
