use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A tensor dimension was zero or the element count overflowed.
    #[error("size error: {0}")]
    Size(String),

    /// An argument was outside its admissible range.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// Shapes, caches or modes did not satisfy an operation's precondition.
    #[error("contract error: {0}")]
    Contract(String),

    /// A function evaluated by the gradient oracle returned a non-finite value.
    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn parameter(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }
}
