use thiserror::Error;

/// Errors surfaced by the training laboratory.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents do not line up for the requested operation.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A forward op produced NaN or Inf from finite inputs, or a gradient
    /// went non-finite before an optimizer step.
    #[error("non-finite value in {op}: {detail}")]
    NonFinite { op: &'static str, detail: String },

    /// A loss was requested over a mask with no supervised positions.
    #[error("empty loss: no supervised positions in mask")]
    EmptyMask,

    /// A sequence exceeded the model's maximum length.
    #[error("sequence overflow: length {len} exceeds max {max}")]
    SequenceOverflow { len: usize, max: usize },

    /// An API contract was violated (wrong call order, invalid root, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Gradients were requested before a backward pass populated them.
    #[error("state error: {0}")]
    State(String),

    /// A run or mixture configuration is invalid.
    #[error("config error: {0}")]
    Config(String),

    /// A checkpoint or fixture file has the wrong magic or version.
    #[error("format error: {0}")]
    Format(String),

    /// A checkpoint or fixture file is truncated or internally inconsistent.
    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
