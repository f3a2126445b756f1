use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Two tensor shapes that must agree for `op` do not.
    #[error("{op}: shape mismatch, {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// An API precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// External input (image, config, dataset, CLI argument) is unusable.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A trainable parameter reached the optimizer without a gradient.
    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),

    /// On-disk data (checkpoint, dataset, config) failed to parse.
    #[error("format error in {path}: {msg}")]
    Format { path: String, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn format(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
