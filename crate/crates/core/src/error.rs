use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A layer, model or option that the loaded configuration does not know about.
    #[error("configuration error: {0}")]
    Configuration(String),

    /// Shapes or digests that disagree with what a spec or checkpoint declares.
    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("index ({row}, {col}) out of bounds for {height}x{width} grid")]
    Bounds {
        row: usize,
        col: usize,
        height: usize,
        width: usize,
    },

    #[error("invalid mask: {0}")]
    InvalidMask(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("non-finite loss at step {step}: {diagnostics}")]
    NumericFault { step: usize, diagnostics: String },

    #[error("frozen parameters of {component} changed during training")]
    FrozenMutation { component: String },

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("corrupted checkpoint: {0}")]
    Corrupted(String),

    #[error("scorer adapter error: {0}")]
    Adapter(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Configuration(msg.into())
    }

    pub(crate) fn integrity(msg: impl Into<String>) -> Self {
        Error::Integrity(msg.into())
    }

    pub(crate) fn argument(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }
}
