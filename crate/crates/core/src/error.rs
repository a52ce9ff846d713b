use thiserror::Error;

pub type Result<T> = std::result::Result<T, TaseError>;

#[derive(Debug, Error)]
pub enum TaseError {
    /// A configuration value violates its documented range.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Array dimensions disagree with what an operation expects.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// An operation was called outside its contract (e.g. refreshing pseudo labels during warmup).
    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("training diverged at epoch {epoch}, batch {batch} (tau range [{tau_min}, {tau_max}]): {detail}")]
    Diverged {
        epoch: usize,
        batch: usize,
        tau_min: f64,
        tau_max: f64,
        detail: String,
    },

    /// Malformed binary file.
    #[error("bad file format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl TaseError {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        TaseError::Config(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        TaseError::Shape(msg.into())
    }
}
