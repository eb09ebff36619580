use thiserror::Error;

pub type Result<T> = std::result::Result<T, RaglError>;

#[derive(Debug, Error)]
pub enum RaglError {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("index {index} out of range for {what} (size {size})")]
    Index {
        what: &'static str,
        index: usize,
        size: usize,
    },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("loss undefined: mask selects no entries")]
    EmptyMask,

    #[error("gradient for parameter `{0}` is not finite")]
    NonFiniteGradient(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: loss is not finite")]
    Diverged { epoch: usize, batch: usize },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("unsupported format version {0}")]
    Version(u32),

    #[error("truncated {what}: expected {expected} bytes, found {actual}")]
    Truncated {
        what: &'static str,
        expected: u64,
        actual: u64,
    },

    #[error("non-finite value in {what} at flat index {index}")]
    NonFiniteData { what: &'static str, index: usize },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub(crate) fn dim_err(op: &'static str, detail: impl Into<String>) -> RaglError {
    RaglError::Dimension {
        op,
        detail: detail.into(),
    }
}
