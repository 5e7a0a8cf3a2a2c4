use thiserror::Error;

/// Error type shared across the crate.
#[derive(Debug, Error)]
pub enum CapError {
    #[error("shape mismatch in {op}: lhs dims {lhs:?}, rhs dims {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("loss must be a scalar, got dims {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("loss tensor is not attached to this tape (stale or detached)")]
    DetachedLoss,

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("function is not deterministic: {0}")]
    NonDeterministic(String),

    #[error("{path}: parse error at byte {offset}: {reason}")]
    Parse {
        path: String,
        offset: usize,
        reason: String,
    },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CapError>;
