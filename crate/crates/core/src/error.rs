use thiserror::Error;

pub type Result<T, E = PodnetError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum PodnetError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: String,
        expected: usize,
        actual: usize,
    },

    #[error("unknown environment `{0}` (valid: waypoint2d, primitive1d)")]
    UnknownEnv(String),

    #[error("invalid trajectory {id}: {reason}")]
    InvalidTrajectory { id: String, reason: String },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("loss is not finite ({0})")]
    NonFiniteLoss(f64),

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    VersionMismatch { found: u64, expected: u64 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl PodnetError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Self::InvalidArgument(msg.into())
    }

    pub(crate) fn shape(context: impl Into<String>, expected: usize, actual: usize) -> Self {
        Self::ShapeMismatch {
            context: context.into(),
            expected,
            actual,
        }
    }
}
