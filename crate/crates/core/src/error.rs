use thiserror::Error;

pub type Result<T> = std::result::Result<T, LoraeError>;

#[derive(Debug, Error)]
pub enum LoraeError {
    /// Operand shapes are incompatible.
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A precondition of the called operation does not hold.
    #[error("contract violation: {0}")]
    Contract(String),

    /// An iterative or factorization routine failed.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },

    /// Training produced a non-finite value.
    #[error("training diverged: non-finite {what} in parameter `{param}`")]
    Training { param: String, what: &'static str },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl LoraeError {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        LoraeError::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        LoraeError::Contract(msg.into())
    }

    /// True for failures caused by numerics (divergence, factorization) rather than usage.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            LoraeError::Numerical(_) | LoraeError::Training { .. } | LoraeError::Degenerate(_)
        )
    }
}
