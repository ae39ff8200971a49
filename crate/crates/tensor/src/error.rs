use thiserror::Error;

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Error)]
pub enum TensorError {
    /// Shapes or arguments that violate an operation's preconditions.
    #[error("contract violation in {op}: {detail}")]
    Contract { op: &'static str, detail: String },

    /// NaN or infinity where finite values are required.
    #[error("non-finite value in {0}")]
    Numeric(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl TensorError {
    pub(crate) fn contract(op: &'static str, detail: impl Into<String>) -> Self {
        TensorError::Contract {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn shapes(op: &'static str, a: &[usize], b: &[usize]) -> Self {
        TensorError::Contract {
            op,
            detail: format!("incompatible shapes {a:?} and {b:?}"),
        }
    }
}
