use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes are incompatible for the requested operation.
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A caller violated an API precondition.
    #[error("contract violated: {0}")]
    Contract(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// A chain was stepped out of position order.
    #[error("out-of-order step on chain {chain}: expected position {expected}, got {actual}")]
    Sequencing {
        chain: usize,
        expected: usize,
        actual: usize,
    },

    #[error("invalid insertion plan: {0}")]
    Plan(String),

    #[error("invalid input: {0}")]
    Input(String),

    /// Training produced a non-finite loss.
    #[error("training diverged at epoch {epoch}: {reason}")]
    Training { epoch: usize, reason: String },
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
