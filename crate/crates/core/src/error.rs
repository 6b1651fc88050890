use thiserror::Error;

/// Errors raised by the toolkit.
#[derive(Debug, Error)]
pub enum PbrlError {
    /// An input violates a documented invariant (shapes, stochasticity, finiteness).
    #[error("validation error: {0}")]
    Validation(String),

    /// A configuration combination is not meaningful (e.g. a `None` regularizer with τ > 0).
    #[error("configuration error: {0}")]
    Config(String),

    /// The requested computation is not available for this problem structure.
    #[error("unsupported structure: {0}")]
    UnsupportedStructure(String),

    /// A caller handed over a value of the wrong parameterization.
    #[error("contract violation: {0}")]
    ContractViolation(String),

    /// The oracle's policy is worse than its certificate claims.
    #[error("oracle failure: penalty {value:.3e} below certified tolerance -{tolerance:.3e}")]
    OracleFailure { value: f64, tolerance: f64 },

    /// The outer loop left the divergence guard.
    #[error("diverged at iteration {iteration}: |F| = {value:.3e}")]
    Diverged {
        iteration: usize,
        value: f64,
        trace: Box<crate::pbrl::RunTrace>,
    },

    /// Malformed serialized input.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
}

pub type Result<T> = std::result::Result<T, PbrlError>;

pub(crate) fn validation<T>(msg: impl Into<String>) -> Result<T> {
    Err(PbrlError::Validation(msg.into()))
}
