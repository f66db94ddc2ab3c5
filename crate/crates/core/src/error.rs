use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("agent index {index} out of range for {len} agents")]
    Index { index: usize, len: usize },

    #[error("assignment violates constraints: {0}")]
    ConstraintViolation(String),

    #[error("assignment problem is infeasible: {0}")]
    Infeasible(String),

    #[error("search budget exceeded: {0}")]
    BudgetExceeded(String),

    #[error("state became non-finite")]
    NonFiniteState,

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("network produced a non-finite output")]
    NonFiniteOutput,

    #[error("non-finite loss: {0}")]
    NonFiniteLoss(String),

    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
