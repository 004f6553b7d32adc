use thiserror::Error;

pub type Result<T> = std::result::Result<T, LabError>;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("enumeration of {size} trajectories exceeds the budget of {budget}")]
    BudgetExceeded { size: u128, budget: u64 },

    #[error("invalid problem shape: {0}")]
    InvalidShape(String),

    #[error("invalid distribution at context {context}: {reason}")]
    InvalidDistribution { context: usize, reason: String },

    #[error("policies or tables are defined over different context trees")]
    TreeMismatch,

    #[error("step {step} outside 1..={horizon}")]
    StepOutOfRange { step: usize, horizon: usize },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("importance ratio must be positive and finite, got {0}")]
    InvalidRatio(f64),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("policy has no logits; {0} requires a softmax-parameterized policy")]
    MissingLogits(&'static str),

    #[error("{0} requires a reward table")]
    MissingRewards(&'static str),

    #[error("target KL {target} outside the achievable range (0, {max}]")]
    InfeasibleKl { target: f64, max: f64 },

    #[error("finite-difference step {step} is too small: {reason}")]
    StepTooSmall { step: f64, reason: String },

    #[error("unexpected document format: expected {expected}, found {found}")]
    DocumentFormat { expected: String, found: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
