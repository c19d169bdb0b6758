use thiserror::Error;

pub type Result<T> = std::result::Result<T, AwlError>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AwlError {
    #[error("invalid input: {0}")]
    Input(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("design is rank deficient; collinear columns: {}", columns.join(", "))]
    RankDeficient { columns: Vec<String> },

    #[error("estimation failed after {iterations} iterations: {reason}")]
    Estimation {
        reason: String,
        iterations: usize,
        trace: Vec<f64>,
    },

    #[error("inference error: {0}")]
    Inference(String),

    #[error("inference declined: information matrix is near singular (condition {condition:.3e})")]
    NearSingular { condition: f64 },
}

impl AwlError {
    pub fn input(msg: impl Into<String>) -> Self {
        AwlError::Input(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        AwlError::Numeric(msg.into())
    }

    /// Short machine-readable tag used on the CLI diagnostic stream.
    pub fn kind(&self) -> &'static str {
        match self {
            AwlError::Input(_) => "input",
            AwlError::Numeric(_) => "numeric",
            AwlError::RankDeficient { .. } => "rank_deficient",
            AwlError::Estimation { .. } => "estimation",
            AwlError::Inference(_) => "inference",
            AwlError::NearSingular { .. } => "near_singular",
        }
    }
}
