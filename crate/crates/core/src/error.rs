use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("logits not bounded: entry ({state}, {action}) is {value}")]
    LogitsNotBounded { state: usize, action: usize, value: f64 },

    #[error("features not full rank under beta (lambda_beta = {lambda_beta:e})")]
    FeaturesRankDeficient { lambda_beta: f64 },

    #[error("h too large for delta_2 formula: Gamma - 3h(1+gamma)^2 = {denominator:e} <= 0")]
    StepTooLarge { denominator: f64 },

    #[error("invalid instance: {}", .0.join("; "))]
    InvalidInstance(Vec<String>),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("linear solve failed: {0}")]
    Singular(String),

    #[error("trace schema: {0}")]
    Schema(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}
