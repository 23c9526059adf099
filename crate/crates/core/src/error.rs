use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("point {point:?} lies outside the grid extent")]
    OutsideGrid { point: Vec<f64> },
    #[error("level {level} outside [{top}, {bottom}]")]
    LevelOutOfRange { level: i32, top: i32, bottom: i32 },
    #[error("invalid measure: {0}")]
    InvalidMeasure(String),
    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParam { field: String, reason: String },
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("hypothesis violated: {0}")]
    Hypothesis(String),
    #[error("collection is not admissible: {0}")]
    NotAdmissible(String),
    #[error("collection is not Carleson: {0}")]
    NotCarleson(String),
    #[error("power iteration did not converge after {iterations} steps (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("kernel is singular at the diagonal without truncation")]
    Singular,
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn param(field: &str, reason: impl Into<String>) -> Error {
    Error::InvalidParam {
        field: field.to_string(),
        reason: reason.into(),
    }
}
