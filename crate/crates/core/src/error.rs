use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid sample coordinate ({x}, {y})")]
    InvalidSampleCoordinate { x: f64, y: f64 },

    #[error("invalid grid spec: {0}")]
    InvalidSpec(String),

    #[error("spec mismatch: {0}")]
    SpecMismatch(String),

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("invalid scenario: {0}")]
    InvalidScenario(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("state not observed")]
    StateNotObserved,

    #[error("timestep {t} out of range [{first}, {last}]")]
    StepOutOfRange { t: i64, first: i64, last: i64 },

    #[error("length mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },

    #[error("covariance is not symmetric positive semi-definite: {0}")]
    NotPsd(String),

    #[error("malformed grid file at byte offset {offset}: {reason}")]
    Format { offset: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
