use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("time {t} is outside the schedule domain [0, {t_max}]")]
    Domain { t: f64, t_max: f64 },

    #[error("expected s <= t, got s = {s}, t = {t}")]
    TimeOrder { t: f64, s: f64 },

    #[error("invalid schedule: {0}")]
    Schedule(String),

    #[error("quadrature on [{a}, {b}] did not reach tolerance {tol:e} (estimated error {estimate:e})")]
    Quadrature {
        a: f64,
        b: f64,
        tol: f64,
        estimate: f64,
    },

    #[error("invalid time grid: {0}")]
    Grid(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("length mismatch: expected {expected}, got {got}")]
    Length { expected: usize, got: usize },

    #[error("unknown prompt label `{0}`")]
    UnknownLabel(String),

    #[error("invalid distribution family: {0}")]
    Family(String),

    #[error("matrix is not orthonormal (max |QᵀQ - I| = {0:e})")]
    NotOrthonormal(f64),

    #[error("invalid edit configuration: {0}")]
    EditConfig(String),

    #[error("need at least {min} samples, got {got}")]
    TooFewSamples { min: usize, got: usize },

    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, Error>;
