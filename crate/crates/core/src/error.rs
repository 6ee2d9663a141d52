use thiserror::Error;

/// Errors produced anywhere in the discretization pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value {value} encountered at x = {x}")]
    NonFinite { x: f64, value: f64 },

    #[error("point x = {0} lies outside the domain [0, 1]")]
    OutOfDomain(f64),

    #[error("singular system matrix (pivot {pivot} at row {row}, condition estimate {condition:e})")]
    Singular { row: usize, pivot: f64, condition: f64 },

    #[error("eigensolver failure: {0}")]
    Eigen(String),

    #[error("mode {mode} has eigenvalue {eigenvalue:e}; interpolation requires a positive eigenvalue")]
    DegenerateMode { mode: usize, eigenvalue: f64 },

    #[error("requested {requested} modes but only {available} are available")]
    NotEnoughModes { requested: usize, available: usize },

    #[error("characteristic function outside its principal-branch domain: {0}")]
    BranchDomain(String),

    #[error("path aborted at step {step}: state value {value} exceeds the blow-up guard")]
    BlowUp { step: usize, value: f64 },

    #[error("malformed cache file: {0}")]
    Cache(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
