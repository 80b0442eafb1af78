use thiserror::Error;

/// Errors produced by model construction, fitting and simulation.
#[derive(Debug, Error)]
pub enum ModelError {
    /// A parameter violates its domain (non-positive variance, |alpha| >= 1, ...).
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// Shapes of inputs do not line up.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// Input data violates a contract (non-finite entries, empty, ...).
    #[error("invalid data: {0}")]
    InvalidData(String),

    /// A configuration value is out of range or inconsistent.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// A spatial family was requested without the geometry it needs.
    #[error("geometry required for the {0} family")]
    GeometryRequired(&'static str),

    /// A matrix that must be symmetric positive definite failed to factorize.
    #[error("matrix not positive definite: {0}")]
    NotPositiveDefinite(String),

    /// A numerical failure inside the EM loop, tagged with the iteration.
    #[error("numerical failure at EM iteration {iteration}: {detail}")]
    Numerical { iteration: usize, detail: String },
}

pub type Result<T> = std::result::Result<T, ModelError>;
