use thiserror::Error;

/// Errors produced by state construction, synthesis and analysis.
#[derive(Debug, Error)]
pub enum Error {
    #[error("covariance matrix is not symmetric: |m[{i}][{j}] - m[{j}][{i}]| = {delta:.3e}")]
    NotSymmetric { i: usize, j: usize, delta: f64 },

    #[error("covariance matrix diagonal entry {index} is not strictly positive ({value})")]
    NonPositiveDiagonal { index: usize, value: f64 },

    #[error("parameter `{name}` out of range: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("pump power {power_w} W is at or above the threshold power {threshold_w} W")]
    AboveThreshold { power_w: f64, threshold_w: f64 },

    #[error("conditioning variance is zero; conditional variance undefined")]
    ZeroConditioningVariance,

    #[error("frequency grid is empty")]
    EmptyGrid,

    #[error("mixing frequency {f0} Hz is at or above the Nyquist frequency {nyquist} Hz")]
    AboveNyquist { f0: f64, nyquist: f64 },

    #[error("trace sets are incompatible: {0}")]
    TraceMismatch(String),

    #[error("tomography table is missing required rows: {0}")]
    MissingRows(String),

    #[error("fit did not converge after {iterations} iterations (residual norm {residual:.3e})")]
    FitDiverged { iterations: usize, residual: f64 },

    #[error("covariance serialization: {0}")]
    CovarianceFormat(String),

    #[error("configuration: {0}")]
    Config(String),

    #[error("data: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
