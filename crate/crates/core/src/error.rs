use thiserror::Error;

/// Errors raised by the laboratory. Variants name the violated precondition.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    Geometry(String),

    #[error("volume {volume} exceeds the configured cap of {cap} sites")]
    VolumeCap { volume: usize, cap: usize },

    #[error("dense storage of {bytes} bytes exceeds the {cap}-byte memory cap")]
    MemoryCap { bytes: usize, cap: usize },

    #[error("mode index {index} out of range for side {side} in direction {axis}")]
    ModeOutOfRange { axis: usize, index: usize, side: usize },

    #[error("invalid parameter `{name}`: {reason}")]
    Parameter { name: &'static str, reason: String },

    #[error("energy {energy} outside the analysis window: {reason}")]
    EnergyWindow { energy: f64, reason: String },

    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    #[error("matrix is not Hermitian (max |H - H^dag| = {deviation:e})")]
    NotHermitian { deviation: f64 },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("quadrature did not converge: error estimate {estimate:e} above tolerance {tolerance:e}")]
    NoConvergence { estimate: f64, tolerance: f64 },

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("eigensolver failed: {0}")]
    Eigen(String),

    #[error("config error in `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("task {task} (seed {seed}, stream {stream}) failed: {reason}")]
    Worker {
        task: String,
        seed: u64,
        stream: u64,
        reason: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Error {
    Error::Parameter {
        name,
        reason: reason.into(),
    }
}
