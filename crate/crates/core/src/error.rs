use thiserror::Error;

/// Errors produced across the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),

    #[error("non-finite input at coordinate {index}: {value}")]
    NonFiniteInput { index: usize, value: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("loss diverged: term `{term}` = {value}")]
    DivergedLoss { term: String, value: f64 },

    #[error("gradient diverged at index {index}: {value}")]
    DivergedGradient { index: usize, value: f64 },

    #[error("degenerate diffusion at x = {x}: sigma^2 = {sigma_sq}")]
    DegenerateDiffusion { x: f64, sigma_sq: f64 },

    #[error("density is not integrable on the domain: {0}")]
    DivergentDensity(String),

    #[error("unknown observation `{0}`")]
    UnknownObservation(String),

    #[error("invalid point: {0}")]
    InvalidPoint(String),

    #[error("unsupported diffusion: {0}")]
    UnsupportedDiffusion(String),

    #[error("invalid density value {value} at index {index}")]
    InvalidDensity { index: usize, value: f64 },

    #[error("support mismatch at index {index}: p = {p}, q = {q}")]
    SupportMismatch { index: usize, p: f64, q: f64 },

    #[error("stability index alpha = {0} outside (0, 2)")]
    InvalidStability(f64),

    #[error("grid does not cover the integration range: {0}")]
    DomainCoverage(String),

    #[error("state left the guard box at step {step}: {state:?}")]
    BlowUp { step: usize, state: Vec<f64> },

    #[error("degenerate bandwidth along axis {axis}: sample variance is zero")]
    DegenerateBandwidth { axis: usize },

    #[error("insufficient samples: need at least {needed}, got {got}")]
    InsufficientSamples { needed: usize, got: usize },

    #[error("invalid config `{path}`: {message}")]
    InvalidConfig { path: String, message: String },

    #[error("model format: {0}")]
    Format(String),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::InvalidConfig {
            path: path.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by numerical failure rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::DivergedLoss { .. }
                | Error::DivergedGradient { .. }
                | Error::BlowUp { .. }
                | Error::DivergentDensity(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
