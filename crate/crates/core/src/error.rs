use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid range: {0}")]
    InvalidRange(String),

    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("dimensions {0}x{1} are not powers of two")]
    NotPowerOfTwo(usize, usize),

    #[error("invalid band [{lo}, {hi})")]
    InvalidBand { lo: f64, hi: f64 },

    #[error("empty band [{lo}, {hi}) selects no frequency bins")]
    EmptyBand { lo: f64, hi: f64 },

    #[error("invalid timestep {t} (valid range 1..={max})")]
    InvalidTimestep { t: usize, max: usize },

    #[error("timesteps must decrease: t={t}, t_prev={t_prev}")]
    NonMonotoneTimesteps { t: usize, t_prev: usize },

    #[error("invalid class id {class} ({num_classes} classes)")]
    InvalidClass { class: usize, num_classes: usize },

    #[error("non-finite gradient in parameter block `{0}`")]
    NonFiniteGradient(String),

    #[error("degraded-predictor scale s={0} requires an attached degraded predictor")]
    MissingDegradedPredictor(f64),

    #[error("fixed-point inversion diverged at t={t}: residuals {residuals:?}")]
    InversionDiverged { t: usize, residuals: Vec<f64> },

    #[error("training diverged at step {step}: {detail}")]
    TrainingDiverged { step: usize, detail: String },

    #[error("degenerate interpolation: {0}")]
    DegenerateAngle(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("malformed data: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
