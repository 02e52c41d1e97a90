use std::io;

use nalgebra::Complex;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("origin is not an equilibrium: |f(0)| = {norm:e}")]
    NonEquilibriumOrigin { norm: f64 },

    #[error("step size underflow at t = {t} (h = {h:e}); stiff or blowing-up trajectory")]
    StepSizeUnderflow { t: f64, h: f64 },

    #[error("state norm {norm:e} exceeded cap {cap:e} at t = {t}")]
    StateOverflow { t: f64, norm: f64, cap: f64 },

    #[error("initial radius {norm} is outside the event radius {radius} and the flow points outward; check the initial radius")]
    NonBracketedEvent { radius: f64, norm: f64 },

    #[error("eigenvector basis is numerically rank deficient (condition number {condition:e})")]
    DefectiveMatrix { condition: f64 },

    #[error("spectrum is not Hurwitz: eigenvalue {eigenvalue} has non-negative real part")]
    NotHurwitz { eigenvalue: Complex<f64> },

    #[error("spectral condition -Re(λ) + 2 Re(λ_max) < 0 violated for λ = {lambda}")]
    SpectralConditionViolated { lambda: Complex<f64> },

    #[error("path integral did not converge before t_max = {t_max}")]
    NoConvergence { t_max: f64 },

    #[error("trajectory did not reach the boundary set within t_max = {t_max}")]
    BoundaryNotReached { t_max: f64 },

    #[error("Koopman eigenvalue μ = 0 has no continuous-time counterpart")]
    ZeroEigenvalue,

    #[error("no EDMD eigenvalue near target λ = {target} (closest {closest})")]
    NoMatchingEigenvalue {
        target: Complex<f64>,
        closest: Complex<f64>,
    },

    #[error("rejection sampling stalled (acceptance rate {rate:e})")]
    RejectionStall { rate: f64 },

    #[error("invalid ratio: beta must be positive (got {beta})")]
    InvalidRatio { beta: f64 },

    #[error("no sign change of the level function at x1 = {x1}")]
    NoSignChange { x1: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
