use thiserror::Error;

/// Errors raised across the estimation and design pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("no polynomial left inverse of degree <= {k_max} (best residual {best_residual:.3e})")]
    NoLeftInverse { k_max: usize, best_residual: f64 },

    #[error("no left annihilator of degree {degree}")]
    NoAnnihilator { degree: usize },

    #[error("regressor generator is rank deficient (best s_min {s_min:.3e}); faults are not independently sensible at degree {degree}")]
    RankDeficientM { degree: usize, s_min: f64 },

    #[error("pole {0} is not strictly stable")]
    UnstablePole(String),

    #[error("denominator degree {have} is below the required {need}")]
    InsufficientDegree { have: usize, need: usize },

    #[error("improper filter: numerator degree {numerator} exceeds denominator degree {denominator}")]
    ImproperFilter { numerator: usize, denominator: usize },

    #[error("system is not stable (spectral abscissa/radius {0:.6})")]
    UnstableSystem(f64),

    #[error("descriptor matrix is singular")]
    SingularDescriptor,

    #[error("estimation window is rank deficient (s_min {s_min:.3e}, effective {effective:.3e})")]
    RankDeficientWindow { s_min: f64, effective: f64 },

    #[error("I - A^N is (numerically) singular")]
    SingularPeriodMatrix,

    #[error("constraint set cannot be written as quadratic constraints: {0}")]
    ConversionUnsupported(String),

    #[error("basis closure is incomplete: {0}")]
    ClosureIncomplete(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
