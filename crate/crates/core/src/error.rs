use thiserror::Error;

/// Errors raised by the geometry, dynamics and functional layers.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("vector norm {norm:e} is below the normalization threshold")]
    NearZeroVector { norm: f64 },

    #[error("points are (nearly) antipodal: geodesic distance {distance}")]
    AntipodalPoints { distance: f64 },

    #[error("vector is not unit length (norm {norm})")]
    NotUnit { norm: f64 },

    #[error("invalid dimension {0}: the sphere needs an ambient dimension of at least 2")]
    InvalidDimension(usize),

    #[error("argument out of domain: {0}")]
    Domain(String),

    #[error("step count mismatch: {total} is not an integral multiple of {step}")]
    StepCountMismatch { total: f64, step: f64 },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("ill-posed bound: denominator {denominator} is not positive")]
    IllPosedBound { denominator: f64 },

    #[error("particle mean has norm {norm:e}; the normalized mean is undefined")]
    ZeroMeanParticles { norm: f64 },

    #[error("invalid weights: {0}")]
    InvalidWeights(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

impl Error {
    /// Short name of the variant, used by the CLI diagnostics.
    pub fn name(&self) -> &'static str {
        match self {
            Error::DimensionMismatch { .. } => "DimensionMismatch",
            Error::NearZeroVector { .. } => "NearZeroVector",
            Error::AntipodalPoints { .. } => "AntipodalPoints",
            Error::NotUnit { .. } => "NotUnit",
            Error::InvalidDimension(_) => "InvalidDimension",
            Error::Domain(_) => "Domain",
            Error::StepCountMismatch { .. } => "StepCountMismatch",
            Error::GridMismatch(_) => "GridMismatch",
            Error::IllPosedBound { .. } => "IllPosedBound",
            Error::ZeroMeanParticles { .. } => "ZeroMeanParticles",
            Error::InvalidWeights(_) => "InvalidWeights",
            Error::InvalidParameter(_) => "InvalidParameter",
        }
    }

    /// Numerical guard failures, as opposed to malformed input.
    pub fn is_numerical_guard(&self) -> bool {
        matches!(
            self,
            Error::NearZeroVector { .. }
                | Error::AntipodalPoints { .. }
                | Error::IllPosedBound { .. }
                | Error::ZeroMeanParticles { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
