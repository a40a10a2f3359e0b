use thiserror::Error;

/// Errors raised by the CDCM kernels, model, and inference routines.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum CdcmError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// The matrix has no unique real logarithm (complex, repeated, or
    /// non-positive eigenvalues). Downstream this is an A3 violation.
    #[error("matrix has no unique real logarithm: {0}")]
    NotRealLogIdentifiable(String),

    /// Within-block data matrix is singular (A4 violation).
    #[error("within-block data matrix is singular: {0}")]
    SingularDataMatrix(String),

    /// Intercept-augmented stimulus matrix is singular (A2 violation).
    #[error("stimulus design is confounded: {0}")]
    ConfoundedDesign(String),

    /// The HRF kernel vanishes at the repetition time, so convolution is not injective.
    #[error("observation map is not injective: {0}")]
    NonInjectiveObservation(String),

    #[error("degenerate signal: {0}")]
    DegenerateSignal(String),

    #[error("degenerate draws: {0}")]
    DegenerateDraws(String),

    #[error("covariance is not positive definite: {0}")]
    DegenerateCovariance(String),

    #[error("zero variance column: {0}")]
    ZeroVariance(String),

    #[error("sampler initialization failed: {0}")]
    Initialization(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("io error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, CdcmError>;

impl From<std::io::Error> for CdcmError {
    fn from(e: std::io::Error) -> Self {
        CdcmError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for CdcmError {
    fn from(e: serde_json::Error) -> Self {
        CdcmError::Parse(e.to_string())
    }
}
