use crate::grid::Shape;
use thiserror::Error;

/// Errors raised anywhere in the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("grid {height}x{width} is too small for the finite-difference stencils (need at least 3x3)")]
    DimensionTooSmall { height: usize, width: usize },

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: Shape, actual: Shape },

    #[error("field contains non-finite values")]
    NonFinite,

    #[error("malformed image header: {0}")]
    MalformedHeader(String),

    #[error("unsupported image depth (maxval {0}, only 255 is supported)")]
    UnsupportedDepth(u32),

    #[error("snapshot magic mismatch")]
    MagicMismatch,

    #[error("truncated snapshot payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },

    #[error("time {t} is outside [0, {horizon}]")]
    TimeOutOfRange { t: f64, horizon: f64 },

    #[error("invalid transition: {0}")]
    InvalidTransition(String),

    #[error("unknown preset '{0}'")]
    UnknownPreset(String),

    #[error("unsupported feature: {0}")]
    Unsupported(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("numeric divergence at t = {t}: max |x| = {max_abs}")]
    Divergence { t: f64, max_abs: f64 },

    #[error("operation requires a linear-additive instance")]
    NotLinear,

    #[error("grid with {0} pixels per channel is too large for dense eigendecomposition")]
    GridTooLarge(usize),

    #[error("degenerate variance in mode {0}")]
    DegenerateVariance(usize),

    #[error("training diverged at iteration {0}")]
    TrainingDiverged(usize),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("correlation undefined: both fields are constant")]
    UndefinedCorrelation,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
