use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invariant violated: {0}")]
    InvariantViolation(String),

    #[error("too few points: got {got}, need at least {need}")]
    TooFewPoints { got: usize, need: usize },

    #[error("abscissa {x} lies outside the knot range [{lo}, {hi}]")]
    OutOfDomain { x: f64, lo: f64, hi: f64 },

    #[error("penalized normal equations are singular (regime {regime})")]
    SingularSystem { regime: usize },

    #[error("every state density underflows at observation {index}")]
    AllZeroLikelihood { index: usize },

    #[error("index {index} out of range for a series of length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("degrees-of-freedom adjusted denominator {denominator} for regime {regime} is below the floor")]
    DegenerateDenominator { regime: usize, denominator: f64 },

    #[error("initial grouping left only {size} points in group {group}")]
    EmptyGroup { group: usize, size: usize },

    #[error("GCV is infinite over the whole grid for regime {regime}")]
    GcvAllInfinite { regime: usize },

    #[error("estimate {name} = {value} lies on the boundary of the parameter space")]
    BoundaryEstimate { name: String, value: f64 },

    #[error("responsibilities are not at the EM fixed point (max deviation {deviation:e})")]
    NotAtFixedPoint { deviation: f64 },

    #[error("observed information is not positive definite")]
    PositiveDefiniteViolation,

    #[error("series length {n} exceeds the supported limit {limit}")]
    ComplexityGuard { n: usize, limit: usize },

    #[error("tied abscissae could not be separated by jittering")]
    UnresolvableTies,

    #[error("fixed kernel variance is not positive ({0})")]
    NonPositiveU(f64),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("input file contains no data rows")]
    EmptyFile,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
