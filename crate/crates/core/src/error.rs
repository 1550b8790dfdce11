use thiserror::Error;

/// Errors raised by the solver and its building blocks.
#[derive(Debug, Error)]
pub enum DtqError {
    #[error("unknown problem `{0}`")]
    NotFound(String),
    #[error("kernel covariance is not symmetric positive-definite")]
    InvalidKernel,
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("quadrature Vandermonde matrix is singular or numerically rank-deficient")]
    IllConditioned,
    #[error("candidate set has fewer than {needed} linearly independent rows")]
    DegenerateCandidates { needed: usize },
    #[error("log-quadratic fit failed: {0}")]
    FitFailed(&'static str),
    #[error("quadratic fit needs at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("quadratic form is not positive-definite")]
    NotPositiveDefinite,
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(&'static str),
    #[error("alpha shape kept no simplices")]
    EmptyShape,
    #[error("mesh collapse: removing {removed} points would leave the mesh empty")]
    MeshCollapse { removed: usize },
    #[error("resource limit: tensor grid of {points} points needs about {bytes} bytes")]
    ResourceLimit { points: usize, bytes: u128 },
    #[error("reference density sums to zero")]
    DegenerateReference,
    #[error("undefined: {0}")]
    Undefined(&'static str),
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Validation(Vec<String>),
    #[error("config parse error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = DtqError> = std::result::Result<T, E>;
