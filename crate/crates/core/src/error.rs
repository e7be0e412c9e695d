use thiserror::Error;

/// Failure modes shared by every module of the crate.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum KrfError {
    #[error("density ratio not positive: min w = {min_w:e}")]
    PositivityLoss { min_w: f64 },
    #[error("curvature profile infeasible: {0}")]
    ProfileInfeasible(String),
    #[error("closure constraint residual {residual:e} exceeds tolerance")]
    ClosureViolation { residual: f64 },
    #[error("profile round trip off by {residual:e}")]
    ProfileMismatch { residual: f64 },
    #[error("metric degenerates along the meridian (min w = {min_w:e})")]
    DegenerateMetric { min_w: f64 },
    #[error("fields live on different grids")]
    GridMismatch,
    #[error("state invariant violated: {0}")]
    InvariantViolation(String),
    #[error("Poisson solve failed, residual {residual:e}")]
    SolveFailure { residual: f64 },
    #[error("step of size {dt:e} rejected ({reason})")]
    StepRejected { dt: f64, suggested: f64, reason: String },
    #[error("step size fell below dt_min at t = {t}")]
    DtUnderflow { t: f64 },
    #[error("quadrature tail error {error:e} at level {level}")]
    QuadratureFailure { level: usize, error: f64 },
    #[error("heat solution went negative (min {min:e}) at t = {t}")]
    NegativityDetected { t: f64, min: f64 },
    #[error("normalization constraint off by {residual:e}")]
    ConstraintViolated { residual: f64 },
    #[error("descent stalled after {iterations} iterations")]
    DescentStalled { iterations: usize },
    #[error("need at least 4 dyadic samples, found {found}")]
    InsufficientSamples { found: usize },
    #[error("level {level} outside 1..={max}")]
    LevelOutOfRange { level: usize, max: usize },
    #[error("denominator vanishes")]
    ZeroDenominator,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, KrfError>;
