use alloc::string::String;

pub type Result<T> = core::result::Result<T, Error>;

/// Fatal errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("unknown function name `{0}`")]
    UnknownFunctionName(String),
    #[error("function `{function}` has no parameter `{param}`")]
    UnknownParameter { function: String, param: String },
    #[error("function `{function}` requires parameter `{param}`")]
    MissingParameter { function: String, param: String },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("diffusion amplitude must be positive, got {0}")]
    NonPositiveSigma(f64),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("invalid prior: {0}")]
    InvalidPrior(String),
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("prior puts mass {mass:e} outside the space grid (limit 1e-6)")]
    PriorMassOutsideGrid { mass: f64 },
    #[error("simulation diverged at step {step} on path {path}")]
    SimulationDiverged { step: usize, path: usize },
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("observation record carries no truth path")]
    MissingTruthPath,
    #[error("tridiagonal solve failed at time step {step}")]
    LinearSolveFailure { step: usize },
    #[error("policy iteration did not settle at time step {step} (last change {change:e})")]
    PolicyIterationDiverged { step: usize, change: f64 },
    #[error("Riccati solution exceeded 1e8 at time step {step}")]
    RiccatiBlowup { step: usize },
    #[error("resampling is not allowed on an estimator-mode ensemble")]
    ResamplingForbiddenInEstimatorMode,
    #[error("fixed-point iteration not converged after {iterations} iterations (last change {change:e})")]
    FixedPointNotConverged { iterations: usize, change: f64 },
    #[error("mode does not match model: {0}")]
    ModeModelMismatch(String),
    #[error("alternating iteration not converged after {sweeps} sweeps (last change {change:e})")]
    IterationNotConverged { sweeps: usize, change: f64 },
    #[error("ensemble lacks {0} weights")]
    MissingWeights(&'static str),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Non-fatal conditions attached to results.
#[derive(Debug, Clone, PartialEq)]
pub enum Warning {
    /// Effective sample size fell below the configured floor.
    WeightCollapse { step: usize, ess: f64 },
    /// Cell Péclet number exceeded 2 and first-order upwinding was applied.
    CflUpwinding { node_steps: usize },
    /// The running filter of a closed-loop run lost its ensemble.
    FilterDivergence { step: usize, ess: f64 },
}
