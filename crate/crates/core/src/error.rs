use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("level-set gradient vanishes at boundary point ({0:e})")]
    DegenerateGradient(f64),

    #[error("domain is not convex: minimum curvature margin {margin:e}")]
    ConvexityViolated { margin: f64 },

    #[error("collision map broke energy conservation by {0:e}; this is an arithmetic bug")]
    GridTooCoarse(f64),

    #[error("kernel is singular at u = v")]
    SingularPoint,

    #[error("Poisson solve stalled after {iterations} iterations at relative residual {residual:e}")]
    SolverDiverged { iterations: usize, residual: f64 },

    #[error("point {0:?} lies outside the domain")]
    OutsideDomain([f64; 3]),

    #[error("trajectory left the domain at t = {t_exit}")]
    LeftDomain { t_exit: f64 },

    #[error("no boundary hit within horizon {horizon}")]
    NoExit { horizon: f64 },

    #[error("exit velocity is near grazing: |n.v| = {0:e}")]
    NearGrazing(f64),

    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },

    #[error("velocity is not incoming: n.v = {0:e}")]
    WrongSide(f64),

    #[error("negative distribution value {value:e} at phase node {node}")]
    NegativeValue { value: f64, node: usize },

    #[error("series contains non-positive values")]
    NonPositiveValues,

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("exponents outside admissible range: p = {p}, beta = {beta}")]
    BadExponents { p: f64, beta: f64 },

    #[error("config parse error: {0}")]
    ParseError(String),

    #[error("config constraint violated: {which}")]
    ConstraintViolation { which: String },

    #[error("step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code used by the command-line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::ParseError(_) | Error::ConstraintViolation { .. } | Error::BadExponents { .. } => 1,
            Error::AtStep { source, .. } => source.exit_code(),
            _ => 2,
        }
    }
}
