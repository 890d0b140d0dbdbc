use thiserror::Error;

/// Errors raised by the simulation, pricing, smoothing and estimation layers.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("matrix is not positive definite (pivot {pivot} at row {row})")]
    NotPositiveDefinite { row: usize, pivot: f64 },

    #[error("invalid input: {0}")]
    Domain(String),

    #[error("option is knocked out: spot {spot} is at or above barrier {barrier}")]
    KnockedOut { spot: f64, barrier: f64 },

    #[error("numerical integration did not converge: {0}")]
    IntegrationFailure(String),

    #[error("inner path lineage does not reference the conditioning scenario")]
    MismatchedScenario,

    #[error("design matrix is rank deficient at column {column}")]
    RankDeficient { column: usize },

    #[error("kernel weights underflow at {count} evaluation point(s)")]
    EmptyNeighborhood { count: usize },

    #[error("kernel system factorization failed; ridge penalty too small for conditioning")]
    FactorizationFailure,

    #[error("training diverged: loss became non-finite at epoch {epoch}")]
    Diverged { epoch: usize },

    #[error("tuning budget exhausted after {evaluated} candidate(s)")]
    BudgetExhausted {
        evaluated: usize,
        best: Option<Box<crate::smoothers::TuneOutcome>>,
    },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("unsupported model artifact version {found} (expected {expected})")]
    VersionMismatch { found: u16, expected: u16 },

    #[error("corrupt model artifact: {0}")]
    CorruptArtifact(String),

    #[error("empty input")]
    EmptyInput,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("infeasible budget: {0}")]
    InfeasibleBudget(String),

    #[error("reference precision unreachable: half-width {half_width:.3e} > target {target:.3e} at n = {n}")]
    PrecisionUnreachable {
        half_width: f64,
        target: f64,
        n: usize,
    },

    #[error("rate analysis needs at least 3 ladder points, got {0}")]
    InsufficientPoints(usize),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain(msg: impl Into<String>) -> Error {
    Error::Domain(msg.into())
}
