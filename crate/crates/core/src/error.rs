use thiserror::Error;

/// Errors shared by all minq modules.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("time {t} outside horizon [0, {horizon}]")]
    OutOfHorizon { t: f64, horizon: f64 },

    #[error("invalid rate matrix: {0}")]
    InvalidRates(String),

    #[error("negative birth or death rate: {0}")]
    NonnegativityViolation(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error(
        "series did not converge: order {order} reached with last term norm {last_norm:.3e} > tolerance {tol:.3e} \
         (rates too large for this step/horizon; shrink the horizon or raise max_order)"
    )]
    NoConvergence {
        order: usize,
        last_norm: f64,
        tol: f64,
    },

    #[error("time {0} is a declared rate discontinuity; derivative checks need a continuity point")]
    AtDiscontinuity(f64),

    #[error("resurrection distribution must sum to 1 (got {0})")]
    InvalidDistribution(f64),

    #[error("resurrection requires a non-conservative rate matrix (restriction would equal the minimal solution)")]
    VacuousResurrection,

    #[error("action {action:?} not available in state {state}")]
    ActionNotAvailable { state: usize, action: String },

    #[error("conditioning on survival impossible: row sum {row_sum:.3e} at node {node}")]
    DegenerateConditioning { node: usize, row_sum: f64 },

    #[error("time {0} is not a grid node")]
    OffGrid(f64),

    #[error("declared diagonal bound {bound} exceeded at t={t}: |q_ii| = {value}")]
    DiagBoundExceeded { t: f64, value: f64, bound: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
