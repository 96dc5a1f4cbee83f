use thiserror::Error;

use crate::dualopt::DualSolution;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid noise model: {0}")]
    InvalidModel(String),

    #[error("not H2: spectral radius {0} is not below one")]
    NotH2(f64),

    #[error("infeasible dual point: {0}")]
    InfeasibleDual(String),

    #[error("dual solver did not converge after {iterations} iterations (gradient sup-norm {certificate:e})")]
    NotConverged {
        iterations: usize,
        certificate: f64,
        best: Box<DualSolution>,
    },

    #[error("quadrature did not reach tolerance (estimate {estimate}, error bound {error_bound:e})")]
    Quadrature { estimate: f64, error_bound: f64 },

    #[error("degenerate dual point: {0}")]
    DegenerateDual(String),

    #[error("degenerate filter, no rate")]
    DegenerateFilter,

    #[error("marginal mode, cannot split: eigenvalue modulus {0}")]
    MarginalMode(f64),

    #[error("reduction order {order} exceeds numerical rank {rank}")]
    OrderExceedsRank { order: usize, rank: usize },

    #[error("message encoding: {0}")]
    Encoding(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("invalid configuration: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
