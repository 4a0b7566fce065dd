//! Error type shared across the solver library.

use thiserror::Error;

/// Errors produced by model construction, grid assembly, the variational
/// solver, primal recovery, and the simulation layer.
#[derive(Debug, Error)]
pub enum Error {
    /// Market or reward parameters violate a documented precondition
    /// (non-square volatility matrix, gamma outside (0,1), negative rate, ...).
    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    /// A function was evaluated outside its mathematical domain,
    /// e.g. the dual obstacle at y <= 0.
    #[error("domain error: {0}")]
    Domain(String),

    /// Grid construction failed (too few nodes, bounds that do not bracket
    /// the obstacle kink, non-positive extents, ...).
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    /// The projected relaxation sweep did not reach the requested tolerance
    /// within the iteration budget.
    #[error("no convergence after {iterations} sweeps (last update {last_update:.3e}, tol {tol:.3e})")]
    NoConvergence {
        iterations: usize,
        last_update: f64,
        tol: f64,
    },

    /// A slope-inversion query fell outside the range representable on the
    /// current dual grid.
    #[error("range error: {0}")]
    RangeError(String),

    /// A simulated state exploded past the configured guard, indicating an
    /// unstable policy/step-size combination.
    #[error("numerical blow-up: {0}")]
    NumericalBlowup(String),

    /// Configuration file could not be parsed or failed validation.
    #[error("config error: {0}")]
    Config(String),

    /// Filesystem failure while reading configs or writing outputs.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;
