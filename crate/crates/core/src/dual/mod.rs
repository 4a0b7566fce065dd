//! Backward-in-time solver for the dual obstacle problem.
//!
//! The dual value function solves a linear parabolic variational inequality
//! on the half-line `y > 0`:
//!
//! ```text
//! min{ -v_t - (a^2/2) y^2 v_yy - (beta - r) y v_y + beta v,  v - psi } = 0,
//! v(y, T) = psi(y).
//! ```
//!
//! In log space `z = ln y` the generator has constant coefficients
//!
//! ```text
//! L = (a^2/2) d_zz + c d_z - beta,     c = beta - r - a^2/2,
//! ```
//!
//! so one stencil serves every interior row. Each backward step solves the
//! discrete linear complementarity problem
//!
//! ```text
//! min{ (I - theta dt L) v^j - (I + (1-theta) dt L) v^{j+1},  v^j - psi } = 0
//! ```
//!
//! by projected successive over-relaxation. The degenerate boundary `y -> 0`
//! needs no condition (the diffusion vanishes there in `y` terms); the bottom
//! grid row instead carries a zero-second-difference closure consistent with
//! the power-mode asymptote, and the top row pins the known flat exercise
//! value, which is exact for `y_max` far above the obstacle kink.

mod bounds;
mod grid;
mod lcp;
mod operator;
mod solve;

pub use bounds::{verify_bounds, BoundsReport};
pub use grid::DualGrid;
pub use lcp::{lcp_residual, psor_step, PsorParams, PsorStats};
pub use operator::DualOperator;
pub use solve::{
    extract_boundaries, march, solve_dual, BoundaryCurves, DualSolution, MarchStats,
    SolverSettings,
};
