//! Numerical solver for a finite-horizon mixed control/stopping problem.
//!
//! An investor trades in an n-asset Black-Scholes market and chooses a
//! stopping time before a fixed horizon to collect the nonsmooth reward
//! `g(x) = (1/gamma)((x-b)^+ + K)^gamma`. The primal HJB variational
//! inequality is fully nonlinear, so the solver works on the convex dual
//! side, where the same problem becomes a linear parabolic obstacle problem:
//!
//! ```text
//! min{ -v_t - (a^2/2) y^2 v_yy - (beta - r) y v_y + beta v,  v - psi } = 0,
//! v(y, T) = psi(y),
//! ```
//!
//! with `a^2 = mu'(sigma sigma')^{-1} mu` and `psi` the Legendre-Fenchel
//! transform of the concave hull of `g`. The crate provides, in order of the
//! pipeline:
//!
//! 1. [`model`] — parameter validation, reward, concave hull, dual obstacle,
//!    and the five-regime classification of exercise-region shapes;
//! 2. [`dual`] — log-space finite-difference grid, implicit obstacle-problem
//!    march (projected SOR), free-boundary extraction, a-priori bound checks;
//! 3. [`primal`] — inversion of the dual slope to recover the primal value
//!    function, its exercise region, and the optimal portfolio;
//! 4. [`mc`] — seeded Monte Carlo: policy valuation, dual-martingale checks,
//!    and a bang-bang small-noise study of the corner behaviour;
//! 5. [`config`] / [`pipeline`] / [`verify`] — TOML run configuration, the
//!    end-to-end pipeline with deterministic CSV/JSON outputs, and the
//!    self-check suite behind `dualstop verify`.

pub mod config;
pub mod dual;
pub mod error;
pub mod mc;
pub mod model;
pub mod pipeline;
pub mod primal;
pub mod verify;

pub use error::{Error, Result};
pub use model::{CaseLabel, Classification, HullData, ModelParams, Obstacle};
