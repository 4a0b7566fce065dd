//! A-priori bound and shape checks on a computed dual solution.
//!
//! The dual value function is known to satisfy, for all `y > 0` and `t <= T`:
//!
//! ```text
//! psi(y)  <=  v(y, t)  <=  A ( e^{B (T - t)} y^p + 1 ),      p = gamma/(gamma-1),
//! v_t <= 0,    v_y <= 0,    v_yy >= 0,
//! ```
//!
//! with `A = max{(1-gamma)/gamma, K^gamma/gamma, |K-b| k}` and
//! `B = (a^2/2) gamma/(gamma-1)^2 + (beta - r gamma)/(gamma-1)`.
//!
//! All discrete checks here are *relative*: each defect is normalised by
//! `1 + |v|` at the node, because the solution spans many orders of magnitude
//! across the log grid and raw differences near the bottom row are dominated
//! by the magnitude of `v`, not by the scheme. The single cell containing
//! `(k, T)` is skipped for the difference-based checks: the obstacle kink
//! makes one-sided differences there meaningless at the terminal level only.

use crate::dual::solve::DualSolution;
use crate::model::{HullData, ModelParams};

/// Worst-case relative defects of the bound and shape checks.
///
/// Sign conventions: gaps that must be nonnegative are reported as minima
/// (pass when above the negative tolerance); growths that must be
/// nonpositive are reported as maxima (pass when below the tolerance).
#[derive(Debug, Clone, Copy)]
pub struct BoundsReport {
    /// `min (v - psi) / (1 + |psi|)`; projection makes this >= 0 exactly.
    pub min_obstacle_gap_rel: f64,
    /// `max (v - envelope) / (1 + envelope)`; must be <= tolerance.
    pub max_envelope_excess_rel: f64,
    /// `max (v[j+1] - v[j]) / (1 + |v|)` over nodes; must be <= tolerance.
    pub max_time_growth_rel: f64,
    /// `max (v[i+1] - v[i]) / (1 + |v|)` over levels; must be <= tolerance.
    pub max_space_growth_rel: f64,
    /// `min (second difference - first difference) / (1 + |v|)` in log space;
    /// nonnegative iff the discrete y-curvature is nonnegative.
    pub min_convexity_rel: f64,
    /// Same minimum restricted to nodes strictly below the up-set edge
    /// `f(t)`, where the solution should be strictly convex.
    pub min_convexity_rel_below_f: f64,
    /// Envelope amplitude `A` used.
    pub envelope_amp: f64,
    /// Envelope rate `B` used.
    pub envelope_rate: f64,
}

/// Runs all checks on a solved instance.
pub fn verify_bounds(params: &ModelParams, hull: &HullData, sol: &DualSolution) -> BoundsReport {
    let grid = &sol.grid;
    let n = grid.n_space;
    let nt = grid.n_time;
    let kc = grid.kink_cell;
    let amp = params.envelope_amp(hull);
    let rate = params.growth_rate();
    let p_exp = params.p_exp();

    // Terminal-level nodes adjoining the kink; difference stencils touching
    // them are skipped (the obstacle kink lives between them).
    let kink_nodes = [kc, kc + 1];
    let is_kink_terminal = |i: usize, j: usize| j == nt && kink_nodes.contains(&i);

    let mut min_gap = f64::INFINITY;
    let mut max_env = f64::NEG_INFINITY;
    let mut max_tgrow = f64::NEG_INFINITY;
    let mut max_sgrow = f64::NEG_INFINITY;
    let mut min_conv = f64::INFINITY;
    let mut min_conv_below_f = f64::INFINITY;

    for j in 0..=nt {
        let level = &sol.v[j];
        let tau = grid.horizon - grid.time(j);
        let f_edge = sol.boundaries.f[j];
        for i in 0..n {
            let vi = level[i];
            let scale = 1.0 + vi.abs();

            // Lower bound: obstacle.
            let gap = (vi - sol.obstacle[i]) / (1.0 + sol.obstacle[i].abs());
            min_gap = min_gap.min(gap);

            // Upper bound: exponential envelope.
            let env = amp * ((rate * tau).exp() * grid.y[i].powf(p_exp) + 1.0);
            max_env = max_env.max((vi - env) / (1.0 + env.abs()));

            // Monotonicity in time: v(t) >= v(t + dt).
            if j < nt && !is_kink_terminal(i, j + 1) {
                max_tgrow = max_tgrow.max((sol.v[j + 1][i] - vi) / scale);
            }

            // Monotonicity in y.
            if i + 1 < n && !is_kink_terminal(i, j) && !is_kink_terminal(i + 1, j) {
                max_sgrow = max_sgrow.max((level[i + 1] - vi) / scale);
            }

            // Convexity in y: v_yy = e^{-2z}(v_zz - v_z) >= 0, tested as
            // the sign of (second difference - dz/2-weighted first difference).
            if i >= 1
                && i + 1 < n
                && !is_kink_terminal(i - 1, j)
                && !is_kink_terminal(i, j)
                && !is_kink_terminal(i + 1, j)
            {
                let d2 = (level[i + 1] - 2.0 * vi + level[i - 1]) / (grid.dz * grid.dz);
                let d1 = (level[i + 1] - level[i - 1]) / (2.0 * grid.dz);
                let defect = (d2 - d1) / scale;
                min_conv = min_conv.min(defect);
                if grid.y[i + 1] < f_edge {
                    min_conv_below_f = min_conv_below_f.min(defect);
                }
            }
        }
    }

    BoundsReport {
        min_obstacle_gap_rel: min_gap,
        max_envelope_excess_rel: max_env,
        max_time_growth_rel: max_tgrow,
        max_space_growth_rel: max_sgrow,
        min_convexity_rel: min_conv,
        min_convexity_rel_below_f: min_conv_below_f,
        envelope_amp: amp,
        envelope_rate: rate,
    }
}
