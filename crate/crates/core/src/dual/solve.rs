//! Backward march, exercise masks, and free-boundary extraction.

use crate::dual::grid::DualGrid;
use crate::dual::lcp::{psor_step, PsorParams};
use crate::dual::operator::DualOperator;
use crate::error::{Error, Result};
use crate::model::{HullData, ModelParams, Obstacle};

/// Scheme controls for the backward march.
#[derive(Debug, Clone, Copy)]
pub struct SolverSettings {
    /// Implicitness weight: 1 = fully implicit (default), 0.5 = trapezoidal.
    pub theta: f64,
    /// Projected-relaxation controls.
    pub psor: PsorParams,
    /// A node is flagged exercised when `v - psi <= exercise_tol * (1 + |psi|)`.
    pub exercise_tol: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            theta: 1.0,
            psor: PsorParams::default(),
            exercise_tol: 1e-7,
        }
    }
}

/// Sweep totals across the whole march.
#[derive(Debug, Clone, Copy, Default)]
pub struct MarchStats {
    /// Sum of sweeps over all time steps.
    pub total_sweeps: usize,
    /// Largest sweep count of any single step.
    pub max_sweeps: usize,
}

/// Runs the backward march from the supplied terminal data.
///
/// Returns all levels, index `j` holding time `t_j = j dt`, with
/// `levels[n_time]` equal to the terminal data. `top_value(j)` supplies the
/// pinned Dirichlet value at the last node for level `j`. The march is also
/// usable with a sub-obstacle terminal condition or an effectively absent
/// obstacle (all `-inf`), which turns it into a plain linear solver for
/// validation studies.
pub fn march(
    op: &DualOperator,
    theta: f64,
    dt: f64,
    n_time: usize,
    terminal: Vec<f64>,
    obstacle: &[f64],
    top_value: impl Fn(usize) -> f64,
    psor: &PsorParams,
) -> Result<(Vec<Vec<f64>>, MarchStats)> {
    if !(0.0..=1.0).contains(&theta) {
        return Err(Error::InvalidParams(format!(
            "theta must lie in [0, 1], got {theta}"
        )));
    }
    let mut levels = vec![Vec::new(); n_time + 1];
    levels[n_time] = terminal;
    let mut stats = MarchStats::default();
    for j in (0..n_time).rev() {
        let (prev, rest) = levels.split_at_mut(j + 1);
        let next = &rest[0];
        let step = psor_step(
            op,
            theta,
            dt,
            next,
            obstacle,
            top_value(j),
            psor,
            &mut prev[j],
        )?;
        stats.total_sweeps += step.iterations;
        stats.max_sweeps = stats.max_sweeps.max(step.iterations);
    }
    Ok((levels, stats))
}

/// Free-boundary curves extracted from the exercise masks, one entry per
/// time level (`len = n_time + 1`).
///
/// Below the kink the exercise set is a band `[h(t), g(t)]`; above it, an
/// up-set `[f(t), y_max]`. Sub-cell positions are interpolated from the two
/// obstacle-gap values flanking the mask edge, at the point where the linear
/// gap crosses the exercise threshold.
#[derive(Debug, Clone)]
pub struct BoundaryCurves {
    /// Lower band edge; `None` when no node below the kink is exercised.
    pub h: Vec<Option<f64>>,
    /// True when the band reaches the bottom grid row, i.e. the lower edge
    /// is off-grid (the band extends to y = 0 as far as the grid can see).
    pub h_at_floor: Vec<bool>,
    /// Upper band edge; `None` together with `h`.
    pub g: Vec<Option<f64>>,
    /// Lower edge of the exercised up-set above the kink (always present:
    /// the far field is exercised in every regime).
    pub f: Vec<f64>,
    /// Nodes breaking the single-band structure below the kink (expected 0).
    pub band_violations: usize,
    /// Nodes breaking the up-set structure above the kink (expected 0).
    pub upset_violations: usize,
}

/// Full output of the dual solve.
#[derive(Debug, Clone)]
pub struct DualSolution {
    pub grid: DualGrid,
    /// Value levels, `v[j][i]` at time `t_j`, node `y_i`; `v[n_time] = psi`.
    pub v: Vec<Vec<f64>>,
    /// Exercise masks aligned with `v`.
    pub exercised: Vec<Vec<bool>>,
    /// Obstacle sampled on the grid.
    pub obstacle: Vec<f64>,
    /// Extracted free boundaries.
    pub boundaries: BoundaryCurves,
    /// Sweep statistics of the march.
    pub stats: MarchStats,
    /// Exercise threshold actually used for the masks.
    pub exercise_tol: f64,
}

/// Solves the dual obstacle problem on the given grid.
pub fn solve_dual(
    params: &ModelParams,
    hull: &HullData,
    grid: DualGrid,
    settings: &SolverSettings,
) -> Result<DualSolution> {
    let obs = Obstacle::new(params, hull);
    let psi: Vec<f64> = grid
        .y
        .iter()
        .map(|&y| obs.value(y))
        .collect::<Result<_>>()?;
    let op = DualOperator::assemble(params, &grid);
    let flat = params.flat_value();
    let (v, stats) = march(
        &op,
        settings.theta,
        grid.dt,
        grid.n_time,
        psi.clone(),
        &psi,
        |_| flat,
        &settings.psor,
    )?;

    let exercised: Vec<Vec<bool>> = v
        .iter()
        .map(|level| {
            level
                .iter()
                .zip(&psi)
                .map(|(&vi, &pi)| vi - pi <= settings.exercise_tol * (1.0 + pi.abs()))
                .collect()
        })
        .collect();

    let boundaries = extract_boundaries(&grid, &v, &psi, &exercised, settings.exercise_tol);

    Ok(DualSolution {
        grid,
        v,
        exercised,
        obstacle: psi,
        boundaries,
        stats,
        exercise_tol: settings.exercise_tol,
    })
}

/// Interpolated crossing of the obstacle gap with the exercise threshold,
/// between a masked node and its unmasked neighbour.
fn edge_cross(y_masked: f64, gap_masked: f64, y_free: f64, gap_free: f64, tau: f64) -> f64 {
    let denom = gap_free - gap_masked;
    let y = if denom > 0.0 {
        y_masked + (y_free - y_masked) * (tau - gap_masked) / denom
    } else {
        0.5 * (y_masked + y_free)
    };
    // Clamp into the bracketing cell regardless of orientation.
    let (lo, hi) = if y_masked <= y_free {
        (y_masked, y_free)
    } else {
        (y_free, y_masked)
    };
    y.clamp(lo, hi)
}

/// Extracts the boundary curves from the masks.
pub fn extract_boundaries(
    grid: &DualGrid,
    v: &[Vec<f64>],
    psi: &[f64],
    exercised: &[Vec<bool>],
    exercise_tol: f64,
) -> BoundaryCurves {
    let n = grid.n_space;
    let kc = grid.kink_cell;
    let n_levels = v.len();
    let mut h = vec![None; n_levels];
    let mut h_at_floor = vec![false; n_levels];
    let mut g = vec![None; n_levels];
    let mut f = vec![f64::NAN; n_levels];
    let mut band_violations = 0usize;
    let mut upset_violations = 0usize;

    let tau = |i: usize| exercise_tol * (1.0 + psi[i].abs());

    for j in 0..n_levels {
        let mask = &exercised[j];
        let level = &v[j];
        let gap = |i: usize| level[i] - psi[i];

        // Band below the kink. Row 0 is the extrapolation-closure row, not a
        // collocation row — its projection can sit on the obstacle as a pure
        // boundary artifact — so the scan starts at the first genuine row,
        // and a band starting there counts as reaching the floor.
        let below: Vec<usize> = (1..=kc).filter(|&i| mask[i]).collect();
        if let (Some(&i0), Some(&i1)) = (below.first(), below.last()) {
            band_violations += (i0..=i1).filter(|&i| !mask[i]).count();
            if i0 == 1 {
                h_at_floor[j] = true;
                h[j] = Some(grid.y[0]);
            } else {
                h[j] = Some(edge_cross(
                    grid.y[i0],
                    gap(i0),
                    grid.y[i0 - 1],
                    gap(i0 - 1),
                    tau(i0 - 1),
                ));
            }
            if i1 == kc && mask[kc + 1] {
                // Band meets the exercised up-set across the kink cell.
                g[j] = Some(grid.y[kc]);
            } else {
                g[j] = Some(edge_cross(
                    grid.y[i1],
                    gap(i1),
                    grid.y[i1 + 1],
                    gap(i1 + 1),
                    tau(i1 + 1),
                ));
            }
        }

        // Up-set above the kink. The top row is pinned at the flat exercise
        // value, so a first masked index always exists.
        let first_up = (kc + 1..n).find(|&i| mask[i]).unwrap_or(n - 1);
        upset_violations += (first_up..n).filter(|&i| !mask[i]).count();
        f[j] = if first_up == kc + 1 {
            grid.y[first_up]
        } else {
            edge_cross(
                grid.y[first_up],
                gap(first_up),
                grid.y[first_up - 1],
                gap(first_up - 1),
                tau(first_up - 1),
            )
        };
    }

    BoundaryCurves {
        h,
        h_at_floor,
        g,
        f,
        band_violations,
        upset_violations,
    }
}
