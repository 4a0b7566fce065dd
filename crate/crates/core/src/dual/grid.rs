//! Log-space grid for the dual problem.
//!
//! Nodes are uniform in `z = ln y`. The grid is shifted by at most half a
//! cell so that the obstacle kink `z = ln k` falls exactly mid-cell: the kink
//! then never coincides with a node, which keeps the discrete curvature
//! stencil well behaved on both sides and makes the kink cell unambiguous.

use crate::error::{Error, Result};
use crate::model::HullData;

/// Fewest space nodes accepted; below this the kink cell and the boundary
/// closure rows start to interact.
const MIN_SPACE_NODES: usize = 50;

/// Default grid extent relative to the kink: `y` spans `[k * 1e-4, k * 1e2]`.
const DEFAULT_SPAN_LO: f64 = 1e-4;
const DEFAULT_SPAN_HI: f64 = 1e2;

/// Uniform log-space grid with the kink centred in its cell.
#[derive(Debug, Clone)]
pub struct DualGrid {
    /// Log-space nodes, ascending, uniform spacing `dz`.
    pub z: Vec<f64>,
    /// `y = exp(z)` at each node.
    pub y: Vec<f64>,
    /// Log-space cell width.
    pub dz: f64,
    /// Time-step `T / n_time`.
    pub dt: f64,
    /// Number of space nodes.
    pub n_space: usize,
    /// Number of backward time steps (levels = `n_time + 1`).
    pub n_time: usize,
    /// Horizon `T`; level `j` sits at time `t_j = j * dt`.
    pub horizon: f64,
    /// Cell index such that `y[kink_cell] < k < y[kink_cell + 1]`.
    pub kink_cell: usize,
}

impl DualGrid {
    /// Builds the grid around the obstacle kink `k = hull.slope`.
    ///
    /// `y_min`/`y_max` override the default span `[k e-4, k e2]`; they must
    /// bracket the kink. The half-cell centring shift moves the requested
    /// bounds by at most a factor `exp(dz/2)`.
    pub fn build(
        hull: &HullData,
        horizon: f64,
        n_space: usize,
        n_time: usize,
        y_min: Option<f64>,
        y_max: Option<f64>,
    ) -> Result<Self> {
        if n_space < MIN_SPACE_NODES {
            return Err(Error::InvalidGrid(format!(
                "n_space = {n_space} is below the minimum of {MIN_SPACE_NODES}"
            )));
        }
        if n_time < 2 {
            return Err(Error::InvalidGrid(format!(
                "n_time = {n_time} must be at least 2"
            )));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::InvalidGrid(format!(
                "horizon must be finite and positive, got {horizon}"
            )));
        }
        let k = hull.slope;
        let lo = y_min.unwrap_or(k * DEFAULT_SPAN_LO);
        let hi = y_max.unwrap_or(k * DEFAULT_SPAN_HI);
        if !(lo > 0.0 && lo < k && hi > k && hi.is_finite()) {
            return Err(Error::InvalidGrid(format!(
                "grid bounds must satisfy 0 < y_min < k < y_max (got {lo}, k = {k}, {hi})"
            )));
        }

        let mut z_lo = lo.ln();
        let z_hi = hi.ln();
        let dz = (z_hi - z_lo) / (n_space - 1) as f64;
        // Centre the kink in its cell: shift the whole grid so that the
        // fractional position of ln k is exactly 0.5.
        let zk = k.ln();
        let frac = ((zk - z_lo) / dz).fract();
        z_lo += (frac - 0.5) * dz;

        let z: Vec<f64> = (0..n_space).map(|i| z_lo + i as f64 * dz).collect();
        let y: Vec<f64> = z.iter().map(|&zi| zi.exp()).collect();
        let kink_cell = ((zk - z_lo) / dz).floor() as usize;
        // The kink needs breathing room: closure rows at the bottom use two
        // neighbours, and the top row is pinned.
        if kink_cell < 3 || kink_cell + 4 > n_space {
            return Err(Error::InvalidGrid(format!(
                "kink cell {kink_cell} is too close to the grid edge; widen the y bounds"
            )));
        }
        debug_assert!(y[kink_cell] < k && k < y[kink_cell + 1]);

        Ok(Self {
            z,
            y,
            dz,
            dt: horizon / n_time as f64,
            n_space,
            n_time,
            horizon,
            kink_cell,
        })
    }

    /// Time of level `j` (level `n_time` is the horizon).
    pub fn time(&self, j: usize) -> f64 {
        if j == self.n_time {
            self.horizon
        } else {
            j as f64 * self.dt
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelParams;

    fn hull() -> HullData {
        let p = ModelParams::new(0.02, vec![0.06], vec![vec![0.3]], 0.5, 1.0, 0.5, 0.1, 1.0)
            .unwrap();
        p.compute_hull().unwrap()
    }

    #[test]
    fn kink_is_centred_in_its_cell() {
        let h = hull();
        let g = DualGrid::build(&h, 1.0, 400, 400, None, None).unwrap();
        let zk = h.slope.ln();
        let frac = (zk - g.z[0]) / g.dz - g.kink_cell as f64;
        assert!(
            (frac - 0.5).abs() < 1e-9,
            "kink should sit mid-cell, fractional position {frac}"
        );
        assert!(g.y[g.kink_cell] < h.slope && h.slope < g.y[g.kink_cell + 1]);
        // Spacing is uniform and spans roughly [k e-4, k e2].
        assert!((g.dz - (g.z[399] - g.z[0]) / 399.0).abs() < 1e-12);
        assert!(g.y[0] < h.slope * 2e-4 && g.y[399] > h.slope * 0.5e2);
    }

    #[test]
    fn grid_rejects_bad_inputs() {
        let h = hull();
        assert!(DualGrid::build(&h, 1.0, 10, 400, None, None).is_err(), "too few nodes");
        assert!(DualGrid::build(&h, 1.0, 400, 1, None, None).is_err(), "too few steps");
        assert!(DualGrid::build(&h, 0.0, 400, 400, None, None).is_err(), "zero horizon");
        assert!(
            DualGrid::build(&h, 1.0, 400, 400, Some(1.0), Some(2.0)).is_err(),
            "bounds must bracket the kink"
        );
        assert!(
            DualGrid::build(&h, 1.0, 400, 400, Some(-1.0), Some(2.0)).is_err(),
            "negative lower bound"
        );
    }

    #[test]
    fn time_axis_hits_the_horizon_exactly() {
        let h = hull();
        let g = DualGrid::build(&h, 0.7, 100, 37, None, None).unwrap();
        assert_eq!(g.time(37), 0.7);
        assert!((g.time(36) - 36.0 * 0.7 / 37.0).abs() < 1e-15);
    }
}
