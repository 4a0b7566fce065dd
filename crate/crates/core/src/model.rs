//! Market model, nonsmooth reward, its concave hull, and the dual obstacle.
//!
//! The investor controls a wealth process in an n-asset Black-Scholes market
//! (rate `r`, drift vector `mu`, volatility matrix `sigma`) and stops at a
//! time of their choice before the horizon `T`, collecting the reward
//!
//! ```text
//! g(x) = (1/gamma) * ((x - b)^+ + K)^gamma,   0 < gamma < 1, K > 0, b >= 0.
//! ```
//!
//! `g` is concave on each side of `x = b` but has a convex corner there, so
//! the HJB analysis runs through the concave hull `phi` of `g`:
//!
//! ```text
//! phi(x) = k*x + K^gamma/gamma          for 0 <= x <= x_knee,
//! phi(x) = g(x)                         for x  >  x_knee,
//! ```
//!
//! where the knee `x_knee` and slope `k` solve the smooth-pasting pair
//!
//! ```text
//! k = (x_knee - b + K)^(gamma-1),
//! k*x_knee + K^gamma/gamma = (x_knee - b + K)^gamma / gamma.
//! ```
//!
//! The Legendre-Fenchel transform of `phi` produces the dual obstacle
//!
//! ```text
//! psi(y) = ((1-gamma)/gamma) * y^(gamma/(gamma-1)) + (K - b) * y   for 0 < y < k,
//! psi(y) = K^gamma/gamma                                           for y >= k,
//! ```
//!
//! which is convex, C^0, and has a concave corner at `y = k` with left slope
//! `psi'(k-) = -x_knee`.
//!
//! The long-run behaviour of the dual solution is governed by the stationary
//! profile
//!
//! ```text
//! Psi(y) = C1 * y^(gamma/(gamma-1)) + r*(K - b)*y,
//! C1     = (beta - r*gamma)/gamma - (a^2/2)/(1 - gamma),
//! ```
//!
//! and by the threshold discount rate
//!
//! ```text
//! theta_star = (a^2/2) * gamma/(1 - gamma) + r*gamma,
//! ```
//!
//! where `a^2 = mu' (sigma sigma')^{-1} mu` is the squared market price of
//! risk. The signs of `beta - theta_star` and `Psi(k)` split the parameter
//! space into five regimes with qualitatively different exercise regions; see
//! [`CaseLabel`].

use crate::error::{Error, Result};

/// Relative tolerance for the hull smooth-pasting bisection.
const HULL_TOL: f64 = 1e-12;

/// Tolerance for the sign tests in the regime classification. Ties resolve
/// towards case I.
const CLASSIFY_TOL: f64 = 1e-12;

/// Market and reward parameters, validated at construction.
#[derive(Debug, Clone)]
pub struct ModelParams {
    /// Risk-free rate, per unit time. Must be >= 0.
    pub r: f64,
    /// Excess-drift vector of the n risky assets (already net of `r`).
    pub mu: Vec<f64>,
    /// Volatility matrix, row-major n x n; `sigma * sigma'` must be positive
    /// definite.
    pub sigma: Vec<Vec<f64>>,
    /// Reward curvature, strictly inside (0, 1).
    pub gamma: f64,
    /// Reward threshold `b >= 0`; the reward kinks at `x = b`.
    pub b: f64,
    /// Reward offset `K > 0`; guarantees `g(0) = K^gamma/gamma > 0`.
    pub k_offset: f64,
    /// Subjective discount rate, >= 0.
    pub beta: f64,
    /// Horizon `T > 0`, in the same time unit as the rates.
    pub horizon: f64,
    /// Squared market price of risk `a^2 = mu' (sigma sigma')^{-1} mu`.
    /// Derived; strictly positive.
    pub a_sq: f64,
    /// Direction `(sigma sigma')^{-1} mu` of every optimal portfolio.
    /// Derived.
    pub portfolio_dir: Vec<f64>,
    /// Market price of risk vector `sigma^{-1} mu`. Derived.
    pub risk_price: Vec<f64>,
}

impl ModelParams {
    /// Validates the raw inputs and precomputes the derived market scalars.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        r: f64,
        mu: Vec<f64>,
        sigma: Vec<Vec<f64>>,
        gamma: f64,
        b: f64,
        k_offset: f64,
        beta: f64,
        horizon: f64,
    ) -> Result<Self> {
        let inv = |s: &str| Error::InvalidParams(s.to_string());
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(inv("gamma must lie strictly inside (0, 1)"));
        }
        if !(r >= 0.0 && r.is_finite()) {
            return Err(inv("r must be finite and >= 0"));
        }
        if !(beta >= 0.0 && beta.is_finite()) {
            return Err(inv("beta must be finite and >= 0"));
        }
        if !(b >= 0.0 && b.is_finite()) {
            return Err(inv("b must be finite and >= 0"));
        }
        if !(k_offset > 0.0 && k_offset.is_finite()) {
            return Err(inv("K must be finite and > 0"));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(inv("T must be finite and > 0"));
        }
        let n = mu.len();
        if n == 0 {
            return Err(inv("mu must have at least one asset"));
        }
        if sigma.len() != n || sigma.iter().any(|row| row.len() != n) {
            return Err(inv("sigma must be square with the same dimension as mu"));
        }
        if mu.iter().any(|v| !v.is_finite())
            || sigma.iter().flatten().any(|v| !v.is_finite())
        {
            return Err(inv("mu and sigma entries must be finite"));
        }

        // sigma sigma' and its Cholesky factor; rejects singular markets.
        let cov = mat_mul_transpose(&sigma);
        let chol = cholesky(&cov)
            .ok_or_else(|| inv("sigma sigma' is not positive definite"))?;
        let portfolio_dir = cholesky_solve(&chol, &mu);
        let a_sq: f64 = mu.iter().zip(&portfolio_dir).map(|(m, d)| m * d).sum();
        if !(a_sq > 0.0) {
            return Err(inv("market price of risk must be nonzero (mu = 0 is degenerate)"));
        }
        let risk_price = solve_general(&sigma, &mu)
            .ok_or_else(|| inv("sigma is singular"))?;

        Ok(Self {
            r,
            mu,
            sigma,
            gamma,
            b,
            k_offset,
            beta,
            horizon,
            a_sq,
            portfolio_dir,
            risk_price,
        })
    }

    /// Number of risky assets.
    pub fn n_assets(&self) -> usize {
        self.mu.len()
    }

    /// Reward `g(x) = (1/gamma)((x-b)^+ + K)^gamma` for `x >= 0`.
    pub fn payoff(&self, x: f64) -> f64 {
        let base = (x - self.b).max(0.0) + self.k_offset;
        base.powf(self.gamma) / self.gamma
    }

    /// Reward value at zero wealth, `K^gamma/gamma`. This is also the flat
    /// level of the dual obstacle.
    pub fn flat_value(&self) -> f64 {
        self.k_offset.powf(self.gamma) / self.gamma
    }

    /// Dual power exponent `p = gamma/(gamma-1) < 0`.
    pub fn p_exp(&self) -> f64 {
        self.gamma / (self.gamma - 1.0)
    }

    /// Threshold discount rate `theta_star = (a^2/2) gamma/(1-gamma) + r gamma`.
    /// Discounting above it makes waiting costly everywhere.
    pub fn theta_star(&self) -> f64 {
        0.5 * self.a_sq * self.gamma / (1.0 - self.gamma) + self.r * self.gamma
    }

    /// Coefficient of the power mode in the stationary profile,
    /// `C1 = (beta - r gamma)/gamma - (a^2/2)/(1-gamma)`.
    /// Its sign matches the sign of `beta - theta_star`.
    pub fn c1(&self) -> f64 {
        (self.beta - self.r * self.gamma) / self.gamma
            - 0.5 * self.a_sq / (1.0 - self.gamma)
    }

    /// Growth rate of the power mode under the dual generator,
    /// `B = (a^2/2) gamma/(gamma-1)^2 + (beta - r gamma)/(gamma-1)`.
    /// Equals `(theta_star - beta)/(1 - gamma)`.
    pub fn growth_rate(&self) -> f64 {
        let gm1 = self.gamma - 1.0;
        0.5 * self.a_sq * self.gamma / (gm1 * gm1) + (self.beta - self.r * self.gamma) / gm1
    }

    /// Amplitude of the a-priori upper envelope for the dual value:
    /// `A = max{(1-gamma)/gamma, K^gamma/gamma, |K-b| * k}`.
    pub fn envelope_amp(&self, hull: &HullData) -> f64 {
        let a1 = (1.0 - self.gamma) / self.gamma;
        let a2 = self.flat_value();
        let a3 = (self.k_offset - self.b).abs() * hull.slope;
        a1.max(a2).max(a3)
    }

    /// Stationary profile `Psi(y) = C1 y^p + r (K-b) y`.
    pub fn stationary_profile(&self, y: f64) -> Result<f64> {
        if !(y > 0.0) {
            return Err(Error::Domain(format!(
                "stationary profile requires y > 0, got {y}"
            )));
        }
        Ok(self.c1() * y.powf(self.p_exp()) + self.r * (self.k_offset - self.b) * y)
    }

    /// Root `y_T = (-r(K-b)/C1)^(gamma-1)` of the stationary profile, when it
    /// exists in (0, inf).
    pub fn stationary_root(&self) -> Option<f64> {
        let c1 = self.c1();
        let num = -self.r * (self.k_offset - self.b);
        if c1 == 0.0 {
            return None;
        }
        let ratio = num / c1;
        if ratio > 0.0 {
            Some(ratio.powf(self.gamma - 1.0))
        } else {
            None
        }
    }

    /// Solves the smooth-pasting system for the concave hull of the reward.
    ///
    /// For `b = 0` the reward is already concave and the knee degenerates to
    /// the origin with slope `K^(gamma-1)`. Otherwise the knee is bracketed in
    /// `(b, inf)` and bisected to relative tolerance 1e-12; the returned
    /// `residual` is the pasting defect at the accepted root.
    pub fn compute_hull(&self) -> Result<HullData> {
        let (gamma, b, ko) = (self.gamma, self.b, self.k_offset);
        if b == 0.0 {
            return Ok(HullData {
                x_knee: 0.0,
                slope: ko.powf(gamma - 1.0),
                residual: 0.0,
            });
        }
        let flat = self.flat_value();
        // F(x) = (x-b+K)^(gamma-1) x + K^gamma/gamma - (x-b+K)^gamma/gamma.
        // F(b) = K^(gamma-1) b > 0 and F -> -inf, so a sign change exists.
        let pasting = |x: f64| -> f64 {
            let base = x - b + ko;
            base.powf(gamma - 1.0) * x + flat - base.powf(gamma) / gamma
        };
        let mut lo = b;
        let mut hi = b + ko.max(1.0);
        let mut guard = 0;
        while pasting(hi) > 0.0 {
            hi *= 2.0;
            guard += 1;
            if guard > 200 {
                return Err(Error::InvalidParams(
                    "hull pasting root not bracketed; parameters are out of range".into(),
                ));
            }
        }
        while hi - lo > HULL_TOL * hi.max(1.0) {
            let mid = 0.5 * (lo + hi);
            if pasting(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let x_knee = 0.5 * (lo + hi);
        Ok(HullData {
            x_knee,
            slope: (x_knee - b + ko).powf(gamma - 1.0),
            residual: pasting(x_knee),
        })
    }

    /// Classifies the parameter regime from the signs of `beta - theta_star`
    /// and `Psi(k)`. Ties within [`CLASSIFY_TOL`] resolve towards case I.
    pub fn classify(&self, hull: &HullData) -> Result<Classification> {
        let theta_star = self.theta_star();
        let psi_at_k = self.stationary_profile(hull.slope)?;
        let d = self.beta - theta_star;
        let eps = CLASSIFY_TOL;

        let label = if d >= -eps && psi_at_k >= -eps {
            CaseLabel::I
        } else if d > eps && psi_at_k < -eps {
            CaseLabel::IIStrict
        } else if d.abs() <= eps && psi_at_k < -eps {
            CaseLabel::IIEqual
        } else if d < -eps && psi_at_k > eps {
            CaseLabel::III
        } else {
            // d < -eps and psi_at_k <= eps
            CaseLabel::IV
        };

        let y_terminal = match label {
            CaseLabel::IIStrict | CaseLabel::III => {
                let y_t = self.stationary_root().ok_or_else(|| {
                    Error::InvalidParams(
                        "stationary root expected but absent; classification is inconsistent"
                            .into(),
                    )
                })?;
                Some(y_t)
            }
            _ => None,
        };

        Ok(Classification {
            label,
            theta_star,
            c1: self.c1(),
            psi_at_k,
            y_terminal,
            envelope_amp: self.envelope_amp(hull),
            growth_rate: self.growth_rate(),
        })
    }
}

/// Concave hull of the reward: linear with slope `slope` on `[0, x_knee]`,
/// equal to the reward beyond the knee.
#[derive(Debug, Clone, Copy)]
pub struct HullData {
    /// Pasting point where the linear piece meets the reward.
    pub x_knee: f64,
    /// Slope of the linear piece; also the kink location of the dual obstacle.
    pub slope: f64,
    /// Pasting defect at the accepted root (diagnostic; ~1e-13 or below).
    pub residual: f64,
}

impl HullData {
    /// Hull value `phi(x)` for `x >= 0`.
    pub fn value(&self, params: &ModelParams, x: f64) -> f64 {
        if x <= self.x_knee {
            self.slope * x + params.flat_value()
        } else {
            params.payoff(x)
        }
    }

    /// Hull derivative `phi'(x)`; equals `slope` left of the knee.
    pub fn derivative(&self, params: &ModelParams, x: f64) -> f64 {
        if x <= self.x_knee {
            self.slope
        } else {
            (x - params.b + params.k_offset).powf(params.gamma - 1.0)
        }
    }
}

/// Dual obstacle `psi`, the Legendre-Fenchel transform of the hull:
/// a strictly convex power-plus-linear branch on `(0, k)` glued to the flat
/// level `K^gamma/gamma` on `[k, inf)`.
#[derive(Debug, Clone, Copy)]
pub struct Obstacle {
    /// Kink location (hull slope `k`).
    pub split: f64,
    /// Flat level `K^gamma/gamma`.
    pub flat: f64,
    p: f64,
    coef: f64,
    lin: f64,
    inv_gm1: f64,
}

impl Obstacle {
    /// Builds the obstacle from validated parameters and their hull.
    pub fn new(params: &ModelParams, hull: &HullData) -> Self {
        Self {
            split: hull.slope,
            flat: params.flat_value(),
            p: params.p_exp(),
            coef: (1.0 - params.gamma) / params.gamma,
            lin: params.k_offset - params.b,
            inv_gm1: 1.0 / (params.gamma - 1.0),
        }
    }

    /// `psi(y)` for `y > 0`.
    pub fn value(&self, y: f64) -> Result<f64> {
        if !(y > 0.0) {
            return Err(Error::Domain(format!("obstacle requires y > 0, got {y}")));
        }
        Ok(if y < self.split {
            self.coef * y.powf(self.p) + self.lin * y
        } else {
            self.flat
        })
    }

    /// Left derivative `psi'(y)`; zero on the flat branch. At the kink the
    /// left slope is `-x_knee`.
    pub fn slope(&self, y: f64) -> Result<f64> {
        if !(y > 0.0) {
            return Err(Error::Domain(format!("obstacle requires y > 0, got {y}")));
        }
        Ok(if y < self.split {
            -y.powf(self.inv_gm1) + self.lin
        } else {
            0.0
        })
    }

    /// Second derivative `psi''(y)`; strictly positive on the power branch,
    /// zero on the flat branch.
    pub fn curvature(&self, y: f64) -> Result<f64> {
        if !(y > 0.0) {
            return Err(Error::Domain(format!("obstacle requires y > 0, got {y}")));
        }
        Ok(if y < self.split {
            -self.inv_gm1 * y.powf(self.inv_gm1 - 1.0)
        } else {
            0.0
        })
    }
}

/// Parameter regimes, split by the signs of `beta - theta_star` and `Psi(k)`.
///
/// * `I`        — beta >= theta_star and Psi(k) >= 0: exercise reaches the kink.
/// * `IIStrict` — beta >  theta_star and Psi(k) <  0: exercise band shrinks to
///   the stationary root y_T < k.
/// * `IIEqual`  — beta == theta_star and Psi(k) < 0: boundary creeps to zero.
/// * `III`      — beta <  theta_star and Psi(k) >  0: band pinched between the
///   stationary root and the kink.
/// * `IV`       — beta <  theta_star and Psi(k) <= 0: waiting always wins;
///   exercise only at the horizon.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CaseLabel {
    I,
    IIStrict,
    IIEqual,
    III,
    IV,
}

impl std::fmt::Display for CaseLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            CaseLabel::I => "I",
            CaseLabel::IIStrict => "II_strict",
            CaseLabel::IIEqual => "II_equal",
            CaseLabel::III => "III",
            CaseLabel::IV => "IV",
        };
        f.write_str(s)
    }
}

/// Outcome of the regime classification, with the scalars the downstream
/// solver and reports need.
#[derive(Debug, Clone, Copy)]
pub struct Classification {
    pub label: CaseLabel,
    /// Threshold discount rate.
    pub theta_star: f64,
    /// Power-mode coefficient of the stationary profile.
    pub c1: f64,
    /// Stationary profile evaluated at the obstacle kink.
    pub psi_at_k: f64,
    /// Root of the stationary profile (cases II_strict and III only).
    pub y_terminal: Option<f64>,
    /// Amplitude `A` of the a-priori dual envelope.
    pub envelope_amp: f64,
    /// Exponential rate `B` of the a-priori dual envelope.
    pub growth_rate: f64,
}

// ---------------------------------------------------------------------------
// Small dense linear algebra (n is the asset count: tiny).
// ---------------------------------------------------------------------------

/// `m * m'` for a row-major square matrix.
fn mat_mul_transpose(m: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = m.len();
    let mut out = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            out[i][j] = (0..n).map(|l| m[i][l] * m[j][l]).sum();
        }
    }
    out
}

/// Lower-triangular Cholesky factor of a symmetric matrix, or `None` if the
/// matrix is not (numerically) positive definite.
fn cholesky(a: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
    let n = a.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|p| l[i][p] * l[j][p]).sum();
            if i == j {
                let d = a[i][i] - s;
                if d <= 0.0 || !d.is_finite() {
                    return None;
                }
                l[i][j] = d.sqrt();
            } else {
                l[i][j] = (a[i][j] - s) / l[j][j];
            }
        }
    }
    Some(l)
}

/// Solves `L L' x = rhs` given the Cholesky factor `L`.
fn cholesky_solve(l: &[Vec<f64>], rhs: &[f64]) -> Vec<f64> {
    let n = l.len();
    let mut y = vec![0.0; n];
    for i in 0..n {
        let s: f64 = (0..i).map(|j| l[i][j] * y[j]).sum();
        y[i] = (rhs[i] - s) / l[i][i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|j| l[j][i] * x[j]).sum();
        x[i] = (y[i] - s) / l[i][i];
    }
    x
}

/// Solves `a x = rhs` by Gaussian elimination with partial pivoting.
/// Returns `None` when `a` is singular.
fn solve_general(a: &[Vec<f64>], rhs: &[f64]) -> Option<Vec<f64>> {
    let n = a.len();
    let mut m: Vec<Vec<f64>> = a.to_vec();
    let mut x = rhs.to_vec();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| {
            m[i][col].abs().total_cmp(&m[j][col].abs())
        })?;
        if m[piv][col].abs() < 1e-300 {
            return None;
        }
        m.swap(col, piv);
        x.swap(col, piv);
        for row in col + 1..n {
            let f = m[row][col] / m[col][col];
            for c in col..n {
                m[row][c] -= f * m[col][c];
            }
            x[row] -= f * x[col];
        }
    }
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|j| m[i][j] * x[j]).sum();
        x[i] = (x[i] - s) / m[i][i];
    }
    Some(x)
}
