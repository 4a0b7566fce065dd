//! Monte-Carlo validation of policies on the wealth process.
//!
//! The wealth dynamics are `dX = (r X + mu' pi) dt + pi' sigma dW` with the
//! running reward discounted at rate `beta`: a policy is an allocation rule
//! `pi(x, t)` plus a stopping rule, and its value is
//! `E[e^{-beta tau} g(X_tau)]` where `tau` is the first time the stopping
//! rule fires (forced at the horizon) and `g` the exercise reward.
//!
//! Everything here is an *independent* check of the PDE pipeline: paths are
//! driven by Euler-Maruyama steps, not by any quantity the solver produced,
//! and two analytic identities (the deflated-wealth martingale property and
//! the high-intensity two-point limit of a driftless bang-bang policy) are
//! available as oracles that bypass the solver entirely.
//!
//! Reproducibility contract: every path owns a counter-derived ChaCha12
//! stream keyed by `(seed, path index)`, aggregation is a fixed-shape
//! pairwise reduction over the path-indexed outcome array, and worker threads
//! only ever split that array into disjoint slices — so results are
//! bit-identical for any worker count, including 1.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::model::{HullData, ModelParams};
use crate::primal::{portfolio_scale_at, PrimalSolution, UpperEdge};

/// Leverage cap: the allocation norm is clamped to `CLAMP_FACTOR * x`.
///
/// Near the exercise edge the recovered curvature goes to zero and the
/// nominal allocation diverges; the cap keeps Euler steps stable there. The
/// number of clamp events is reported so a run dominated by clamping is
/// visible.
pub const CLAMP_FACTOR: f64 = 50.0;

/// A path whose wealth exceeds `BLOWUP_FACTOR * x0` (or turns non-finite)
/// aborts the run with [`Error::NumericalBlowup`].
pub const BLOWUP_FACTOR: f64 = 1e6;

/// Simulation controls shared by all Monte-Carlo entry points.
#[derive(Debug, Clone, Copy)]
pub struct SimConfig {
    /// Number of simulated paths (>= 1000).
    pub n_paths: usize,
    /// Euler step; must not exceed `horizon / 100`.
    pub dt_sim: f64,
    /// Reproducibility seed; identical seeds replay bit-identical runs.
    pub seed: u64,
    /// Pair consecutive paths on mirrored Gaussian draws.
    pub antithetic: bool,
}

impl SimConfig {
    /// Validates the path count and step size against a horizon.
    pub fn validate(&self, horizon: f64) -> Result<()> {
        if self.n_paths < 1000 {
            return Err(Error::InvalidParams(format!(
                "n_paths = {} is below the minimum of 1000",
                self.n_paths
            )));
        }
        if !(self.dt_sim > 0.0) {
            return Err(Error::InvalidParams(format!(
                "dt_sim must be positive, got {}",
                self.dt_sim
            )));
        }
        if self.dt_sim > horizon / 100.0 {
            return Err(Error::InvalidParams(format!(
                "dt_sim = {} exceeds horizon/100 = {}",
                self.dt_sim,
                horizon / 100.0
            )));
        }
        Ok(())
    }
}

/// Outcome of one Monte-Carlo estimate.
#[derive(Debug, Clone, Copy)]
pub struct McReport {
    /// Sample mean of the discounted reward (or of the deflated product for
    /// the martingale check).
    pub estimate: f64,
    /// Standard error of the mean.
    pub std_error: f64,
    /// 95% confidence interval, centred on the estimate.
    pub ci95: (f64, f64),
    /// Paths that stopped strictly before the horizon (stop-rule fires or
    /// wealth absorbs at zero).
    pub n_stopped_early: usize,
    /// Euler steps at which the leverage cap rescaled the allocation.
    pub n_clamped: u64,
    /// Three-sigma verdict against a reference value, where one applies.
    pub verdict: Option<bool>,
}

impl McReport {
    /// Three-sigma agreement with a reference value, with an extra additive
    /// allowance for deterministic bias (grid error, Euler weak error).
    pub fn three_sigma_matches(&self, reference: f64, allowance: f64) -> bool {
        (self.estimate - reference).abs() <= 3.0 * self.std_error + allowance
    }
}

/// A feedback policy: risky allocation plus stopping rule.
///
/// Implementations must be total on `x >= 0`, `t` in `[0, horizon]`; the
/// driver owns absorption at zero and forced exercise at the horizon.
pub trait Policy: Sync {
    /// Writes the risky allocation vector at `(x, t)` into `pi`.
    fn allocation(&self, x: f64, t: f64, pi: &mut [f64]) -> Result<()>;
    /// True when `(x, t)` lies in the stop region.
    fn stop(&self, x: f64, t: f64) -> bool;
}

/// Zero allocation, never stops: rides the riskless rate to the horizon.
pub struct HoldRiskless;

impl Policy for HoldRiskless {
    fn allocation(&self, _x: f64, _t: f64, pi: &mut [f64]) -> Result<()> {
        pi.fill(0.0);
        Ok(())
    }
    fn stop(&self, _x: f64, _t: f64) -> bool {
        false
    }
}

/// Zero allocation, stops at once: realises the raw reward `g(x0)`.
pub struct StopNow;

impl Policy for StopNow {
    fn allocation(&self, _x: f64, _t: f64, pi: &mut [f64]) -> Result<()> {
        pi.fill(0.0);
        Ok(())
    }
    fn stop(&self, _x: f64, _t: f64) -> bool {
        true
    }
}

/// Fixed-fraction allocation `pi = x * weights`, never stops.
pub struct ConstantMix {
    /// Per-asset wealth fractions.
    pub weights: Vec<f64>,
}

impl Policy for ConstantMix {
    fn allocation(&self, x: f64, _t: f64, pi: &mut [f64]) -> Result<()> {
        for (p, w) in pi.iter_mut().zip(&self.weights) {
            *p = x * w;
        }
        Ok(())
    }
    fn stop(&self, _x: f64, _t: f64) -> bool {
        false
    }
}

/// The solver's own candidate: allocation from the recovered portfolio scale
/// and stopping inside the recovered exercise interval `[G(t), H(t)]`.
pub struct RecoveredPolicy<'a> {
    params: &'a ModelParams,
    primal: &'a PrimalSolution,
}

impl<'a> RecoveredPolicy<'a> {
    pub fn new(params: &'a ModelParams, primal: &'a PrimalSolution) -> Self {
        Self { params, primal }
    }

    /// Exercise interval at time `t`, linearly interpolated between the two
    /// bracketing levels. The lower edge must exist on both levels to count;
    /// an unbounded upper edge on either level makes the interval one-sided.
    fn region_at(&self, t: f64) -> Option<(f64, f64)> {
        let ts = &self.primal.t;
        let n = ts.len();
        let dt = if n > 1 { ts[1] - ts[0] } else { 1.0 };
        let pos = (t / dt).clamp(0.0, (n - 1) as f64);
        let j0 = pos.floor() as usize;
        let j1 = (j0 + 1).min(n - 1);
        let w = pos - j0 as f64;
        let lo = match (self.primal.lower_edge[j0], self.primal.lower_edge[j1]) {
            (Some(a), Some(b)) => a * (1.0 - w) + b * w,
            _ => return None,
        };
        let hi = match (self.primal.upper_edge[j0], self.primal.upper_edge[j1]) {
            (UpperEdge::Value(a), UpperEdge::Value(b)) => a * (1.0 - w) + b * w,
            (UpperEdge::Unbounded, _) | (_, UpperEdge::Unbounded) => f64::INFINITY,
            _ => return None,
        };
        Some((lo, hi))
    }
}

impl Policy for RecoveredPolicy<'_> {
    fn allocation(&self, x: f64, t: f64, pi: &mut [f64]) -> Result<()> {
        // Beyond the recovered wealth ladder the value is power-like, where
        // the scale -V_x/V_xx grows linearly in wealth: query at the ladder
        // top and stretch.
        let xs = &self.primal.x;
        let cap = xs[xs.len() - 1] * (1.0 - 1e-9);
        let (xq, stretch) = if x > cap { (cap, x / cap) } else { (x, 1.0) };
        let s = portfolio_scale_at(self.primal, xq, t)? * stretch;
        for (p, d) in pi.iter_mut().zip(&self.params.portfolio_dir) {
            *p = s * d;
        }
        Ok(())
    }

    fn stop(&self, x: f64, t: f64) -> bool {
        match self.region_at(t) {
            Some((lo, hi)) => x >= lo && x <= hi,
            None => false,
        }
    }
}

/// One estimate plus barrier statistics from the bang-bang construction.
#[derive(Debug, Clone, Copy)]
pub struct BangBangReport {
    /// Diffusion intensity `N` of this run.
    pub intensity: f64,
    /// Estimate of the undiscounted terminal reward `E[g(X_T)]`.
    pub report: McReport,
    /// Fraction of paths absorbed at the upper barrier (the hull knee).
    pub p_upper: f64,
    /// Fraction of paths absorbed at zero.
    pub p_lower: f64,
}

// ---------------------------------------------------------------------------
// Path driver
// ---------------------------------------------------------------------------

const SEED_SALT: u64 = 0xA076_1D64_78BD_642F;

fn splitmix64(v: u64) -> u64 {
    let mut z = v.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Counter-derived generator for one path stream: scheduling-independent by
/// construction, avalanche via a splitmix chain so neighbouring stream
/// indices share no key structure.
fn path_rng(seed: u64, stream: u64) -> ChaCha12Rng {
    let k0 = splitmix64(seed ^ SEED_SALT ^ stream);
    let k1 = splitmix64(k0);
    let k2 = splitmix64(k1);
    let k3 = splitmix64(k2);
    let mut key = [0u8; 32];
    for (chunk, k) in key.chunks_exact_mut(8).zip([k0, k1, k2, k3]) {
        chunk.copy_from_slice(&k.to_le_bytes());
    }
    ChaCha12Rng::from_seed(key)
}

/// Fixed-shape pairwise sum: associativity order depends only on the slice
/// length, never on worker count.
fn pairwise_sum(v: &[f64]) -> f64 {
    match v.len() {
        0 => 0.0,
        1 => v[0],
        2 => v[0] + v[1],
        n => {
            let mid = n / 2;
            pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
        }
    }
}

struct PathOutcome {
    payoff: f64,
    stopped_early: bool,
    clamp_events: u64,
}

fn worker_count(n_paths: usize) -> usize {
    let from_env = std::env::var("SOLVER_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok());
    let hw = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1);
    from_env.unwrap_or(hw).clamp(1, 64).min(n_paths.max(1))
}

/// Runs `cfg.n_paths` independent paths of `kernel` over `threads` workers
/// and reduces deterministically. The kernel receives the path's generator
/// and its antithetic sign.
fn run_paths<K>(cfg: &SimConfig, threads: usize, kernel: &K) -> Result<(McReport, Vec<f64>)>
where
    K: Fn(&mut ChaCha12Rng, f64) -> Result<PathOutcome> + Sync,
{
    let n = cfg.n_paths;
    let mut payoffs = vec![0.0f64; n];
    let mut early_flags = vec![false; n];
    // Per-worker partials; merged in worker order below.
    let mut clamp_parts = vec![0u64; threads];
    let mut errors: Vec<Option<(usize, Error)>> = Vec::new();
    errors.resize_with(threads, || None);

    let chunk = n.div_ceil(threads);
    std::thread::scope(|scope| {
        let mut rest_pay = payoffs.as_mut_slice();
        let mut rest_early = early_flags.as_mut_slice();
        let mut handles = Vec::new();
        for (w, (clamp_slot, err_slot)) in
            clamp_parts.iter_mut().zip(errors.iter_mut()).enumerate()
        {
            let start = w * chunk;
            if start >= n {
                break;
            }
            let len = chunk.min(n - start);
            let (pay, tail_pay) = rest_pay.split_at_mut(len);
            let (early, tail_early) = rest_early.split_at_mut(len);
            rest_pay = tail_pay;
            rest_early = tail_early;
            handles.push(scope.spawn(move || {
                for (off, (p, e)) in pay.iter_mut().zip(early.iter_mut()).enumerate() {
                    let path = start + off;
                    let stream = if cfg.antithetic {
                        (path / 2) as u64
                    } else {
                        path as u64
                    };
                    let sign = if cfg.antithetic && path % 2 == 1 {
                        -1.0
                    } else {
                        1.0
                    };
                    let mut rng = path_rng(cfg.seed, stream);
                    match kernel(&mut rng, sign) {
                        Ok(out) => {
                            *p = out.payoff;
                            *e = out.stopped_early;
                            *clamp_slot += out.clamp_events;
                        }
                        Err(err) => {
                            *err_slot = Some((path, err));
                            return;
                        }
                    }
                }
            }));
        }
        for h in handles {
            h.join().expect("simulation worker panicked");
        }
    });

    // Deterministic error selection: lowest path index wins.
    if let Some((_, err)) = errors
        .into_iter()
        .flatten()
        .min_by_key(|(path, _)| *path)
    {
        return Err(err);
    }

    let nf = n as f64;
    let estimate = pairwise_sum(&payoffs) / nf;
    let sq: Vec<f64> = payoffs
        .iter()
        .map(|p| (p - estimate) * (p - estimate))
        .collect();
    let var = if n > 1 {
        pairwise_sum(&sq) / (nf - 1.0)
    } else {
        0.0
    };
    let std_error = (var / nf).sqrt();
    let half = 1.96 * std_error;
    let report = McReport {
        estimate,
        std_error,
        ci95: (estimate - half, estimate + half),
        n_stopped_early: early_flags.iter().filter(|&&e| e).count(),
        n_clamped: clamp_parts.iter().sum(),
        verdict: None,
    };
    Ok((report, payoffs))
}

/// Per-step wealth update shared by the valuation and martingale kernels.
struct WealthStep<'a> {
    params: &'a ModelParams,
    dt: f64,
    sqrt_dt: f64,
    blowup_cap: f64,
}

impl WealthStep<'_> {
    /// Clamps the allocation in place, advances wealth by one Euler step
    /// with the supplied signed draws, and returns `(new_x, clamped)`.
    /// Wealth at or below zero is absorbed to exactly zero.
    fn advance(&self, x: f64, pi: &mut [f64], z: &[f64], sign: f64) -> Result<(f64, bool)> {
        let norm = pi.iter().map(|p| p * p).sum::<f64>().sqrt();
        let cap = CLAMP_FACTOR * x;
        let mut clamped = false;
        if norm > cap {
            let scale = cap / norm;
            for p in pi.iter_mut() {
                *p *= scale;
            }
            clamped = true;
        }
        let p = self.params;
        let drift: f64 = p.r * x + p.mu.iter().zip(pi.iter()).map(|(m, q)| m * q).sum::<f64>();
        let mut noise = 0.0;
        for (l, &zl) in z.iter().enumerate() {
            let load: f64 = pi.iter().zip(&p.sigma).map(|(q, row)| q * row[l]).sum();
            noise += load * zl;
        }
        let mut x_new = x + drift * self.dt + noise * self.sqrt_dt * sign;
        if !(x_new < self.blowup_cap) {
            return Err(Error::NumericalBlowup(format!(
                "wealth reached {x_new:.3e} (cap {:.3e}); the policy/step combination is unstable",
                self.blowup_cap
            )));
        }
        if x_new <= 0.0 {
            x_new = 0.0;
        }
        Ok((x_new, clamped))
    }
}

// ---------------------------------------------------------------------------
// Entry points
// ---------------------------------------------------------------------------

/// Estimates the value `E[e^{-beta tau} g(X_tau)]` of a feedback policy from
/// `x0` at time zero.
///
/// The stop rule is consulted at every monitoring time before stepping;
/// wealth hitting zero absorbs (allocation forced to zero) and exercises
/// immediately; the horizon forces exercise. Any path exceeding
/// [`BLOWUP_FACTOR`]` * x0` aborts with [`Error::NumericalBlowup`].
pub fn simulate_value(
    x0: f64,
    policy: &dyn Policy,
    params: &ModelParams,
    cfg: &SimConfig,
) -> Result<McReport> {
    simulate_value_with_threads(x0, policy, params, cfg, worker_count(cfg.n_paths))
}

fn simulate_value_with_threads(
    x0: f64,
    policy: &dyn Policy,
    params: &ModelParams,
    cfg: &SimConfig,
    threads: usize,
) -> Result<McReport> {
    if !(x0 > 0.0) {
        return Err(Error::InvalidParams(format!(
            "initial wealth must be positive, got {x0}"
        )));
    }
    cfg.validate(params.horizon)?;
    let n_steps = (params.horizon / cfg.dt_sim).ceil() as usize;
    let dt = params.horizon / n_steps as f64;
    let step = WealthStep {
        params,
        dt,
        sqrt_dt: dt.sqrt(),
        blowup_cap: BLOWUP_FACTOR * x0,
    };
    let n_assets = params.n_assets();

    let kernel = move |rng: &mut ChaCha12Rng, sign: f64| -> Result<PathOutcome> {
        let mut x = x0;
        let mut pi = vec![0.0; n_assets];
        let mut z = vec![0.0; n_assets];
        let mut clamps = 0u64;
        for k in 0..=n_steps {
            let t = k as f64 * dt;
            if x <= 0.0 {
                // Absorbed: zero allocation is the only admissible choice,
                // so exercise now at the flat reward level.
                return Ok(PathOutcome {
                    payoff: (-params.beta * t).exp() * params.payoff(0.0),
                    stopped_early: true,
                    clamp_events: clamps,
                });
            }
            if k == n_steps || policy.stop(x, t) {
                return Ok(PathOutcome {
                    payoff: (-params.beta * t).exp() * params.payoff(x),
                    stopped_early: k < n_steps,
                    clamp_events: clamps,
                });
            }
            policy.allocation(x, t, &mut pi)?;
            for zl in z.iter_mut() {
                *zl = StandardNormal.sample(rng);
            }
            let (x_new, clamped) = step.advance(x, &mut pi, &z, sign)?;
            x = x_new;
            clamps += u64::from(clamped);
        }
        unreachable!("the step loop always returns at or before the horizon")
    };

    let (report, _) = run_paths(cfg, threads, &kernel)?;
    Ok(report)
}

/// Checks the deflated-wealth martingale identity `E[zeta_T X_T] = x0` for
/// an arbitrary bounded policy (the stop rule is ignored; paths run to the
/// horizon).
///
/// The deflator is updated by its exact exponential increment
/// `zeta *= exp(-(r + a^2/2) dt - theta' dW)` with `theta` the risk-price
/// vector, so the only weak error in the product comes from the Euler wealth
/// step. The verdict field carries the three-sigma comparison against `x0`.
pub fn martingale_check(
    x0: f64,
    policy: &dyn Policy,
    params: &ModelParams,
    cfg: &SimConfig,
) -> Result<McReport> {
    martingale_check_with_threads(x0, policy, params, cfg, worker_count(cfg.n_paths))
}

fn martingale_check_with_threads(
    x0: f64,
    policy: &dyn Policy,
    params: &ModelParams,
    cfg: &SimConfig,
    threads: usize,
) -> Result<McReport> {
    if !(x0 > 0.0) {
        return Err(Error::InvalidParams(format!(
            "initial wealth must be positive, got {x0}"
        )));
    }
    cfg.validate(params.horizon)?;
    let n_steps = (params.horizon / cfg.dt_sim).ceil() as usize;
    let dt = params.horizon / n_steps as f64;
    let step = WealthStep {
        params,
        dt,
        sqrt_dt: dt.sqrt(),
        blowup_cap: BLOWUP_FACTOR * x0,
    };
    let n_assets = params.n_assets();
    let zeta_drift = -(params.r + 0.5 * params.a_sq) * dt;

    let kernel = move |rng: &mut ChaCha12Rng, sign: f64| -> Result<PathOutcome> {
        let mut x = x0;
        let mut zeta = 1.0f64;
        let mut pi = vec![0.0; n_assets];
        let mut z = vec![0.0; n_assets];
        let mut clamps = 0u64;
        for k in 0..n_steps {
            if x <= 0.0 {
                break; // absorbed: the product is zero from here on
            }
            let t = k as f64 * dt;
            policy.allocation(x, t, &mut pi)?;
            for zl in z.iter_mut() {
                *zl = StandardNormal.sample(rng);
            }
            let (x_new, clamped) = step.advance(x, &mut pi, &z, sign)?;
            let theta_dw: f64 = params
                .risk_price
                .iter()
                .zip(z.iter())
                .map(|(th, zl)| th * zl)
                .sum();
            zeta *= (zeta_drift - theta_dw * step.sqrt_dt * sign).exp();
            x = x_new;
            clamps += u64::from(clamped);
        }
        Ok(PathOutcome {
            payoff: zeta * x,
            stopped_early: false,
            clamp_events: clamps,
        })
    };

    let (mut report, _) = run_paths(cfg, threads, &kernel)?;
    report.verdict = Some(report.three_sigma_matches(x0, 0.0));
    Ok(report)
}

/// Simulates the driftless high-intensity policy `dX = N 1{0 < X < knee} dW`
/// over a short `horizon`, absorbing at zero and at the hull knee, for each
/// intensity in `n_list`.
///
/// As `N` grows the terminal law concentrates on the two barriers with
/// `P(upper) -> x0 / knee`, so the undiscounted reward estimate
/// `E[g(X_T)]` climbs towards the concave-hull value at `x0`. Reported
/// hitting fractions let callers check the two-point limit directly.
pub fn bang_bang_limit(
    x0: f64,
    n_list: &[f64],
    horizon: f64,
    params: &ModelParams,
    hull: &HullData,
    cfg: &SimConfig,
) -> Result<Vec<BangBangReport>> {
    let knee = hull.x_knee;
    if !(x0 > 0.0 && x0 < knee) {
        return Err(Error::Domain(format!(
            "bang-bang start {x0} must lie strictly inside (0, {knee})"
        )));
    }
    if !(horizon > 0.0) {
        return Err(Error::Domain(format!(
            "bang-bang horizon must be positive, got {horizon}"
        )));
    }
    cfg.validate(horizon)?;
    let threads = worker_count(cfg.n_paths);
    let n_steps = (horizon / cfg.dt_sim).ceil() as usize;
    let dt = horizon / n_steps as f64;
    let sqrt_dt = dt.sqrt();

    let mut out = Vec::with_capacity(n_list.len());
    for &intensity in n_list {
        if !(intensity > 0.0) {
            return Err(Error::InvalidParams(format!(
                "bang-bang intensity must be positive, got {intensity}"
            )));
        }
        let kernel = move |rng: &mut ChaCha12Rng, sign: f64| -> Result<PathOutcome> {
            let mut x = x0;
            let mut absorbed_at = 0u8; // 0 interior, 1 lower, 2 upper
            for _ in 0..n_steps {
                let z: f64 = StandardNormal.sample(rng);
                x += intensity * sqrt_dt * z * sign;
                if x <= 0.0 {
                    x = 0.0;
                    absorbed_at = 1;
                    break;
                }
                if x >= knee {
                    x = knee;
                    absorbed_at = 2;
                    break;
                }
            }
            Ok(PathOutcome {
                payoff: params.payoff(x),
                stopped_early: absorbed_at != 0,
                // Barrier codes ride the clamp counter; decoded below.
                clamp_events: match absorbed_at {
                    1 => 1,
                    2 => 1 << 32,
                    _ => 0,
                },
            })
        };
        let (mut report, _) = run_paths(cfg, threads, &kernel)?;
        let lower_hits = report.n_clamped & 0xFFFF_FFFF;
        let upper_hits = report.n_clamped >> 32;
        report.n_clamped = 0;
        let nf = cfg.n_paths as f64;
        out.push(BangBangReport {
            intensity,
            report,
            p_upper: upper_hits as f64 / nf,
            p_lower: lower_hits as f64 / nf,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dual::{solve_dual, DualGrid, SolverSettings};
    use crate::primal::recover_primal;
    use approx::assert_abs_diff_eq;

    fn case_one() -> ModelParams {
        ModelParams::new(0.02, vec![0.06], vec![vec![0.3]], 0.5, 1.0, 0.5, 0.1, 1.0).unwrap()
    }

    fn cfg(n_paths: usize, dt: f64, seed: u64) -> SimConfig {
        SimConfig {
            n_paths,
            dt_sim: dt,
            seed,
            antithetic: false,
        }
    }

    #[test]
    fn stopping_at_once_returns_the_reward_exactly() {
        let p = case_one();
        let rep = simulate_value(2.0, &StopNow, &p, &cfg(1000, 0.01, 7)).unwrap();
        assert_abs_diff_eq!(rep.estimate, p.payoff(2.0), epsilon = 0.0);
        assert_eq!(rep.std_error, 0.0);
        assert_eq!(rep.n_stopped_early, 1000);
        assert_eq!(rep.n_clamped, 0);
        assert_eq!(rep.ci95, (rep.estimate, rep.estimate));
    }

    #[test]
    fn riskless_hold_grows_at_the_short_rate() {
        let p = case_one();
        let rep = simulate_value(2.0, &HoldRiskless, &p, &cfg(1000, 0.005, 7)).unwrap();
        // Euler compounding (1 + r dt)^n carries an O(dt) gap to e^{rT}.
        let reference = (-p.beta * p.horizon).exp() * p.payoff(2.0 * (p.r * p.horizon).exp());
        assert!(
            (rep.estimate / reference - 1.0).abs() < 1e-5,
            "deterministic growth mismatch: {} vs {reference}",
            rep.estimate
        );
        assert_eq!(rep.std_error, 0.0);
        assert_eq!(rep.n_stopped_early, 0);
    }

    #[test]
    fn deflated_wealth_stays_a_martingale() {
        let p = case_one();
        let c = cfg(4000, 0.005, 11);
        let riskless = martingale_check(2.0, &HoldRiskless, &p, &c).unwrap();
        assert_eq!(riskless.verdict, Some(true));
        // For zero allocation the product is deterministic: exp(-theta W)
        // never enters the wealth leg, but does enter zeta; the mean still
        // matches x0 within noise.
        let mix = ConstantMix {
            weights: p.portfolio_dir.clone(),
        };
        let merton = martingale_check(2.0, &mix, &p, &c).unwrap();
        assert_eq!(
            merton.verdict,
            Some(true),
            "constant-mix deflated mean {} +- {} missed x0 = 2",
            merton.estimate,
            merton.std_error
        );
    }

    #[test]
    fn replay_and_worker_count_leave_results_bit_identical() {
        let p = case_one();
        let c = cfg(2000, 0.01, 123);
        let mix = ConstantMix {
            weights: p.portfolio_dir.clone(),
        };
        let a = martingale_check_with_threads(2.0, &mix, &p, &c, 1).unwrap();
        let b = martingale_check_with_threads(2.0, &mix, &p, &c, 3).unwrap();
        let c2 = martingale_check_with_threads(2.0, &mix, &p, &c, 3).unwrap();
        assert_eq!(a.estimate.to_bits(), b.estimate.to_bits());
        assert_eq!(a.std_error.to_bits(), b.std_error.to_bits());
        assert_eq!(b.estimate.to_bits(), c2.estimate.to_bits());
    }

    #[test]
    fn antithetic_pairing_does_not_raise_the_error() {
        let p = case_one();
        let mix = ConstantMix {
            weights: p.portfolio_dir.clone(),
        };
        let plain = martingale_check(2.0, &mix, &p, &cfg(4000, 0.01, 5)).unwrap();
        let mut anti_cfg = cfg(4000, 0.01, 5);
        anti_cfg.antithetic = true;
        let anti = martingale_check(2.0, &mix, &p, &anti_cfg).unwrap();
        assert!(
            anti.std_error <= plain.std_error,
            "antithetic SE {} above plain SE {}",
            anti.std_error,
            plain.std_error
        );
    }

    #[test]
    fn path_streams_are_distinct_and_replayable() {
        let mut r0 = path_rng(42, 0);
        let mut r0b = path_rng(42, 0);
        let mut r1 = path_rng(42, 1);
        let a: f64 = StandardNormal.sample(&mut r0);
        let b: f64 = StandardNormal.sample(&mut r0b);
        let c: f64 = StandardNormal.sample(&mut r1);
        assert_eq!(a.to_bits(), b.to_bits());
        assert_ne!(a.to_bits(), c.to_bits());
    }

    /// Allocation with a non-finite entry: the guard must turn the resulting
    /// non-finite wealth into a reported blow-up, not a silent NaN mean.
    struct SingularAllocation;
    impl Policy for SingularAllocation {
        fn allocation(&self, _x: f64, _t: f64, pi: &mut [f64]) -> Result<()> {
            pi.fill(f64::INFINITY);
            Ok(())
        }
        fn stop(&self, _x: f64, _t: f64) -> bool {
            false
        }
    }

    #[test]
    fn non_finite_wealth_trips_the_blowup_guard() {
        let p = case_one();
        let err = simulate_value(2.0, &SingularAllocation, &p, &cfg(1000, 0.01, 9)).unwrap_err();
        assert!(matches!(err, Error::NumericalBlowup(_)), "got {err:?}");
    }

    #[test]
    fn leverage_above_the_cap_is_clamped_and_counted() {
        let p = case_one();
        // Requested fraction 60x against the 50x cap: every pre-absorption
        // step clamps.
        let greedy = ConstantMix {
            weights: vec![60.0],
        };
        let mut short = case_one();
        short.horizon = 0.2;
        let rep = simulate_value(2.0, &greedy, &short, &cfg(1000, 0.002, 13)).unwrap();
        assert!(rep.n_clamped > 0);
        assert!(rep.estimate.is_finite());
        let _ = p;
    }

    #[test]
    fn bang_bang_walk_climbs_to_the_hull_value() {
        let p = case_one();
        let hull = p.compute_hull().unwrap();
        let x0 = hull.x_knee / 2.0;
        let c = cfg(1500, 2e-5, 31);
        let runs = bang_bang_limit(x0, &[5.0, 15.0, 50.0], 0.1, &p, &hull, &c).unwrap();
        assert_eq!(runs.len(), 3);
        let limit = hull.value(&p, x0);
        for w in runs.windows(2) {
            assert!(
                w[1].report.estimate > w[0].report.estimate,
                "estimates failed to climb: {} then {}",
                w[0].report.estimate,
                w[1].report.estimate
            );
        }
        let last = &runs[2];
        assert!(
            (last.report.estimate - limit).abs() < 0.10 * limit,
            "N=50 estimate {} too far from hull value {limit}",
            last.report.estimate
        );
        assert!(
            (last.p_upper - x0 / hull.x_knee).abs() < 0.08,
            "upper-barrier mass {} vs two-point limit {}",
            last.p_upper,
            x0 / hull.x_knee
        );
        assert!(last.p_upper + last.p_lower <= 1.0 + 1e-12);
    }

    #[test]
    fn recovered_policy_beats_static_benchmarks() {
        let p = case_one();
        let hull = p.compute_hull().unwrap();
        let grid = DualGrid::build(&hull, p.horizon, 100, 100, None, None).unwrap();
        let dual = solve_dual(&p, &hull, grid, &SolverSettings::default()).unwrap();
        let primal = recover_primal(&p, &hull, &dual, 120).unwrap();
        let policy = RecoveredPolicy::new(&p, &primal);

        let x0 = 2.0;
        let c = cfg(2000, 0.01, 99);
        let live = simulate_value(x0, &policy, &p, &c).unwrap();
        let stop = simulate_value(x0, &StopNow, &p, &c).unwrap();
        let hold = simulate_value(x0, &HoldRiskless, &p, &c).unwrap();
        assert!(
            live.estimate > stop.estimate + 3.0 * live.std_error,
            "live {} +- {} vs stop-now {}",
            live.estimate,
            live.std_error,
            stop.estimate
        );
        assert!(
            live.estimate > hold.estimate + 3.0 * live.std_error,
            "live {} +- {} vs riskless hold {}",
            live.estimate,
            live.std_error,
            hold.estimate
        );
        // The solver's own value dominates any simulated policy up to noise
        // and grid/Euler bias.
        let j0 = 0usize;
        let ix = primal
            .x
            .iter()
            .position(|&x| x >= x0)
            .expect("x0 on ladder");
        let v_hat = primal.v[j0][ix - 1]
            + (primal.v[j0][ix] - primal.v[j0][ix - 1]) * (x0 - primal.x[ix - 1])
                / (primal.x[ix] - primal.x[ix - 1]);
        assert!(
            live.estimate <= v_hat + 3.0 * live.std_error + 0.05 * v_hat,
            "MC value {} exceeds solver value {v_hat} beyond tolerance",
            live.estimate
        );
    }
}
