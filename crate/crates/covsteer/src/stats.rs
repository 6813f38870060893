//! Probability utilities: quantile functions, trajectory sampling, and
//! empirical violation rates.
//!
//! Quantiles start from the statrs inverse CDFs and are polished with a
//! bracketed Newton iteration on the exact CDF so the round-trip error meets
//! the tolerances the steering constraints are calibrated against (1e-12 for
//! the Gaussian, 1e-10 for chi-squared).
//!
//! Sampling uses ChaCha12, a counter-based generator with independent
//! substreams: stream `agent_id` of seed `s` yields the same draws no matter
//! how agents are scheduled across threads.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ChiSquared, Continuous, ContinuousCDF, Normal};

use crate::dynamics::{theta, theta_cap, AgentSpec, LiftedDynamics, Policy};
use crate::error::{Error, Result};

/// Total collision risk and its split between the two agents of a pair.
///
/// The steering constraints need `eps_i + eps_j <= eps`; the symmetric split
/// `eps/2` is the default. The confidence-ball scaling for agent `i` in `q`
/// position dimensions is `beta_i = chi2_inv_cdf(1 - eps_i, q)`.
#[derive(Debug, Clone, Copy)]
pub struct RiskAllocation {
    pub eps: f64,
    pub eps_i: f64,
    pub eps_j: f64,
}

impl RiskAllocation {
    pub fn new(eps: f64, eps_i: f64, eps_j: f64) -> Result<Self> {
        if !(eps > 0.0 && eps < 0.5) {
            return Err(Error::Invalid(format!("risk level must lie in (0, 0.5), got {eps}")));
        }
        if !(eps_i > 0.0 && eps_j > 0.0) {
            return Err(Error::Invalid("per-agent risks must be positive".into()));
        }
        if eps_i + eps_j > eps * (1.0 + 1e-12) {
            return Err(Error::Invalid(format!(
                "per-agent risks must satisfy eps_i + eps_j <= eps: {eps_i} + {eps_j} > {eps}"
            )));
        }
        Ok(RiskAllocation { eps, eps_i, eps_j })
    }

    /// Symmetric split `eps_i = eps_j = eps / 2`.
    pub fn symmetric(eps: f64) -> Result<Self> {
        Self::new(eps, eps / 2.0, eps / 2.0)
    }

    pub fn beta_i(&self, q: usize) -> Result<f64> {
        chi2_inv_cdf(1.0 - self.eps_i, q as f64)
    }

    pub fn beta_j(&self, q: usize) -> Result<f64> {
        chi2_inv_cdf(1.0 - self.eps_j, q as f64)
    }
}

/// Bracketed Newton refinement of a quantile: drives `cdf(x) - p` to within
/// `tol` starting from `x0`, falling back to bisection whenever the Newton
/// step leaves the bracket or the density underflows.
fn refine_quantile(
    cdf: &dyn Fn(f64) -> f64,
    pdf: &dyn Fn(f64) -> f64,
    p: f64,
    x0: f64,
    mut lo: f64,
    mut hi: f64,
    tol: f64,
) -> f64 {
    // Expand the bracket around the start until it straddles the target.
    let mut step = 1.0f64.max(x0.abs() * 0.5);
    while cdf(lo) > p && lo > -1e12 {
        lo -= step;
        step *= 2.0;
    }
    step = 1.0f64.max(x0.abs() * 0.5);
    while cdf(hi) < p && hi < 1e12 {
        hi += step;
        step *= 2.0;
    }
    let mut x = x0.clamp(lo, hi);
    for _ in 0..200 {
        let err = cdf(x) - p;
        if err.abs() <= tol {
            return x;
        }
        if err > 0.0 {
            hi = x;
        } else {
            lo = x;
        }
        let d = pdf(x);
        let newton = if d > 1e-300 { x - err / d } else { f64::NAN };
        x = if newton.is_finite() && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if hi - lo <= f64::EPSILON * (1.0 + x.abs()) {
            return x;
        }
    }
    x
}

/// Standard Gaussian quantile: returns `z` with `|Phi(z) - p| <= 1e-12`.
pub fn gaussian_inv_cdf(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Invalid(format!("probability must lie in (0, 1), got {p}")));
    }
    let dist = Normal::new(0.0, 1.0).expect("unit normal");
    let x0 = dist.inverse_cdf(p);
    Ok(refine_quantile(
        &|x| dist.cdf(x),
        &|x| dist.pdf(x),
        p,
        x0,
        x0 - 1.0,
        x0 + 1.0,
        1e-13,
    ))
}

/// Chi-squared quantile: returns `x` with `|F_q(x) - p| <= 1e-10`.
pub fn chi2_inv_cdf(p: f64, dof: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Invalid(format!("probability must lie in (0, 1), got {p}")));
    }
    if dof.is_nan() || dof <= 0.0 {
        return Err(Error::Invalid(format!("degrees of freedom must be positive, got {dof}")));
    }
    let dist = ChiSquared::new(dof)
        .map_err(|e| Error::Invalid(format!("chi-squared({dof}): {e}")))?;
    let x0 = dist.inverse_cdf(p).max(f64::MIN_POSITIVE);
    Ok(refine_quantile(
        &|x| dist.cdf(x),
        &|x| dist.pdf(x),
        p,
        x0,
        0.0,
        2.0 * x0 + 1.0,
        1e-11,
    ))
}

/// The per-agent sampling stream: substream `agent_id` of the base seed.
pub fn agent_stream(seed: u64, agent_id: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(agent_id);
    rng
}

/// Draws `count` stacked state trajectories `x = theta(v) + Theta(K) xi` with
/// `xi` standard normal, from substream `agent_id` of `seed`.
pub fn sample_trajectories(
    spec: &AgentSpec,
    lifted: &LiftedDynamics,
    policy: &Policy,
    count: usize,
    seed: u64,
    agent_id: u64,
) -> Result<Vec<DVector<f64>>> {
    if count == 0 {
        return Err(Error::Invalid("sample count must be at least 1".into()));
    }
    let mu = theta(spec, lifted, &policy.v)?;
    let factor = theta_cap(spec, lifted, policy)?;
    let dim = mu.len();
    let mut rng = agent_stream(seed, agent_id);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let xi = DVector::from_fn(dim, |_, _| rng.sample(StandardNormal));
        out.push(&mu + &factor * xi);
    }
    Ok(out)
}

/// Extracts the `q x (T+1)` position trajectory from each stacked state sample.
pub fn extract_positions(spec: &AgentSpec, samples: &[DVector<f64>]) -> Vec<DMatrix<f64>> {
    let n = spec.n();
    let t = spec.horizon();
    let q = spec.q_dim();
    samples
        .iter()
        .map(|x| {
            let mut pos = DMatrix::zeros(q, t + 1);
            for k in 0..=t {
                let p = &spec.p_sel * x.rows(k * n, n);
                pos.column_mut(k).copy_from(&p);
            }
            pos
        })
        .collect()
}

/// Violation counts for one obstacle constraint across the horizon.
#[derive(Debug, Clone)]
pub struct ObstacleViolation {
    pub agent: usize,
    pub obstacle: usize,
    /// Fraction of samples with `||p_k - p_o|| < s_o`, per time step.
    pub rate_per_step: Vec<f64>,
    pub max_rate: f64,
}

/// Violation counts for one inter-agent constraint across the horizon.
#[derive(Debug, Clone)]
pub struct PairViolation {
    pub i: usize,
    pub j: usize,
    /// Fraction of joint samples with `||p_k^i - p_k^j|| < s_ij`, per time step.
    pub rate_per_step: Vec<f64>,
    pub max_rate: f64,
}

#[derive(Debug, Clone)]
pub struct ViolationReport {
    pub obstacles: Vec<ObstacleViolation>,
    pub pairs: Vec<PairViolation>,
    /// Largest per-step rate over every constraint.
    pub max_rate: f64,
}

/// Empirical violation rates from joint position samples.
///
/// `positions[a][r]` is realization `r` of agent `a` as a `q x (T+1)` matrix;
/// realizations with the same index are treated as one joint sample (agent
/// noises are independent, so independent per-agent draws compose into joint
/// draws). A sample violates an obstacle constraint at step `k` when its
/// distance to the obstacle point is strictly below `s_obstacle`, and a pair
/// constraint when the inter-agent distance is strictly below `s_pair`.
pub fn violation_rate(
    positions: &[Vec<DMatrix<f64>>],
    obstacles: &[DVector<f64>],
    pairs: &[(usize, usize)],
    s_obstacle: f64,
    s_pair: f64,
) -> Result<ViolationReport> {
    if positions.is_empty() || positions.iter().any(|s| s.is_empty()) {
        return Err(Error::Invalid("need at least one sample per agent".into()));
    }
    let horizon_cols = positions[0][0].ncols();
    let mut report = ViolationReport { obstacles: Vec::new(), pairs: Vec::new(), max_rate: 0.0 };

    for (a, agent_samples) in positions.iter().enumerate() {
        let count = agent_samples.len() as f64;
        for (o, center) in obstacles.iter().enumerate() {
            let mut per_step = vec![0.0; horizon_cols];
            for sample in agent_samples {
                for (k, rate) in per_step.iter_mut().enumerate() {
                    if (sample.column(k) - center).norm() < s_obstacle {
                        *rate += 1.0;
                    }
                }
            }
            for rate in per_step.iter_mut() {
                *rate /= count;
            }
            let max_rate = per_step.iter().cloned().fold(0.0, f64::max);
            report.max_rate = report.max_rate.max(max_rate);
            report.obstacles.push(ObstacleViolation { agent: a, obstacle: o, rate_per_step: per_step, max_rate });
        }
    }

    for &(i, j) in pairs {
        if i >= positions.len() || j >= positions.len() {
            return Err(Error::Invalid(format!("pair ({i}, {j}) out of range")));
        }
        let count = positions[i].len().min(positions[j].len());
        if count == 0 {
            return Err(Error::Invalid("need at least one joint sample per pair".into()));
        }
        let mut per_step = vec![0.0; horizon_cols];
        for (pi, pj) in positions[i].iter().zip(positions[j].iter()) {
            for (k, rate) in per_step.iter_mut().enumerate() {
                if (pi.column(k) - pj.column(k)).norm() < s_pair {
                    *rate += 1.0;
                }
            }
        }
        for rate in per_step.iter_mut() {
            *rate /= count as f64;
        }
        let max_rate = per_step.iter().cloned().fold(0.0, f64::max);
        report.max_rate = report.max_rate.max(max_rate);
        report.pairs.push(PairViolation { i, j, rate_per_step: per_step, max_rate });
    }
    Ok(report)
}
