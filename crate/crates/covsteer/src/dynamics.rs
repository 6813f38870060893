//! Stochastic linear dynamics in lifted form.
//!
//! Each agent follows `x_{k+1} = A_k x_k + B_k u_k + w_k` with `x_0 ~ N(mu_s, Sigma_s)`
//! and `w_k ~ N(0, W_k)`. Stacking the trajectory `x = [x_0; ...; x_T]` gives the
//! affine form `x = G0 x_0 + Gu u + Gw w`, and the truncated disturbance-feedback
//! policy `u_k = v_k + sum_kappa K_{k,kappa} what_kappa` turns the mean and
//! covariance of the whole trajectory into affine functions of `(v, K)`:
//!
//! ```text
//! theta(v)     = G0 mu_s + Gu v
//! Theta(K)     = (Ghat + Gu K) * bdiag(Sigma_s, W_0, ..., W_{T-1})^{1/2}
//! Sigma        = Theta Theta'
//! ```
//!
//! where `Ghat = [G0, Gw]` and `what = [x_0 - mu_s; w_0; ...; w_{T-1}]` stacks the
//! initial-state deviation ahead of the process noise. The gain `K` is banded:
//! block `(k, kappa)` may be nonzero only for `max(0, k - gamma) <= kappa <= k`,
//! so each input sees at most the `gamma` most recent disturbances plus, at the
//! start of the band, the initial-state deviation.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{asymmetry, block_diag, hcat, min_symmetric_eigenvalue, sqrt_psd, symmetrize};

/// One agent's dynamics, boundary distributions, and cost weights.
///
/// Sequences are indexed by time step: `a_seq[k]` maps `x_k` to `x_{k+1}`, so all
/// of `a_seq`, `b_seq`, `w_seq`, `r_seq` have length `T` while `q_seq` has length
/// `T + 1` (one state weight per trajectory knot).
#[derive(Debug, Clone, PartialEq)]
pub struct AgentSpec {
    pub a_seq: Vec<DMatrix<f64>>,
    pub b_seq: Vec<DMatrix<f64>>,
    pub w_seq: Vec<DMatrix<f64>>,
    pub mu_s: DVector<f64>,
    pub sigma_s: DMatrix<f64>,
    pub mu_f: DVector<f64>,
    pub sigma_f: DMatrix<f64>,
    pub q_seq: Vec<DMatrix<f64>>,
    pub r_seq: Vec<DMatrix<f64>>,
    /// Position selector: maps a state to its `q`-dimensional position, `q` in {2, 3}.
    pub p_sel: DMatrix<f64>,
}

impl AgentSpec {
    /// Builds a spec with time-invariant matrices repeated over the horizon.
    #[allow(clippy::too_many_arguments)]
    pub fn time_invariant(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        w: DMatrix<f64>,
        horizon: usize,
        mu_s: DVector<f64>,
        sigma_s: DMatrix<f64>,
        mu_f: DVector<f64>,
        sigma_f: DMatrix<f64>,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        p_sel: DMatrix<f64>,
    ) -> Self {
        AgentSpec {
            a_seq: vec![a; horizon],
            b_seq: vec![b; horizon],
            w_seq: vec![w; horizon],
            mu_s,
            sigma_s,
            mu_f,
            sigma_f,
            q_seq: vec![q; horizon + 1],
            r_seq: vec![r; horizon],
            p_sel,
        }
    }

    /// State dimension.
    pub fn n(&self) -> usize {
        self.mu_s.len()
    }

    /// Control dimension.
    pub fn m(&self) -> usize {
        self.b_seq.first().map_or(0, |b| b.ncols())
    }

    /// Horizon `T` (number of control steps).
    pub fn horizon(&self) -> usize {
        self.a_seq.len()
    }

    /// Position dimension `q`.
    pub fn q_dim(&self) -> usize {
        self.p_sel.nrows()
    }

    /// Covariance of the stacked disturbance block `kappa`:
    /// `Sigma_s` for `kappa = 0`, `W_{kappa-1}` otherwise.
    pub fn noise_block(&self, kappa: usize) -> &DMatrix<f64> {
        if kappa == 0 {
            &self.sigma_s
        } else {
            &self.w_seq[kappa - 1]
        }
    }

    /// `bdiag(Sigma_s, W_0, ..., W_{T-1})`, the covariance of the stacked
    /// disturbance vector.
    pub fn stacked_noise_cov(&self) -> DMatrix<f64> {
        let mut blocks = Vec::with_capacity(self.horizon() + 1);
        blocks.push(self.sigma_s.clone());
        blocks.extend(self.w_seq.iter().cloned());
        block_diag(&blocks)
    }

    /// Symmetric PSD square root of [`stacked_noise_cov`](Self::stacked_noise_cov),
    /// taken block by block.
    pub fn stacked_noise_root(&self) -> Result<DMatrix<f64>> {
        let mut blocks = Vec::with_capacity(self.horizon() + 1);
        blocks.push(sqrt_psd(&self.sigma_s)?);
        for w in &self.w_seq {
            blocks.push(sqrt_psd(w)?);
        }
        Ok(block_diag(&blocks))
    }

    /// Checks dimensions and matrix-structure invariants.
    pub fn validate(&self) -> Result<()> {
        let (n, m, t) = (self.n(), self.m(), self.horizon());
        if t == 0 {
            return Err(Error::Invalid("horizon must be at least 1".into()));
        }
        if self.b_seq.len() != t || self.w_seq.len() != t || self.r_seq.len() != t {
            return Err(Error::Dimension(format!(
                "A/B/W/R sequences must all have length T={t}, got {}/{}/{}/{}",
                self.a_seq.len(),
                self.b_seq.len(),
                self.w_seq.len(),
                self.r_seq.len()
            )));
        }
        if self.q_seq.len() != t + 1 {
            return Err(Error::Dimension(format!(
                "Q sequence must have length T+1={}, got {}",
                t + 1,
                self.q_seq.len()
            )));
        }
        for (k, a) in self.a_seq.iter().enumerate() {
            if a.nrows() != n || a.ncols() != n {
                return Err(Error::Dimension(format!("A_{k} is not {n}x{n}")));
            }
        }
        for (k, b) in self.b_seq.iter().enumerate() {
            if b.nrows() != n || b.ncols() != m {
                return Err(Error::Dimension(format!("B_{k} is not {n}x{m}")));
            }
        }
        for (v, name) in [(&self.mu_s, "mu_s"), (&self.mu_f, "mu_f")] {
            if v.len() != n {
                return Err(Error::Dimension(format!("{name} must have length {n}")));
            }
        }
        check_pd(&self.sigma_s, n, "Sigma_s")?;
        check_pd(&self.sigma_f, n, "Sigma_f")?;
        for (k, w) in self.w_seq.iter().enumerate() {
            check_psd(w, n, &format!("W_{k}"))?;
        }
        for (k, q) in self.q_seq.iter().enumerate() {
            check_psd(q, n, &format!("Q_{k}"))?;
        }
        for (k, r) in self.r_seq.iter().enumerate() {
            check_pd(r, m, &format!("R_{k}"))?;
        }
        let q = self.q_dim();
        if !(q == 2 || q == 3) {
            return Err(Error::Invalid(format!(
                "position selector must have 2 or 3 rows, got {q}"
            )));
        }
        if self.p_sel.ncols() != n {
            return Err(Error::Dimension(format!(
                "position selector must have {n} columns"
            )));
        }
        if self.p_sel.clone().svd(false, false).rank(1e-10) != q {
            return Err(Error::Invalid(
                "position selector does not have full row rank".into(),
            ));
        }
        Ok(())
    }
}

fn check_pd(mat: &DMatrix<f64>, dim: usize, name: &str) -> Result<()> {
    if mat.nrows() != dim || mat.ncols() != dim {
        return Err(Error::Dimension(format!("{name} is not {dim}x{dim}")));
    }
    if asymmetry(mat) > 1e-8 {
        return Err(Error::Invalid(format!("{name} is not symmetric")));
    }
    if min_symmetric_eigenvalue(mat) <= 1e-10 {
        return Err(Error::Invalid(format!("{name} is not positive definite")));
    }
    Ok(())
}

fn check_psd(mat: &DMatrix<f64>, dim: usize, name: &str) -> Result<()> {
    if mat.nrows() != dim || mat.ncols() != dim {
        return Err(Error::Dimension(format!("{name} is not {dim}x{dim}")));
    }
    if asymmetry(mat) > 1e-8 {
        return Err(Error::Invalid(format!("{name} is not symmetric")));
    }
    if min_symmetric_eigenvalue(mat) < -1e-10 {
        return Err(Error::Invalid(format!("{name} is not positive semidefinite")));
    }
    Ok(())
}

/// Causal lift of the step recursion: `x = G0 x_0 + Gu u + Gw w`.
#[derive(Debug, Clone)]
pub struct LiftedDynamics {
    /// `(T+1)n x n`; block row `k` is the transition product `A_{k-1} ... A_0`.
    pub g0: DMatrix<f64>,
    /// `(T+1)n x Tm`; block `(k, j)` is `A_{k-1} ... A_{j+1} B_j` for `j < k`, zero otherwise.
    pub gu: DMatrix<f64>,
    /// `(T+1)n x Tn`; block `(k, j)` is `A_{k-1} ... A_{j+1}` for `j < k`, zero otherwise.
    pub gw: DMatrix<f64>,
    n: usize,
    m: usize,
    t: usize,
}

impl LiftedDynamics {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn horizon(&self) -> usize {
        self.t
    }

    /// `Ghat = [G0, Gw]`, the coefficient of the stacked disturbance vector.
    pub fn ghat(&self) -> DMatrix<f64> {
        hcat(&self.g0, &self.gw)
    }

    /// Row range of time step `k` in the stacked trajectory.
    pub fn step_rows(&self, k: usize) -> std::ops::Range<usize> {
        k * self.n..(k + 1) * self.n
    }

    /// The explicit selector `Gamma_k` with `Gamma_k x = x_k`.
    pub fn gamma(&self, k: usize) -> DMatrix<f64> {
        assert!(k <= self.t, "step index out of range");
        let mut g = DMatrix::zeros(self.n, (self.t + 1) * self.n);
        for i in 0..self.n {
            g[(i, k * self.n + i)] = 1.0;
        }
        g
    }
}

/// Builds the causal lift from the step matrices.
///
/// Only shape consistency of the sequences is required here; the full
/// invariant check lives in [`AgentSpec::validate`] so the lift can also be
/// built for degenerate inputs (for example zero noise) used in analysis.
pub fn build_lifted(spec: &AgentSpec) -> Result<LiftedDynamics> {
    let (n, m, t) = (spec.n(), spec.m(), spec.horizon());
    if t == 0 {
        return Err(Error::Invalid("horizon must be at least 1".into()));
    }
    if spec.b_seq.len() != t || spec.w_seq.len() != t {
        return Err(Error::Dimension(format!(
            "A/B/W sequences must all have length T={t}, got {}/{}/{}",
            spec.a_seq.len(),
            spec.b_seq.len(),
            spec.w_seq.len()
        )));
    }
    for (k, a) in spec.a_seq.iter().enumerate() {
        if a.nrows() != n || a.ncols() != n {
            return Err(Error::Dimension(format!("A_{k} is not {n}x{n}")));
        }
    }
    for (k, b) in spec.b_seq.iter().enumerate() {
        if b.nrows() != n || b.ncols() != m {
            return Err(Error::Dimension(format!("B_{k} is not {n}x{m}")));
        }
    }
    let mut g0 = DMatrix::zeros((t + 1) * n, n);
    let mut gu = DMatrix::zeros((t + 1) * n, t * m);
    let mut gw = DMatrix::zeros((t + 1) * n, t * n);
    g0.view_mut((0, 0), (n, n)).copy_from(&DMatrix::identity(n, n));
    for k in 0..t {
        let a = &spec.a_seq[k];
        let g0_prev = g0.view((k * n, 0), (n, n)).into_owned();
        g0.view_mut(((k + 1) * n, 0), (n, n)).copy_from(&(a * g0_prev));
        if k > 0 {
            let gu_prev = gu.view((k * n, 0), (n, k * m)).into_owned();
            gu.view_mut(((k + 1) * n, 0), (n, k * m)).copy_from(&(a * gu_prev));
            let gw_prev = gw.view((k * n, 0), (n, k * n)).into_owned();
            gw.view_mut(((k + 1) * n, 0), (n, k * n)).copy_from(&(a * gw_prev));
        }
        gu.view_mut(((k + 1) * n, k * m), (n, m)).copy_from(&spec.b_seq[k]);
        gw.view_mut(((k + 1) * n, k * n), (n, n))
            .copy_from(&DMatrix::identity(n, n));
    }
    Ok(LiftedDynamics { g0, gu, gw, n, m, t })
}

/// Inclusive range of stacked-disturbance blocks the step-`k` input may read.
///
/// Block 0 is the initial-state deviation and block `j >= 1` is `w_{j-1}`, so the
/// band keeps the policy strictly causal while truncating history to `gamma` steps.
pub fn gain_band(k: usize, gamma: usize) -> std::ops::RangeInclusive<usize> {
    k.saturating_sub(gamma)..=k
}

/// Canonical ordering of in-band gain blocks: `k` ascending, `kappa` ascending.
pub fn band_blocks(horizon: usize, gamma: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for k in 0..horizon {
        for kappa in gain_band(k, gamma) {
            out.push((k, kappa));
        }
    }
    out
}

/// Ordinal of the in-band block `(k, kappa)` in [`band_blocks`] order, or
/// `None` outside the band. Blocks are `m x n` and stored column-major, so the
/// flat coordinate of entry `(r, c)` is `position * m * n + c * m + r`.
pub fn band_block_position(horizon: usize, gamma: usize, k: usize, kappa: usize) -> Option<usize> {
    if k >= horizon || !gain_band(k, gamma).contains(&kappa) {
        return None;
    }
    // Offset of step k's band start: sum over j < k of band size min(j, gamma) + 1.
    let full = k.saturating_sub(gamma);
    let ramp: usize = (0..k.min(gamma)).map(|j| j + 1).sum();
    Some(full * (gamma + 1) + ramp + (kappa - *gain_band(k, gamma).start()))
}

/// Feed-forward sequence plus banded disturbance-feedback gain.
///
/// Only the in-band gain blocks are stored; everything outside the band is
/// structurally zero. Flattened coordinates (used by the solvers) list the
/// blocks in [`band_blocks`] order with column-major entries inside each block.
#[derive(Debug, Clone)]
pub struct Policy {
    pub v: DVector<f64>,
    blocks: Vec<DMatrix<f64>>,
    pub gamma: usize,
    n: usize,
    m: usize,
    t: usize,
}

impl Policy {
    /// All-zero policy.
    pub fn zero(n: usize, m: usize, horizon: usize, gamma: usize) -> Result<Self> {
        if gamma < 1 || gamma > horizon {
            return Err(Error::Invalid(format!(
                "gamma must lie in [1, T]; got gamma={gamma}, T={horizon}"
            )));
        }
        let blocks = band_blocks(horizon, gamma)
            .iter()
            .map(|_| DMatrix::zeros(m, n))
            .collect();
        Ok(Policy { v: DVector::zeros(horizon * m), blocks, gamma, n, m, t: horizon })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn horizon(&self) -> usize {
        self.t
    }

    fn block_index(&self, k: usize, kappa: usize) -> Option<usize> {
        band_block_position(self.t, self.gamma, k, kappa)
    }

    /// In-band gain block `(k, kappa)`, or `None` outside the band.
    pub fn gain_block(&self, k: usize, kappa: usize) -> Option<&DMatrix<f64>> {
        self.block_index(k, kappa).map(|i| &self.blocks[i])
    }

    /// Mutable access to an in-band gain block.
    pub fn gain_block_mut(&mut self, k: usize, kappa: usize) -> Option<&mut DMatrix<f64>> {
        self.block_index(k, kappa).map(move |i| &mut self.blocks[i])
    }

    /// Materializes the full `Tm x (T+1)n` gain matrix.
    pub fn dense_gain(&self) -> DMatrix<f64> {
        let mut k_mat = DMatrix::zeros(self.t * self.m, (self.t + 1) * self.n);
        for (k, kappa) in band_blocks(self.t, self.gamma) {
            let block = self.gain_block(k, kappa).unwrap();
            k_mat
                .view_mut((k * self.m, kappa * self.n), (self.m, self.n))
                .copy_from(block);
        }
        k_mat
    }

    /// Dense `m x (T+1)n` gain row for step `k` (zeros outside the band).
    pub fn dense_gain_row(&self, k: usize) -> DMatrix<f64> {
        let mut row = DMatrix::zeros(self.m, (self.t + 1) * self.n);
        for kappa in gain_band(k, self.gamma) {
            row.view_mut((0, kappa * self.n), (self.m, self.n))
                .copy_from(self.gain_block(k, kappa).unwrap());
        }
        row
    }

    /// Number of flattened gain coordinates.
    pub fn gain_coord_count(horizon: usize, gamma: usize, n: usize, m: usize) -> usize {
        band_blocks(horizon, gamma).len() * n * m
    }

    /// Flattens the in-band gain blocks into the canonical coordinate vector.
    pub fn gain_coords(&self) -> DVector<f64> {
        let mut out = Vec::with_capacity(self.blocks.len() * self.n * self.m);
        for b in &self.blocks {
            out.extend_from_slice(b.as_slice());
        }
        DVector::from_vec(out)
    }

    /// Overwrites the gain blocks from a canonical coordinate vector.
    pub fn set_gain_coords(&mut self, coords: &DVector<f64>) -> Result<()> {
        let per_block = self.n * self.m;
        if coords.len() != self.blocks.len() * per_block {
            return Err(Error::Dimension(format!(
                "expected {} gain coordinates, got {}",
                self.blocks.len() * per_block,
                coords.len()
            )));
        }
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.copy_from_slice(&coords.as_slice()[i * per_block..(i + 1) * per_block]);
        }
        Ok(())
    }
}

fn check_policy_dims(spec: &AgentSpec, policy: &Policy) -> Result<()> {
    if policy.n != spec.n() || policy.m != spec.m() || policy.t != spec.horizon() {
        return Err(Error::Dimension(format!(
            "policy shaped for (n={}, m={}, T={}) but spec has (n={}, m={}, T={})",
            policy.n,
            policy.m,
            policy.t,
            spec.n(),
            spec.m(),
            spec.horizon()
        )));
    }
    Ok(())
}

/// Mean of the stacked trajectory: `theta(v) = G0 mu_s + Gu v`.
///
/// The mean does not depend on the feedback gain because every disturbance
/// block has zero mean.
pub fn theta(spec: &AgentSpec, lifted: &LiftedDynamics, v: &DVector<f64>) -> Result<DVector<f64>> {
    if v.len() != lifted.t * lifted.m {
        return Err(Error::Dimension(format!(
            "feed-forward must have length {}, got {}",
            lifted.t * lifted.m,
            v.len()
        )));
    }
    Ok(&lifted.g0 * &spec.mu_s + &lifted.gu * v)
}

/// Covariance factor of the stacked trajectory:
/// `Theta(K) = (Ghat + Gu K) bdiag(Sigma_s, W)^{1/2}`, so `Sigma = Theta Theta'`.
pub fn theta_cap(
    spec: &AgentSpec,
    lifted: &LiftedDynamics,
    policy: &Policy,
) -> Result<DMatrix<f64>> {
    check_policy_dims(spec, policy)?;
    let s_root = spec.stacked_noise_root()?;
    Ok((lifted.ghat() + &lifted.gu * policy.dense_gain()) * s_root)
}

/// Expected quadratic cost under the policy:
/// `J = theta'Q theta + v'R v + tr(Q Theta Theta') + tr(R K S K')`
/// with `S = bdiag(Sigma_s, W)` and block-diagonal stage weights `Q`, `R`.
pub fn cost(spec: &AgentSpec, lifted: &LiftedDynamics, policy: &Policy) -> Result<f64> {
    let (j_mean, j_cov) = mean_cov_split(spec, lifted, policy)?;
    Ok(j_mean + j_cov)
}

/// Splits the cost into its mean-dependent and covariance-dependent parts:
/// `J_mean(v) = theta'Q theta + v'R v`,
/// `J_cov(K) = tr(Q Theta Theta') + tr(R K S K')`.
pub fn mean_cov_split(
    spec: &AgentSpec,
    lifted: &LiftedDynamics,
    policy: &Policy,
) -> Result<(f64, f64)> {
    check_policy_dims(spec, policy)?;
    let (n, m, t) = (spec.n(), spec.m(), spec.horizon());
    let mu = theta(spec, lifted, &policy.v)?;
    let mut j_mean = 0.0;
    for (k, q) in spec.q_seq.iter().enumerate() {
        let mu_k = mu.rows(k * n, n);
        j_mean += (q * mu_k).dot(&mu_k.into_owned());
    }
    for (k, r) in spec.r_seq.iter().enumerate() {
        let v_k = policy.v.rows(k * m, m);
        j_mean += (r * v_k).dot(&v_k.into_owned());
    }

    let big_theta = theta_cap(spec, lifted, policy)?;
    let mut j_cov = 0.0;
    for (k, q) in spec.q_seq.iter().enumerate() {
        // tr(Q_k Theta_k Theta_k') where Theta_k is block row k.
        let theta_k = big_theta.rows(k * n, n);
        j_cov += (q * theta_k).dot(&theta_k.into_owned());
    }
    for k in 0..t {
        // (K S K')_{kk} accumulated over the band.
        let mut block_cov = DMatrix::zeros(m, m);
        for kappa in gain_band(k, policy.gamma) {
            let g = policy.gain_block(k, kappa).unwrap();
            block_cov += g * spec.noise_block(kappa) * g.transpose();
        }
        j_cov += (&spec.r_seq[k] * block_cov).trace();
    }
    Ok((j_mean, j_cov))
}

/// Zero-order-hold discretization of `(A_c, B_c)` with step `dt` via the
/// exponential of the augmented matrix `[A_c B_c; 0 0] dt`.
pub fn discretize_dynamics(
    a_cont: &DMatrix<f64>,
    b_cont: &DMatrix<f64>,
    dt: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = a_cont.nrows();
    let m = b_cont.ncols();
    if a_cont.ncols() != n || b_cont.nrows() != n {
        return Err(Error::Dimension("A must be square and B conformable".into()));
    }
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::Invalid("time step must be positive".into()));
    }
    let mut aug = DMatrix::zeros(n + m, n + m);
    aug.view_mut((0, 0), (n, n)).copy_from(a_cont);
    aug.view_mut((0, n), (n, m)).copy_from(b_cont);
    let e = (aug * dt).exp();
    Ok((
        e.view((0, 0), (n, n)).into_owned(),
        e.view((0, n), (n, m)).into_owned(),
    ))
}

/// Discretizes a continuous-time diffusion intensity `W_c` into the one-step
/// noise covariance `integral_0^dt e^{A s} W_c e^{A' s} ds` using the
/// block-exponential identity `expm([-A W_c; 0 A'] dt) = [* F12; 0 F22]`,
/// `W_d = F22' F12`.
pub fn discretize_noise(a_cont: &DMatrix<f64>, w_cont: &DMatrix<f64>, dt: f64) -> Result<DMatrix<f64>> {
    let n = a_cont.nrows();
    if a_cont.ncols() != n || w_cont.nrows() != n || w_cont.ncols() != n {
        return Err(Error::Dimension("A and W_c must be square of equal size".into()));
    }
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::Invalid("time step must be positive".into()));
    }
    let mut aug = DMatrix::zeros(2 * n, 2 * n);
    aug.view_mut((0, 0), (n, n)).copy_from(&(-a_cont));
    aug.view_mut((0, n), (n, n)).copy_from(w_cont);
    aug.view_mut((n, n), (n, n)).copy_from(&a_cont.transpose());
    let e = (aug * dt).exp();
    let f12 = e.view((0, n), (n, n)).into_owned();
    let f22 = e.view((n, n), (n, n)).into_owned();
    Ok(symmetrize(&(f22.transpose() * f12)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;
    use rand_distr::StandardNormal;

    fn randn(rng: &mut ChaCha12Rng) -> f64 {
        rng.sample(StandardNormal)
    }

    fn random_psd(rng: &mut ChaCha12Rng, n: usize, jitter: f64) -> DMatrix<f64> {
        let a = DMatrix::from_fn(n, n, |_, _| randn(rng));
        &a * a.transpose() + DMatrix::identity(n, n) * jitter
    }

    fn random_spec(rng: &mut ChaCha12Rng, n: usize, m: usize, t: usize) -> AgentSpec {
        let mut p_sel = DMatrix::zeros(2.min(n), n);
        for i in 0..p_sel.nrows() {
            p_sel[(i, i)] = 1.0;
        }
        AgentSpec {
            a_seq: (0..t)
                .map(|_| DMatrix::from_fn(n, n, |_, _| 0.6 * randn(rng)))
                .collect(),
            b_seq: (0..t)
                .map(|_| DMatrix::from_fn(n, m, |_, _| randn(rng)))
                .collect(),
            w_seq: (0..t).map(|_| random_psd(rng, n, 0.1)).collect(),
            mu_s: DVector::from_fn(n, |_, _| randn(rng)),
            sigma_s: random_psd(rng, n, 0.5),
            mu_f: DVector::from_fn(n, |_, _| randn(rng)),
            sigma_f: random_psd(rng, n, 0.5),
            q_seq: (0..=t).map(|_| random_psd(rng, n, 0.05)).collect(),
            r_seq: (0..t).map(|_| random_psd(rng, m, 0.5)).collect(),
            p_sel,
        }
    }

    fn random_policy(rng: &mut ChaCha12Rng, spec: &AgentSpec, gamma: usize) -> Policy {
        let mut p = Policy::zero(spec.n(), spec.m(), spec.horizon(), gamma).unwrap();
        p.v = DVector::from_fn(spec.horizon() * spec.m(), |_, _| randn(rng));
        for (k, kappa) in band_blocks(spec.horizon(), gamma) {
            *p.gain_block_mut(k, kappa).unwrap() =
                DMatrix::from_fn(spec.m(), spec.n(), |_, _| 0.4 * randn(rng));
        }
        p
    }

    /// Oracle: rolls the step recursion forward for a concrete (x0, u, w).
    fn rollout(spec: &AgentSpec, x0: &DVector<f64>, u: &[DVector<f64>], w: &[DVector<f64>]) -> Vec<DVector<f64>> {
        let mut xs = vec![x0.clone()];
        for k in 0..spec.horizon() {
            let x_next = &spec.a_seq[k] * &xs[k] + &spec.b_seq[k] * &u[k] + &w[k];
            xs.push(x_next);
        }
        xs
    }

    /// Oracle: propagates exact per-step moments by tracking the affine
    /// coefficients of x_k in the stacked disturbance vector, independently of
    /// the lifted construction.
    fn moment_oracle(spec: &AgentSpec, policy: &Policy) -> (Vec<DVector<f64>>, Vec<DMatrix<f64>>) {
        let (n, m, t) = (spec.n(), spec.m(), spec.horizon());
        let nhat = (t + 1) * n;
        let s = spec.stacked_noise_cov();
        let mut mean = spec.mu_s.clone();
        let mut coef = DMatrix::zeros(n, nhat);
        coef.view_mut((0, 0), (n, n)).copy_from(&DMatrix::identity(n, n));
        let mut means = vec![mean.clone()];
        let mut covs = vec![&coef * &s * coef.transpose()];
        for k in 0..t {
            let gain_row = policy.dense_gain_row(k);
            let v_k = policy.v.rows(k * m, m).into_owned();
            mean = &spec.a_seq[k] * &mean + &spec.b_seq[k] * &v_k;
            coef = &spec.a_seq[k] * &coef + &spec.b_seq[k] * gain_row;
            // w_k is stacked block k+1.
            for i in 0..n {
                coef[(i, (k + 1) * n + i)] += 1.0;
            }
            means.push(mean.clone());
            covs.push(&coef * &s * coef.transpose());
        }
        (means, covs)
    }

    #[test]
    fn identity_chain_lift() {
        let n = 2;
        let spec = AgentSpec::time_invariant(
            DMatrix::identity(n, n),
            DMatrix::identity(n, n),
            DMatrix::identity(n, n),
            2,
            DVector::zeros(n),
            DMatrix::identity(n, n),
            DVector::zeros(n),
            DMatrix::identity(n, n),
            DMatrix::zeros(n, n),
            DMatrix::identity(n, n),
            DMatrix::identity(2, 2),
        );
        let lifted = build_lifted(&spec).unwrap();
        for k in 0..=2 {
            assert_relative_eq!(
                lifted.g0.view((k * n, 0), (n, n)).into_owned(),
                DMatrix::identity(n, n)
            );
        }
        for k in 0..=2usize {
            for j in 0..2usize {
                let block = lifted.gu.view((k * n, j * n), (n, n)).into_owned();
                let expect = if j < k { DMatrix::identity(n, n) } else { DMatrix::zeros(n, n) };
                assert_relative_eq!(block, expect);
            }
        }
    }

    #[test]
    fn scalar_power_chain() {
        // A = 2, B = 1 on a 1-D state: G0 stacks the powers 1, 2, 4.
        let spec = AgentSpec::time_invariant(
            DMatrix::from_element(1, 1, 2.0),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 0.5),
            2,
            DVector::zeros(1),
            DMatrix::from_element(1, 1, 1.0),
            DVector::zeros(1),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::zeros(1, 1),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
        );
        let lifted = build_lifted(&spec).unwrap();
        assert_relative_eq!(lifted.g0, DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 4.0]));
        assert_relative_eq!(lifted.gu, DMatrix::from_row_slice(3, 2, &[0.0, 0.0, 1.0, 0.0, 2.0, 1.0]));
    }

    #[test]
    fn lifted_matches_rollout() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let (n, m, t) = (3, 2, 5);
        let spec = random_spec(&mut rng, n, m, t);
        let lifted = build_lifted(&spec).unwrap();
        let x0 = DVector::from_fn(n, |_, _| randn(&mut rng));
        let u: Vec<_> = (0..t).map(|_| DVector::from_fn(m, |_, _| randn(&mut rng))).collect();
        let w: Vec<_> = (0..t).map(|_| DVector::from_fn(n, |_, _| randn(&mut rng))).collect();
        let xs = rollout(&spec, &x0, &u, &w);
        let u_stack = crate::linalg::vcat_vec(&u);
        let w_stack = crate::linalg::vcat_vec(&w);
        let x_lift = &lifted.g0 * &x0 + &lifted.gu * &u_stack + &lifted.gw * &w_stack;
        for (k, x_k) in xs.iter().enumerate() {
            assert_abs_diff_eq!(x_lift.rows(k * n, n).into_owned(), *x_k, epsilon = 1e-12);
        }
    }

    #[test]
    fn gamma_selector_consistency() {
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let spec = random_spec(&mut rng, 3, 1, 4);
        let lifted = build_lifted(&spec).unwrap();
        for k in 0..=4 {
            let sel = lifted.gamma(k) * &lifted.g0;
            assert_relative_eq!(sel, lifted.g0.rows(k * 3, 3).into_owned(), epsilon = 1e-14);
        }
    }

    #[test]
    fn theta_zero_input_identity_dynamics() {
        let n = 2;
        let spec = AgentSpec::time_invariant(
            DMatrix::identity(n, n),
            DMatrix::identity(n, n),
            DMatrix::identity(n, n),
            3,
            DVector::from_vec(vec![1.0, 0.0]),
            DMatrix::identity(n, n),
            DVector::zeros(n),
            DMatrix::identity(n, n),
            DMatrix::zeros(n, n),
            DMatrix::identity(n, n),
            DMatrix::identity(2, 2),
        );
        let lifted = build_lifted(&spec).unwrap();
        let mu = theta(&spec, &lifted, &DVector::zeros(3 * n)).unwrap();
        for k in 0..=3 {
            assert_relative_eq!(mu[k * n], 1.0);
            assert_relative_eq!(mu[k * n + 1], 0.0);
        }
    }

    #[test]
    fn theta_direct_formula_one_step() {
        // Two parallel single integrators, T = 1: mu_1 = v_0.
        let n = 2;
        let spec = AgentSpec::time_invariant(
            DMatrix::identity(n, n),
            DMatrix::identity(n, n),
            DMatrix::identity(n, n),
            1,
            DVector::zeros(n),
            DMatrix::identity(n, n),
            DVector::zeros(n),
            DMatrix::identity(n, n),
            DMatrix::zeros(n, n),
            DMatrix::identity(n, n),
            DMatrix::identity(2, 2),
        );
        let lifted = build_lifted(&spec).unwrap();
        let mu = theta(&spec, &lifted, &DVector::from_vec(vec![3.0, 0.0])).unwrap();
        assert_relative_eq!(mu.rows(0, 2).into_owned(), DVector::zeros(2));
        assert_relative_eq!(mu.rows(2, 2).into_owned(), DVector::from_vec(vec![3.0, 0.0]));
    }

    #[test]
    fn theta_matches_sample_mean() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let (n, m, t) = (2, 2, 3);
        let spec = random_spec(&mut rng, n, m, t);
        let lifted = build_lifted(&spec).unwrap();
        let policy = random_policy(&mut rng, &spec, 2);
        let mu = theta(&spec, &lifted, &policy.v).unwrap();

        // Empirical mean over rollouts with the full feedback policy; standard
        // errors come from the sample variance of each coordinate.
        let reps = 100_000;
        let chol_s = spec.sigma_s.clone().cholesky().unwrap().l();
        let chol_w: Vec<_> = spec.w_seq.iter().map(|w| w.clone().cholesky().unwrap().l()).collect();
        let nhat = (t + 1) * n;
        let mut sum = DVector::<f64>::zeros(nhat);
        let mut sumsq = DVector::<f64>::zeros(nhat);
        for _ in 0..reps {
            let xi0 = DVector::from_fn(n, |_, _| randn(&mut rng));
            let x0 = &spec.mu_s + &chol_s * xi0;
            let mut what = DVector::zeros(nhat);
            what.rows_mut(0, n).copy_from(&(&x0 - &spec.mu_s));
            let w: Vec<_> = (0..t)
                .map(|k| {
                    let wk = &chol_w[k] * DVector::from_fn(n, |_, _| randn(&mut rng));
                    what.rows_mut((k + 1) * n, n).copy_from(&wk);
                    wk
                })
                .collect();
            let u: Vec<_> = (0..t)
                .map(|k| policy.v.rows(k * m, m).into_owned() + policy.dense_gain_row(k) * &what)
                .collect();
            let xs = rollout(&spec, &x0, &u, &w);
            for (k, x_k) in xs.iter().enumerate() {
                for i in 0..n {
                    sum[k * n + i] += x_k[i];
                    sumsq[k * n + i] += x_k[i] * x_k[i];
                }
            }
        }
        for i in 0..nhat {
            let mean = sum[i] / reps as f64;
            let var = (sumsq[i] / reps as f64 - mean * mean).max(0.0);
            let se = (var / reps as f64).sqrt();
            assert!(
                (mean - mu[i]).abs() <= 3.0 * se + 1e-12,
                "coordinate {i}: sample mean {mean} vs theta {}",
                mu[i]
            );
        }
    }

    #[test]
    fn theta_cap_random_walk_variance() {
        let n = 2;
        let spec = AgentSpec::time_invariant(
            DMatrix::identity(n, n),
            DMatrix::identity(n, n),
            DMatrix::identity(n, n),
            1,
            DVector::zeros(n),
            DMatrix::identity(n, n),
            DVector::zeros(n),
            DMatrix::identity(n, n),
            DMatrix::zeros(n, n),
            DMatrix::identity(n, n),
            DMatrix::identity(2, 2),
        );
        let lifted = build_lifted(&spec).unwrap();
        let policy = Policy::zero(n, n, 1, 1).unwrap();
        let big_theta = theta_cap(&spec, &lifted, &policy).unwrap();
        let sigma = &big_theta * big_theta.transpose();
        assert_relative_eq!(
            sigma.view((n, n), (n, n)).into_owned(),
            DMatrix::identity(n, n) * 2.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn theta_cap_noise_cancelling_gain() {
        // With zero process noise the in-band initial-state column can cancel
        // the whole terminal covariance: K_{0,0} = -B^{-1} A.
        let n = 2;
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.0, 1.0]);
        let spec = AgentSpec::time_invariant(
            a.clone(),
            DMatrix::identity(n, n),
            DMatrix::zeros(n, n),
            1,
            DVector::zeros(n),
            DMatrix::identity(n, n),
            DVector::zeros(n),
            DMatrix::identity(n, n),
            DMatrix::zeros(n, n),
            DMatrix::identity(n, n),
            DMatrix::identity(2, 2),
        );
        let lifted = build_lifted(&spec).unwrap();
        let mut policy = Policy::zero(n, n, 1, 1).unwrap();
        *policy.gain_block_mut(0, 0).unwrap() = -a;
        let big_theta = theta_cap(&spec, &lifted, &policy).unwrap();
        let sigma = &big_theta * big_theta.transpose();
        assert_abs_diff_eq!(
            sigma.view((n, n), (n, n)).into_owned(),
            DMatrix::zeros(n, n),
            epsilon = 1e-12
        );
    }

    #[test]
    fn moments_match_recursion_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(23);
        for trial in 0..10 {
            let n = 1 + (trial % 4);
            let m = 1 + (trial % 2);
            let t = 2 + (trial % 5);
            let gamma = 1 + (trial % t).min(2);
            let spec = random_spec(&mut rng, n, m, t);
            let lifted = build_lifted(&spec).unwrap();
            let policy = random_policy(&mut rng, &spec, gamma);
            let mu = theta(&spec, &lifted, &policy.v).unwrap();
            let big_theta = theta_cap(&spec, &lifted, &policy).unwrap();
            let sigma = &big_theta * big_theta.transpose();
            let (means, covs) = moment_oracle(&spec, &policy);
            for k in 0..=t {
                assert_abs_diff_eq!(mu.rows(k * n, n).into_owned(), means[k], epsilon = 1e-10);
                assert_abs_diff_eq!(
                    sigma.view((k * n, k * n), (n, n)).into_owned(),
                    covs[k],
                    epsilon = 1e-10
                );
            }
        }
    }

    #[test]
    fn cost_zero_policy_zero_weights() {
        let n = 2;
        let spec = AgentSpec::time_invariant(
            DMatrix::identity(n, n),
            DMatrix::identity(n, n),
            DMatrix::identity(n, n),
            2,
            DVector::zeros(n),
            DMatrix::identity(n, n),
            DVector::zeros(n),
            DMatrix::identity(n, n),
            DMatrix::zeros(n, n),
            DMatrix::identity(n, n),
            DMatrix::identity(2, 2),
        );
        let lifted = build_lifted(&spec).unwrap();
        let policy = Policy::zero(n, n, 2, 1).unwrap();
        assert_eq!(cost(&spec, &lifted, &policy).unwrap(), 0.0);
    }

    #[test]
    fn cost_random_walk_trace() {
        // v = 0, K = 0, Q = I, Sigma_s = W = I, A = I, T = 1:
        // J = tr(Sigma_0) + tr(Sigma_1) = n + 2n = 3n.
        let n = 2;
        let spec = AgentSpec::time_invariant(
            DMatrix::identity(n, n),
            DMatrix::identity(n, n),
            DMatrix::identity(n, n),
            1,
            DVector::zeros(n),
            DMatrix::identity(n, n),
            DVector::zeros(n),
            DMatrix::identity(n, n),
            DMatrix::identity(n, n),
            DMatrix::identity(n, n),
            DMatrix::identity(2, 2),
        );
        let lifted = build_lifted(&spec).unwrap();
        let policy = Policy::zero(n, n, 1, 1).unwrap();
        assert_relative_eq!(cost(&spec, &lifted, &policy).unwrap(), 3.0 * n as f64, epsilon = 1e-12);
    }

    #[test]
    fn cost_matches_monte_carlo() {
        let mut rng = ChaCha12Rng::seed_from_u64(31);
        let (n, m, t) = (2, 1, 3);
        let spec = random_spec(&mut rng, n, m, t);
        let lifted = build_lifted(&spec).unwrap();
        let policy = random_policy(&mut rng, &spec, 2);
        let j = cost(&spec, &lifted, &policy).unwrap();

        let reps = 100_000;
        let chol_s = spec.sigma_s.clone().cholesky().unwrap().l();
        let chol_w: Vec<_> = spec.w_seq.iter().map(|w| w.clone().cholesky().unwrap().l()).collect();
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..reps {
            let x0 = &spec.mu_s + &chol_s * DVector::from_fn(n, |_, _| randn(&mut rng));
            let mut what = DVector::zeros((t + 1) * n);
            what.rows_mut(0, n).copy_from(&(&x0 - &spec.mu_s));
            let w: Vec<_> = (0..t)
                .map(|k| {
                    let wk = &chol_w[k] * DVector::from_fn(n, |_, _| randn(&mut rng));
                    what.rows_mut((k + 1) * n, n).copy_from(&wk);
                    wk
                })
                .collect();
            let u: Vec<_> = (0..t)
                .map(|k| policy.v.rows(k * m, m).into_owned() + policy.dense_gain_row(k) * &what)
                .collect();
            let xs = rollout(&spec, &x0, &u, &w);
            let mut sample = 0.0;
            for (k, x_k) in xs.iter().enumerate() {
                sample += (&spec.q_seq[k] * x_k).dot(x_k);
            }
            for (k, u_k) in u.iter().enumerate() {
                sample += (&spec.r_seq[k] * u_k).dot(u_k);
            }
            sum += sample;
            sumsq += sample * sample;
        }
        let mean = sum / reps as f64;
        let var = (sumsq / reps as f64 - mean * mean).max(0.0);
        let se = (var / reps as f64).sqrt();
        assert!(
            (mean - j).abs() <= 3.0 * se,
            "analytic {j} vs Monte-Carlo {mean} (se {se})"
        );
    }

    #[test]
    fn split_zero_feedforward() {
        let mut rng = ChaCha12Rng::seed_from_u64(37);
        let spec = random_spec(&mut rng, 3, 2, 3);
        let lifted = build_lifted(&spec).unwrap();
        let mut policy = random_policy(&mut rng, &spec, 2);
        policy.v.fill(0.0);
        let (j_mean, _) = mean_cov_split(&spec, &lifted, &policy).unwrap();
        let big_q = block_diag(&spec.q_seq);
        let mu0 = &lifted.g0 * &spec.mu_s;
        assert_relative_eq!(j_mean, (&big_q * &mu0).dot(&mu0), epsilon = 1e-10);
    }

    #[test]
    fn split_zero_gain() {
        let mut rng = ChaCha12Rng::seed_from_u64(41);
        let spec = random_spec(&mut rng, 2, 2, 3);
        let lifted = build_lifted(&spec).unwrap();
        let mut policy = random_policy(&mut rng, &spec, 2);
        for (k, kappa) in band_blocks(3, 2) {
            policy.gain_block_mut(k, kappa).unwrap().fill(0.0);
        }
        let (_, j_cov) = mean_cov_split(&spec, &lifted, &policy).unwrap();
        let big_q = block_diag(&spec.q_seq);
        let ghat = lifted.ghat();
        let expect = (&big_q * &ghat * spec.stacked_noise_cov() * ghat.transpose()).trace();
        assert_relative_eq!(j_cov, expect, epsilon = 1e-10);
    }

    #[test]
    fn split_sums_to_cost() {
        let mut rng = ChaCha12Rng::seed_from_u64(43);
        for _ in 0..5 {
            let spec = random_spec(&mut rng, 3, 2, 4);
            let lifted = build_lifted(&spec).unwrap();
            let policy = random_policy(&mut rng, &spec, 2);
            let j = cost(&spec, &lifted, &policy).unwrap();
            let (a, b) = mean_cov_split(&spec, &lifted, &policy).unwrap();
            assert_abs_diff_eq!(a + b, j, epsilon = 1e-10);
        }
    }

    #[test]
    fn causality_of_moments() {
        // Changing the step-k input (feed-forward or gain) must leave every
        // moment at steps <= k untouched.
        let mut rng = ChaCha12Rng::seed_from_u64(47);
        let (n, m, t) = (2, 2, 5);
        let spec = random_spec(&mut rng, n, m, t);
        let lifted = build_lifted(&spec).unwrap();
        let base = random_policy(&mut rng, &spec, 2);
        let mu0 = theta(&spec, &lifted, &base.v).unwrap();
        let th0 = theta_cap(&spec, &lifted, &base).unwrap();
        let sig0 = &th0 * th0.transpose();
        for k in 0..t {
            let mut pert = base.clone();
            pert.v[k * m] += 1.0;
            for kappa in gain_band(k, pert.gamma) {
                *pert.gain_block_mut(k, kappa).unwrap() += DMatrix::from_element(m, n, 0.7);
            }
            let mu1 = theta(&spec, &lifted, &pert.v).unwrap();
            let th1 = theta_cap(&spec, &lifted, &pert).unwrap();
            let sig1 = &th1 * th1.transpose();
            for kk in 0..=k {
                assert_abs_diff_eq!(
                    mu1.rows(kk * n, n).into_owned(),
                    mu0.rows(kk * n, n).into_owned(),
                    epsilon = 1e-13
                );
                assert_abs_diff_eq!(
                    sig1.view((kk * n, kk * n), (n, n)).into_owned(),
                    sig0.view((kk * n, kk * n), (n, n)).into_owned(),
                    epsilon = 1e-13
                );
            }
        }
    }

    #[test]
    fn cost_is_convex_along_segments() {
        let mut rng = ChaCha12Rng::seed_from_u64(53);
        for _ in 0..10 {
            let spec = random_spec(&mut rng, 2, 2, 4);
            let lifted = build_lifted(&spec).unwrap();
            let pa = random_policy(&mut rng, &spec, 2);
            let pb = random_policy(&mut rng, &spec, 2);
            let mut mid = pa.clone();
            mid.v = (&pa.v + &pb.v) * 0.5;
            let coords = (pa.gain_coords() + pb.gain_coords()) * 0.5;
            mid.set_gain_coords(&coords).unwrap();
            let ja = cost(&spec, &lifted, &pa).unwrap();
            let jb = cost(&spec, &lifted, &pb).unwrap();
            let jm = cost(&spec, &lifted, &mid).unwrap();
            assert!(jm <= 0.5 * (ja + jb) + 1e-9, "midpoint {jm} vs {}", 0.5 * (ja + jb));
        }
    }

    #[test]
    fn band_structure_is_enforced() {
        let policy = Policy::zero(3, 2, 5, 2).unwrap();
        assert!(policy.gain_block(0, 0).is_some());
        assert!(policy.gain_block(0, 1).is_none());
        assert!(policy.gain_block(3, 0).is_none());
        assert!(policy.gain_block(3, 1).is_some());
        assert!(policy.gain_block(3, 3).is_some());
        assert!(policy.gain_block(3, 4).is_none());
        assert!(policy.gain_block(5, 5).is_none(), "row index past horizon");
        let dense = policy.dense_gain();
        assert_eq!(dense.nrows(), 5 * 2);
        assert_eq!(dense.ncols(), 6 * 3);
        assert!(Policy::zero(3, 2, 5, 0).is_err());
        assert!(Policy::zero(3, 2, 5, 6).is_err());
    }

    #[test]
    fn gain_coords_round_trip() {
        let mut rng = ChaCha12Rng::seed_from_u64(59);
        let spec = random_spec(&mut rng, 3, 2, 4);
        let policy = random_policy(&mut rng, &spec, 2);
        let coords = policy.gain_coords();
        assert_eq!(coords.len(), Policy::gain_coord_count(4, 2, 3, 2));
        let mut rebuilt = Policy::zero(3, 2, 4, 2).unwrap();
        rebuilt.set_gain_coords(&coords).unwrap();
        assert_relative_eq!(rebuilt.dense_gain(), policy.dense_gain());
    }

    #[test]
    fn discretize_double_integrator() {
        // Closed forms: A_d = [I, dt*I; 0, I], B_d = [dt^2/2 I; dt I].
        let dt = 0.05;
        let mut a = DMatrix::zeros(4, 4);
        a.view_mut((0, 2), (2, 2)).copy_from(&DMatrix::identity(2, 2));
        let mut b = DMatrix::zeros(4, 2);
        b.view_mut((2, 0), (2, 2)).copy_from(&DMatrix::identity(2, 2));
        let (ad, bd) = discretize_dynamics(&a, &b, dt).unwrap();
        let mut ad_expect = DMatrix::identity(4, 4);
        ad_expect.view_mut((0, 2), (2, 2)).copy_from(&(DMatrix::identity(2, 2) * dt));
        assert_relative_eq!(ad, ad_expect, epsilon = 1e-12);
        let mut bd_expect = DMatrix::zeros(4, 2);
        bd_expect.view_mut((0, 0), (2, 2)).copy_from(&(DMatrix::identity(2, 2) * dt * dt * 0.5));
        bd_expect.view_mut((2, 0), (2, 2)).copy_from(&(DMatrix::identity(2, 2) * dt));
        assert_relative_eq!(bd, bd_expect, epsilon = 1e-12);
    }

    #[test]
    fn discretize_noise_matches_quadrature() {
        // Oracle: Simpson quadrature of e^{A s} W e^{A' s} over [0, dt].
        let mut rng = ChaCha12Rng::seed_from_u64(61);
        let n = 3;
        let a = DMatrix::from_fn(n, n, |_, _| randn(&mut rng));
        let w = random_psd(&mut rng, n, 0.2);
        let dt = 0.08;
        let wd = discretize_noise(&a, &w, dt).unwrap();

        let steps = 2000;
        let h = dt / steps as f64;
        let mut acc = DMatrix::zeros(n, n);
        for i in 0..=steps {
            let s = i as f64 * h;
            let e = (a.clone() * s).exp();
            let term = &e * &w * e.transpose();
            let weight = if i == 0 || i == steps {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            acc += term * weight;
        }
        acc *= h / 3.0;
        assert_abs_diff_eq!(wd, acc, epsilon = 1e-9);
        assert!(min_symmetric_eigenvalue(&wd) > -1e-12);
    }

    #[test]
    fn validation_rejects_bad_specs() {
        let mut rng = ChaCha12Rng::seed_from_u64(67);
        let good = random_spec(&mut rng, 3, 2, 3);
        assert!(good.validate().is_ok());

        let mut bad = good.clone();
        bad.sigma_s = DMatrix::zeros(3, 3);
        assert!(bad.validate().is_err());

        let mut bad = good.clone();
        bad.w_seq[1] = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.0, -0.5, 0.0, 0.0, 0.0, 1.0]);
        assert!(bad.validate().is_err());

        let mut bad = good.clone();
        bad.q_seq.pop();
        assert!(bad.validate().is_err());

        let mut bad = good.clone();
        bad.p_sel = DMatrix::zeros(2, 3);
        assert!(bad.validate().is_err());
    }
}
