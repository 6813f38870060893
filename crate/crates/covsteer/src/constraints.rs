//! Compilers from steering constraints to conic-program rows.
//!
//! Every function here emits rows over a shared decision-variable space laid
//! out by the caller: per agent, a feed-forward block `v` (step-major), a
//! gain block of in-band coordinates (see [`crate::dynamics::band_blocks`]),
//! and optionally a per-step radius block. The families are
//!
//! - terminal mean equalities and the terminal covariance PSD blocks (split
//!   per disturbance block through auxiliary slack variables, which keeps
//!   every block small; see [`terminal_cov_psd`]),
//! - per-step collision/obstacle second-order cones that bound the Gaussian
//!   tail of a linearized separation (the "full chance-constraint" family),
//! - per-step uncertainty-ball radius cones (Frobenius by default, exact
//!   spectral PSD blocks behind a flag, split the same way) together with
//!   linearized mean separation rows (the "partitioned" family),
//! - the same mean rows with fixed ball radii (the "moment-bounded" family).
//!
//! Compilers that introduce auxiliary variables allocate them past the
//! caller's layout through [`ProgramBuilder::alloc_aux`], so agent blocks and
//! any consensus copies keep their offsets.
//!
//! Rows are normalized so the largest linear-coefficient norm in each cone
//! block is one (per-row for equalities and one-dimensional inequalities),
//! which keeps the first-order solver well conditioned regardless of the
//! scenario's physical units.

use nalgebra::{DMatrix, DVector};

use crate::conic::{Cone, ConicProgram, SparseMatrix};
use crate::dynamics::{band_block_position, gain_band, AgentSpec, LiftedDynamics};
use crate::error::{Error, Result};
use crate::linalg::sqrt_psd;
use crate::stats::gaussian_inv_cdf;

/// Tolerance for the on-sphere requirement of tail-bound linearization points.
pub const SPHERE_TOL: f64 = 1e-9;

/// A static circular (spherical) obstacle: everything within `radius` of
/// `center` must be avoided.
#[derive(Debug, Clone, PartialEq)]
pub struct Obstacle {
    pub center: DVector<f64>,
    pub radius: f64,
}

impl Obstacle {
    pub fn new(center: DVector<f64>, radius: f64) -> Result<Self> {
        if radius <= 0.0 {
            return Err(Error::Invalid("obstacle radius must be positive".into()));
        }
        Ok(Obstacle { center, radius })
    }
}

/// Linearization geometry for one constraint at one time step: the point for
/// the owning agent and the point for the other side (the neighbor's point,
/// or the obstacle center).
#[derive(Debug, Clone, PartialEq)]
pub struct LinearizationPoint {
    pub p_i: DVector<f64>,
    pub p_j: DVector<f64>,
}

/// How linearization points follow the current mean iterates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinearizationMode {
    /// Points on the margin sphere: on the segment joining the current means,
    /// symmetric about its midpoint, exactly `margin` apart (tail-bound
    /// cones require this).
    SphereProjected,
    /// The raw current means (mean-separation rows only need a direction).
    RawMeans,
}

/// Linearization points for an agent pair. Returns the points and whether the
/// coincident-mean fallback fired (a deterministic perturbation along the
/// first coordinate axis, half the margin each way).
pub fn pair_linearization(
    mode: LinearizationMode,
    mu_i: &DVector<f64>,
    mu_j: &DVector<f64>,
    margin: f64,
) -> (LinearizationPoint, bool) {
    let diff = mu_i - mu_j;
    let dist = diff.norm();
    let degenerate = dist < 1e-12;
    let q = mu_i.len();
    let dir = if degenerate {
        let mut e = DVector::zeros(q);
        e[0] = 1.0;
        e
    } else {
        &diff / dist
    };
    match mode {
        LinearizationMode::SphereProjected => {
            let mid = (mu_i + mu_j) * 0.5;
            let half = margin * 0.5;
            (LinearizationPoint { p_i: &mid + &dir * half, p_j: &mid - &dir * half }, degenerate)
        }
        LinearizationMode::RawMeans => {
            if degenerate {
                let mid = (mu_i + mu_j) * 0.5;
                let half = margin * 0.5;
                (
                    LinearizationPoint { p_i: &mid + &dir * half, p_j: &mid - &dir * half },
                    true,
                )
            } else {
                (LinearizationPoint { p_i: mu_i.clone(), p_j: mu_j.clone() }, false)
            }
        }
    }
}

/// Linearization point for an agent/obstacle constraint; `p_j` is always the
/// obstacle center. The coincident fallback places the point along the first
/// coordinate axis.
pub fn obstacle_linearization(
    mode: LinearizationMode,
    mu_i: &DVector<f64>,
    obstacle: &Obstacle,
) -> (LinearizationPoint, bool) {
    let diff = mu_i - &obstacle.center;
    let dist = diff.norm();
    let degenerate = dist < 1e-12;
    let q = mu_i.len();
    let dir = if degenerate {
        let mut e = DVector::zeros(q);
        e[0] = 1.0;
        e
    } else {
        &diff / dist
    };
    let p_i = match mode {
        LinearizationMode::SphereProjected => &obstacle.center + &dir * obstacle.radius,
        LinearizationMode::RawMeans => {
            if degenerate {
                &obstacle.center + &dir * (obstacle.radius * 0.5)
            } else {
                mu_i.clone()
            }
        }
    };
    (LinearizationPoint { p_i, p_j: obstacle.center.clone() }, degenerate)
}

/// One agent's slice of the decision-variable space.
#[derive(Debug, Clone, Copy, Default)]
pub struct AgentVars {
    /// Feed-forward block: `T * m` coordinates, step-major.
    pub v: Option<VarBlock>,
    /// In-band gain coordinates in canonical order.
    pub gains: Option<VarBlock>,
    /// Per-step ball radii, `T + 1` coordinates.
    pub radii: Option<VarBlock>,
}

#[derive(Debug, Clone, Copy)]
pub struct VarBlock {
    pub offset: usize,
    pub len: usize,
}

impl AgentVars {
    fn v_block(&self) -> VarBlock {
        self.v.expect("layout must include a feed-forward block")
    }

    fn gain_block(&self) -> VarBlock {
        self.gains.expect("layout must include a gain block")
    }

    fn radius_coord(&self, k: usize) -> usize {
        let block = self.radii.expect("layout must include a radius block");
        assert!(k < block.len, "radius step out of range");
        block.offset + k
    }
}

/// Precomputed per-agent compilation state: the lift, the disturbance-block
/// covariance roots, the terminal whitener, and the gain band width.
pub struct CompileContext<'a> {
    pub spec: &'a AgentSpec,
    pub lifted: &'a LiftedDynamics,
    pub gamma: usize,
    noise_roots: Vec<DMatrix<f64>>,
    sigma_f_inv_root: DMatrix<f64>,
}

impl<'a> CompileContext<'a> {
    pub fn new(spec: &'a AgentSpec, lifted: &'a LiftedDynamics, gamma: usize) -> Result<Self> {
        if gamma < 1 || gamma > spec.horizon() {
            return Err(Error::Invalid(format!(
                "gamma must lie in [1, T]; got gamma={gamma}, T={}",
                spec.horizon()
            )));
        }
        let mut noise_roots = Vec::with_capacity(spec.horizon() + 1);
        for kappa in 0..=spec.horizon() {
            noise_roots.push(sqrt_psd(spec.noise_block(kappa))?);
        }
        let sigma_f_inv_root = crate::linalg::inv_sqrt_spd(&spec.sigma_f)?;
        Ok(CompileContext { spec, lifted, gamma, noise_roots, sigma_f_inv_root })
    }

    pub fn n(&self) -> usize {
        self.spec.n()
    }

    pub fn m(&self) -> usize {
        self.spec.m()
    }

    pub fn horizon(&self) -> usize {
        self.spec.horizon()
    }

    pub fn q_dim(&self) -> usize {
        self.spec.q_dim()
    }

    /// Number of in-band gain coordinates for this agent.
    pub fn gain_coord_count(&self) -> usize {
        crate::dynamics::Policy::gain_coord_count(self.horizon(), self.gamma, self.n(), self.m())
    }

    /// Flat gain coordinate of entry `(r, c)` of in-band block `(k, kappa)`.
    fn gain_coord(&self, k: usize, kappa: usize, r: usize, c: usize) -> usize {
        let pos = band_block_position(self.horizon(), self.gamma, k, kappa)
            .expect("block must be in band");
        pos * self.m() * self.n() + c * self.m() + r
    }
}

/// Affine expansion of one direction of the step-`k` state: the scalar
/// `g' x_k` as a function of `v`, and the row `g' Gamma_k Theta` (the
/// direction's disturbance loading) as a function of the gain coordinates.
///
/// The disturbance loading is supported on blocks `kappa <= k` by causality,
/// so only `(k + 1) n` coordinates are materialized.
pub struct ThetaAffine {
    /// `g' Gamma_k G0 mu_s`.
    pub mean_const: f64,
    /// Coefficients of `g' Gamma_k Gu v` on the `T m` feed-forward coordinates.
    pub v_coeffs: Vec<(usize, f64)>,
    /// Number of materialized disturbance coordinates, `(k + 1) n`.
    pub cov_len: usize,
    /// Constant part `(S^{1/2} Ghat' Gamma_k' g)`, indexed `kappa * n + c`.
    pub cov_const: Vec<f64>,
    /// Linear part: `(local coordinate, gain coordinate, coefficient)`.
    pub cov_coeffs: Vec<(usize, usize, f64)>,
}

/// Expands `g' x_k` (with `g` an `n`-vector) into its affine form over
/// `(v, gains)`.
pub fn theta_affine(ctx: &CompileContext, k: usize, g: &DVector<f64>) -> ThetaAffine {
    let n = ctx.n();
    let m = ctx.m();
    assert!(k <= ctx.horizon(), "step index out of range");
    assert_eq!(g.len(), n, "direction must be an n-vector");

    let g0_block = ctx.lifted.g0.view((k * n, 0), (n, n));
    let mean_const = (g0_block.transpose() * g).dot(&ctx.spec.mu_s);

    let mut v_coeffs = Vec::with_capacity(k * m);
    // Cached `h_j = Gu[k, j]' g` per control step; reused by the gain part.
    let mut h = Vec::with_capacity(k);
    for j in 0..k {
        let block = ctx.lifted.gu.view((k * n, j * m), (n, m));
        let hj = block.transpose() * g;
        for r in 0..m {
            if hj[r] != 0.0 {
                v_coeffs.push((j * m + r, hj[r]));
            }
        }
        h.push(hj);
    }

    let cov_len = (k + 1) * n;
    let mut cov_const = vec![0.0; cov_len];
    for kappa in 0..=k {
        let hat_block = if kappa == 0 {
            ctx.lifted.g0.view((k * n, 0), (n, n))
        } else {
            ctx.lifted.gw.view((k * n, (kappa - 1) * n), (n, n))
        };
        let base = &ctx.noise_roots[kappa] * (hat_block.transpose() * g);
        for c in 0..n {
            cov_const[kappa * n + c] = base[c];
        }
    }

    let mut cov_coeffs = Vec::new();
    for (j, hj) in h.iter().enumerate() {
        for kappa in gain_band(j, ctx.gamma) {
            let root = &ctx.noise_roots[kappa];
            for c_sigma in 0..n {
                for r in 0..m {
                    let hv = hj[r];
                    if hv == 0.0 {
                        continue;
                    }
                    let coord = ctx.gain_coord(j, kappa, r, c_sigma);
                    for c0 in 0..n {
                        let coeff = root[(c0, c_sigma)] * hv;
                        if coeff != 0.0 {
                            cov_coeffs.push((kappa * n + c0, coord, coeff));
                        }
                    }
                }
            }
        }
    }

    ThetaAffine { mean_const, v_coeffs, cov_len, cov_const, cov_coeffs }
}

/// One affine row `s(x) = constant + sum coeffs * x`.
#[derive(Debug, Clone, Default)]
pub struct AffineRow {
    pub constant: f64,
    pub coeffs: Vec<(usize, f64)>,
}

impl AffineRow {
    fn coeff_norm(&self) -> f64 {
        self.coeffs.iter().map(|&(_, v)| v * v).sum::<f64>().sqrt()
    }

    /// Evaluates the row at a dense point (test and diagnostics helper).
    pub fn eval(&self, x: &DVector<f64>) -> f64 {
        self.constant + self.coeffs.iter().map(|&(j, v)| v * x[j]).sum::<f64>()
    }
}

/// Accumulates cone rows, normalizes them, and assembles a [`ConicProgram`].
///
/// Rows are affine expressions `s(x)`; feasibility means `s(x)` lies in the
/// pushed cone, which matches the solver's `b - A x in K` convention.
pub struct ProgramBuilder {
    num_vars: usize,
    scale_rows: bool,
    triplets: Vec<(usize, usize, f64)>,
    b: Vec<f64>,
    cones: Vec<Cone>,
}

impl ProgramBuilder {
    pub fn new(num_vars: usize) -> Self {
        ProgramBuilder { num_vars, scale_rows: true, triplets: Vec::new(), b: Vec::new(), cones: Vec::new() }
    }

    /// Disables row normalization (tests compare raw coefficients).
    pub fn without_row_scaling(mut self) -> Self {
        self.scale_rows = false;
        self
    }

    pub fn num_rows(&self) -> usize {
        self.b.len()
    }

    /// Total variable count so far, including auxiliary slots.
    pub fn num_vars(&self) -> usize {
        self.num_vars
    }

    /// Appends `len` auxiliary variables after the caller's layout. Splitting
    /// compilers use these for internal slack blocks; they carry no objective
    /// and are never shared across agents.
    pub fn alloc_aux(&mut self, len: usize) -> VarBlock {
        let block = VarBlock { offset: self.num_vars, len };
        self.num_vars += len;
        block
    }

    fn push_row_scaled(&mut self, row: &AffineRow, scale: f64) {
        let r = self.b.len();
        self.b.push(row.constant * scale);
        for &(col, v) in &row.coeffs {
            debug_assert!(col < self.num_vars, "column out of range");
            if v != 0.0 {
                self.triplets.push((r, col, -v * scale));
            }
        }
    }

    fn row_scale(norm: f64) -> f64 {
        if norm > 1e-12 {
            1.0 / norm
        } else {
            1.0
        }
    }

    /// `s(x) = 0` rows as one zero-cone segment.
    pub fn push_zero_rows(&mut self, rows: &[AffineRow]) {
        for row in rows {
            let scale = if self.scale_rows { Self::row_scale(row.coeff_norm()) } else { 1.0 };
            self.push_row_scaled(row, scale);
        }
        self.cones.push(Cone::Zero(rows.len()));
    }

    /// `s(x) >= 0` as a one-row nonnegative segment.
    pub fn push_nonneg_row(&mut self, row: &AffineRow) {
        let scale = if self.scale_rows { Self::row_scale(row.coeff_norm()) } else { 1.0 };
        self.push_row_scaled(row, scale);
        self.cones.push(Cone::Nonneg(1));
    }

    /// `(s_0(x), s_rest(x)) in SOC`; the whole block shares one scale.
    pub fn push_soc(&mut self, rows: &[AffineRow]) {
        let norm = rows.iter().map(AffineRow::coeff_norm).fold(0.0f64, f64::max);
        let scale = if self.scale_rows { Self::row_scale(norm) } else { 1.0 };
        for row in rows {
            self.push_row_scaled(row, scale);
        }
        self.cones.push(Cone::Soc(rows.len()));
    }

    /// A PSD block of the given side; `constants` is the svec of the constant
    /// part and `coeffs` lists `(svec row, variable, coefficient)` of the
    /// linear part.
    pub fn push_psd(
        &mut self,
        side: usize,
        constants: &DVector<f64>,
        coeffs: &[(usize, usize, f64)],
    ) {
        let rows = side * (side + 1) / 2;
        assert_eq!(constants.len(), rows, "svec length mismatch");
        let mut norms = vec![0.0f64; rows];
        for &(r, _, v) in coeffs {
            norms[r] += v * v;
        }
        let norm = norms.iter().fold(0.0f64, |a, &v| a.max(v.sqrt()));
        let scale = if self.scale_rows { Self::row_scale(norm) } else { 1.0 };
        let base = self.b.len();
        for r in 0..rows {
            self.b.push(constants[r] * scale);
        }
        for &(r, col, v) in coeffs {
            debug_assert!(col < self.num_vars, "column out of range");
            if v != 0.0 {
                self.triplets.push((base + r, col, -v * scale));
            }
        }
        self.cones.push(Cone::Psd(side));
    }

    /// Assembles the program with the given quadratic objective. `p_triplets`
    /// must describe the full symmetric matrix (both triangles). `c` may cover
    /// only the caller's layout; auxiliary slots are padded with zeros.
    pub fn finish(self, p_triplets: &[(usize, usize, f64)], c: DVector<f64>) -> Result<ConicProgram> {
        if c.len() > self.num_vars {
            return Err(Error::Dimension(format!(
                "linear cost has {} entries but the program has {} variables",
                c.len(),
                self.num_vars
            )));
        }
        let mut c_full = DVector::zeros(self.num_vars);
        c_full.rows_mut(0, c.len()).copy_from(&c);
        let rows = self.b.len();
        let program = ConicProgram {
            num_vars: self.num_vars,
            p: SparseMatrix::from_triplets(self.num_vars, self.num_vars, p_triplets)?,
            c: c_full,
            a: SparseMatrix::from_triplets(rows, self.num_vars, &self.triplets)?,
            b: DVector::from_vec(self.b),
            cones: self.cones,
        };
        program.validate_shapes()?;
        Ok(program)
    }
}

/// Index of svec coordinate `(i, j)` with `i >= j` in a side-`side` block.
fn svec_index(side: usize, i: usize, j: usize) -> usize {
    debug_assert!(i >= j && i < side);
    j * (2 * side - j + 1) / 2 + (i - j)
}

/// Sparse objective terms: the expected cost lowered onto layout coordinates
/// with the solver's `(1/2) x'Px + c'x` convention, so the cost at a packed
/// policy equals `(1/2) x'Px + c'x + constant`.
pub struct CostTerms {
    pub p_triplets: Vec<(usize, usize, f64)>,
    pub linear: Vec<(usize, f64)>,
    pub constant: f64,
}

/// Lowers the expected quadratic cost onto the layout's blocks.
///
/// With a feed-forward block this emits the mean part
/// `theta'Q theta + v'R v`; with a gain block it emits the covariance part
/// `tr(Q Theta Theta') + tr(R K S K')`. Either block may be absent (the
/// mean-consensus local programs carry no gains, the one-off covariance
/// program carries no feed-forward).
pub fn cost_quadratic(ctx: &CompileContext, vars: &AgentVars) -> CostTerms {
    let n = ctx.n();
    let m = ctx.m();
    let t = ctx.horizon();
    let spec = ctx.spec;
    let lifted = ctx.lifted;

    // M = Gu'QGu + R drives both the feed-forward quadratic and (through the
    // disturbance covariance) the gain quadratic.
    let q_zero = spec.q_seq.iter().all(|q| q.iter().all(|&v| v == 0.0));
    let mut m_mat = DMatrix::<f64>::zeros(t * m, t * m);
    if !q_zero {
        let mut q_gu = DMatrix::<f64>::zeros((t + 1) * n, t * m);
        for (k, q) in spec.q_seq.iter().enumerate() {
            let rows = k * n;
            q_gu.view_mut((rows, 0), (n, t * m)).copy_from(&(q * lifted.gu.view((rows, 0), (n, t * m))));
        }
        m_mat = lifted.gu.transpose() * &q_gu;
    }
    for (k, r) in spec.r_seq.iter().enumerate() {
        let mut blk = m_mat.view_mut((k * m, k * m), (m, m));
        blk += r;
    }

    let mut terms = CostTerms { p_triplets: Vec::new(), linear: Vec::new(), constant: 0.0 };

    if let Some(vb) = vars.v {
        assert_eq!(vb.len, t * m, "feed-forward block length mismatch");
        for a in 0..t * m {
            for b in 0..t * m {
                let w = m_mat[(a, b)];
                if w != 0.0 {
                    terms.p_triplets.push((vb.offset + a, vb.offset + b, 2.0 * w));
                }
            }
        }
        if !q_zero {
            let mean0 = &lifted.g0 * &spec.mu_s;
            let mut q_mean0 = DVector::<f64>::zeros((t + 1) * n);
            for (k, q) in spec.q_seq.iter().enumerate() {
                q_mean0.rows_mut(k * n, n).copy_from(&(q * mean0.rows(k * n, n)));
            }
            let lin = lifted.gu.transpose() * &q_mean0;
            for a in 0..t * m {
                if lin[a] != 0.0 {
                    terms.linear.push((vb.offset + a, 2.0 * lin[a]));
                }
            }
            terms.constant += q_mean0.dot(&mean0);
        }
    }

    if let Some(gb) = vars.gains {
        assert_eq!(gb.len, ctx.gain_coord_count(), "gain block length mismatch");
        // Quadratic: tr(K'(Gu'QGu + R)K S); the block-diagonal S couples only
        // same-kappa column blocks.
        for kappa in 0..t {
            let s_k = spec.noise_block(kappa);
            let row_lo = kappa;
            let row_hi = (kappa + ctx.gamma).min(t - 1);
            for k in row_lo..=row_hi {
                for k2 in row_lo..=row_hi {
                    let m_blk = m_mat.view((k * m, k2 * m), (m, m));
                    if m_blk.iter().all(|&v| v == 0.0) {
                        continue;
                    }
                    for r in 0..m {
                        for c in 0..n {
                            let x1 = gb.offset + ctx.gain_coord(k, kappa, r, c);
                            for r2 in 0..m {
                                for c2 in 0..n {
                                    let w = m_blk[(r, r2)] * s_k[(c2, c)];
                                    if w != 0.0 {
                                        let x2 = gb.offset + ctx.gain_coord(k2, kappa, r2, c2);
                                        terms.p_triplets.push((x1, x2, 2.0 * w));
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        if !q_zero {
            // Linear: 2 tr(Q Gu K S Ghat') picks out N = S Ghat'Q Gu.
            let ghat = lifted.ghat();
            let s_cov = spec.stacked_noise_cov();
            let mut q_gu = DMatrix::<f64>::zeros((t + 1) * n, t * m);
            for (k, q) in spec.q_seq.iter().enumerate() {
                let rows = k * n;
                q_gu.view_mut((rows, 0), (n, t * m))
                    .copy_from(&(q * lifted.gu.view((rows, 0), (n, t * m))));
            }
            let n_mat = &s_cov * ghat.transpose() * q_gu;
            for (k, kappa) in crate::dynamics::band_blocks(t, ctx.gamma) {
                for r in 0..m {
                    for c in 0..n {
                        let w = n_mat[(kappa * n + c, k * m + r)];
                        if w != 0.0 {
                            terms.linear.push((gb.offset + ctx.gain_coord(k, kappa, r, c), 2.0 * w));
                        }
                    }
                }
            }
            // Constant: tr(Q Ghat S Ghat') accumulated per diagonal block.
            let open_cov = &ghat * s_cov * ghat.transpose();
            for (k, q) in spec.q_seq.iter().enumerate() {
                terms.constant += (q * open_cov.view((k * n, k * n), (n, n))).trace();
            }
        }
    }

    terms
}

/// Terminal mean equalities: the step-`T` mean must equal the target exactly.
pub fn terminal_mean_rows(ctx: &CompileContext, vars: &AgentVars, builder: &mut ProgramBuilder) {
    let n = ctx.n();
    let m = ctx.m();
    let t = ctx.horizon();
    let vb = vars.v_block();
    let g0_t = ctx.lifted.g0.view((t * n, 0), (n, n));
    let mean0 = g0_t * &ctx.spec.mu_s;
    let mut rows = Vec::with_capacity(n);
    for r in 0..n {
        let mut coeffs = Vec::with_capacity(t * m);
        for j in 0..t {
            let block = ctx.lifted.gu.view((t * n, j * m), (n, m));
            for u in 0..m {
                let v = block[(r, u)];
                if v != 0.0 {
                    coeffs.push((vb.offset + j * m + u, -v));
                }
            }
        }
        rows.push(AffineRow { constant: ctx.spec.mu_f[r] - mean0[r], coeffs });
    }
    builder.push_zero_rows(&rows);
}

/// svec coordinate order of a side-`n` symmetric block: `(i, j)` pairs,
/// lower triangle, column by column.
fn svec_pairs(n: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..n).flat_map(move |j| (j..n).map(move |i| (i, j)))
}

/// Terminal covariance bound `Gamma_T Theta Theta' Gamma_T' <= Sigma_f`,
/// affine in the gain coordinates through its Schur form.
///
/// Two reformulations keep the first-order solver effective here. First the
/// bound is whitened by `Sigma_f^{-1/2}`, which restates it as
/// `C C' <= I` with `C = Sigma_f^{-1/2} Gamma_T Theta`; this removes the
/// (often badly mixed) physical units of `Sigma_f` from the block, something
/// the solver's segment-uniform scaling could not repair. Second, the Schur
/// block of the whitened bound has an arrow pattern (the disturbance side is
/// block diagonal), so it splits exactly into one small PSD block per
/// disturbance step plus a coupling block: with `C_kappa` the whitened
/// terminal loading on disturbance block `kappa` and auxiliary symmetric
/// slacks `S_kappa`,
///
/// ```text
/// [S_kappa, C_kappa; C_kappa', I] >= 0  for every kappa,
/// sum_kappa S_kappa <= I.
/// ```
///
/// Both systems have the same feasible gains, and the split keeps every PSD
/// segment at side `2n` instead of one monolithic block of side `(T + 2) n`.
pub fn terminal_cov_psd(ctx: &CompileContext, vars: &AgentVars, builder: &mut ProgramBuilder) {
    let n = ctx.n();
    let m = ctx.m();
    let t = ctx.horizon();
    let gb = vars.gain_block();
    let side = 2 * n;
    let s_len = n * (n + 1) / 2;
    let sqrt2 = std::f64::consts::SQRT_2;
    let whiten = &ctx.sigma_f_inv_root;

    let mut corner_coeffs = Vec::with_capacity((t + 1) * s_len);
    for kappa in 0..=t {
        let aux = builder.alloc_aux(s_len);
        let hat_block = if kappa == 0 {
            ctx.lifted.g0.view((t * n, 0), (n, n)).into_owned()
        } else {
            ctx.lifted.gw.view((t * n, (kappa - 1) * n), (n, n)).into_owned()
        };
        let c0 = whiten * hat_block * &ctx.noise_roots[kappa];

        let mut constants = DVector::zeros(side * (side + 1) / 2);
        for i in 0..n {
            constants[svec_index(side, n + i, n + i)] = 1.0;
        }
        for r in 0..n {
            for c in 0..n {
                constants[svec_index(side, n + c, r)] = c0[(r, c)] * sqrt2;
            }
        }

        let mut coeffs = Vec::new();
        for (idx, (i, j)) in svec_pairs(n).enumerate() {
            coeffs.push((svec_index(side, i, j), aux.offset + idx, 1.0));
            corner_coeffs.push((idx, aux.offset + idx, -1.0));
        }
        // Gain steps whose band covers this disturbance block.
        for j_step in kappa..=(kappa + ctx.gamma).min(t.saturating_sub(1)) {
            let gu_block = whiten * ctx.lifted.gu.view((t * n, j_step * m), (n, m));
            let root = &ctx.noise_roots[kappa];
            for c_sigma in 0..n {
                for ru in 0..m {
                    let coord = gb.offset + ctx.gain_coord(j_step, kappa, ru, c_sigma);
                    for r in 0..n {
                        let left = gu_block[(r, ru)];
                        if left == 0.0 {
                            continue;
                        }
                        for c in 0..n {
                            let v = left * root[(c_sigma, c)];
                            if v != 0.0 {
                                coeffs.push((svec_index(side, n + c, r), coord, v * sqrt2));
                            }
                        }
                    }
                }
            }
        }
        builder.push_psd(side, &constants, &coeffs);
    }
    builder.push_psd(n, &crate::conic::svec(&DMatrix::identity(n, n)), &corner_coeffs);
}

fn check_eps(eps: f64) -> Result<f64> {
    if !(eps > 0.0 && eps <= 0.5) {
        return Err(Error::Invalid(format!(
            "per-constraint risk must lie in (0, 0.5]; got {eps}"
        )));
    }
    gaussian_inv_cdf(1.0 - eps)
}

fn check_on_sphere(dist: f64, margin: f64, what: &str) -> Result<()> {
    if (dist - margin).abs() > SPHERE_TOL {
        return Err(Error::Invalid(format!(
            "{what} linearization point must sit on the margin sphere: \
             |{dist:.12} - {margin:.12}| > {SPHERE_TOL:e}"
        )));
    }
    Ok(())
}

/// Gaussian tail-bound cone for a pair separation at step `k`.
///
/// With `a = 2 (p_i - p_j)` and `b = -||p_i - p_j||^2 - margin^2` evaluated at
/// an on-sphere linearization point, feasibility of
/// `z(1-eps) * ||loading|| <= a' (mu_i - mu_j) + b` guarantees the linearized
/// separation holds with probability at least `1 - eps`.
#[allow(clippy::too_many_arguments)]
pub fn fcc_pair_soc(
    ctx_i: &CompileContext,
    vars_i: &AgentVars,
    ctx_j: &CompileContext,
    vars_j: &AgentVars,
    k: usize,
    lin: &LinearizationPoint,
    margin: f64,
    eps: f64,
    builder: &mut ProgramBuilder,
) -> Result<()> {
    let tail = check_eps(eps)?;
    let diff = &lin.p_i - &lin.p_j;
    check_on_sphere(diff.norm(), margin, "pair")?;
    let a = &diff * 2.0;
    let b_const = -diff.norm_squared() - margin * margin;

    let ta_i = theta_affine(ctx_i, k, &(ctx_i.spec.p_sel.transpose() * &a));
    let ta_j = theta_affine(ctx_j, k, &(ctx_j.spec.p_sel.transpose() * &a));

    let vb_i = vars_i.v_block();
    let vb_j = vars_j.v_block();
    let gb_i = vars_i.gain_block();
    let gb_j = vars_j.gain_block();

    let mut rows = Vec::with_capacity(1 + ta_i.cov_len + ta_j.cov_len);
    let mut head = AffineRow {
        constant: ta_i.mean_const - ta_j.mean_const + b_const,
        coeffs: Vec::with_capacity(ta_i.v_coeffs.len() + ta_j.v_coeffs.len()),
    };
    for &(idx, v) in &ta_i.v_coeffs {
        head.coeffs.push((vb_i.offset + idx, v));
    }
    for &(idx, v) in &ta_j.v_coeffs {
        head.coeffs.push((vb_j.offset + idx, -v));
    }
    rows.push(head);

    for (ta, gb) in [(&ta_i, &gb_i), (&ta_j, &gb_j)] {
        let base = rows.len();
        for r in 0..ta.cov_len {
            rows.push(AffineRow { constant: tail * ta.cov_const[r], coeffs: Vec::new() });
        }
        for &(r, coord, v) in &ta.cov_coeffs {
            rows[base + r].coeffs.push((gb.offset + coord, tail * v));
        }
    }
    builder.push_soc(&rows);
    Ok(())
}

/// Gaussian tail-bound cone for clearing a static obstacle at step `k`.
pub fn fcc_obstacle_soc(
    ctx: &CompileContext,
    vars: &AgentVars,
    k: usize,
    lin: &LinearizationPoint,
    obstacle: &Obstacle,
    eps: f64,
    builder: &mut ProgramBuilder,
) -> Result<()> {
    let tail = check_eps(eps)?;
    let diff = &lin.p_i - &obstacle.center;
    check_on_sphere(diff.norm(), obstacle.radius, "obstacle")?;
    let a = &diff * 2.0;
    let b_const = -diff.norm_squared() - obstacle.radius * obstacle.radius;

    let ta = theta_affine(ctx, k, &(ctx.spec.p_sel.transpose() * &a));
    let vb = vars.v_block();
    let gb = vars.gain_block();

    let mut rows = Vec::with_capacity(1 + ta.cov_len);
    let mut head = AffineRow {
        constant: ta.mean_const - a.dot(&obstacle.center) + b_const,
        coeffs: Vec::with_capacity(ta.v_coeffs.len()),
    };
    for &(idx, v) in &ta.v_coeffs {
        head.coeffs.push((vb.offset + idx, v));
    }
    rows.push(head);
    let base = rows.len();
    for r in 0..ta.cov_len {
        rows.push(AffineRow { constant: tail * ta.cov_const[r], coeffs: Vec::new() });
    }
    for &(r, coord, v) in &ta.cov_coeffs {
        rows[base + r].coeffs.push((gb.offset + coord, tail * v));
    }
    builder.push_soc(&rows);
    Ok(())
}

enum RadiusExpr {
    Variable(usize),
    Fixed(f64),
}

/// Frobenius-norm ball cone: `||position loading at step k||_F <= r / sqrt(beta)`,
/// a sufficient (slightly conservative) stand-in for the spectral bound.
fn ball_soc(
    ctx: &CompileContext,
    vars: &AgentVars,
    k: usize,
    beta: f64,
    radius: RadiusExpr,
    builder: &mut ProgramBuilder,
) -> Result<()> {
    if beta <= 0.0 {
        return Err(Error::Invalid("ball scaling beta must be positive".into()));
    }
    let q = ctx.q_dim();
    let gb = vars.gain_block();
    let inv_sqrt_beta = 1.0 / beta.sqrt();

    let mut rows = Vec::new();
    match radius {
        RadiusExpr::Variable(col) => rows.push(AffineRow {
            constant: 0.0,
            coeffs: vec![(col, inv_sqrt_beta)],
        }),
        RadiusExpr::Fixed(r) => rows.push(AffineRow { constant: r * inv_sqrt_beta, coeffs: Vec::new() }),
    }
    for d in 0..q {
        let g = ctx.spec.p_sel.row(d).transpose();
        let ta = theta_affine(ctx, k, &g);
        let base = rows.len();
        for r in 0..ta.cov_len {
            rows.push(AffineRow { constant: ta.cov_const[r], coeffs: Vec::new() });
        }
        for &(r, coord, v) in &ta.cov_coeffs {
            rows[base + r].coeffs.push((gb.offset + coord, v));
        }
    }
    builder.push_soc(&rows);
    Ok(())
}

/// Ball cone with the radius as a decision variable (partitioned family).
pub fn pcc_ball_soc(
    ctx: &CompileContext,
    vars: &AgentVars,
    k: usize,
    beta: f64,
    builder: &mut ProgramBuilder,
) -> Result<()> {
    ball_soc(ctx, vars, k, beta, RadiusExpr::Variable(vars.radius_coord(k)), builder)
}

/// Ball cone with a fixed radius (moment-bounded family).
pub fn mc_ball_soc(
    ctx: &CompileContext,
    vars: &AgentVars,
    k: usize,
    beta: f64,
    r_hat: f64,
    builder: &mut ProgramBuilder,
) -> Result<()> {
    if r_hat <= 0.0 {
        return Err(Error::Invalid("fixed ball radius must be positive".into()));
    }
    ball_soc(ctx, vars, k, beta, RadiusExpr::Fixed(r_hat), builder)
}

/// Exact spectral ball bound as PSD blocks (optional mode): feasibility of
/// `[r I, B; B', (r / beta) I]` with `B` the step-`k` position loading is
/// equivalent to `||B||_2 <= r / sqrt(beta)`.
///
/// The loading side of that block is diagonal, so like the terminal
/// covariance bound it splits exactly per disturbance block: with `B_kappa`
/// the loading columns for block `kappa` and auxiliary slacks `S_kappa`,
///
/// ```text
/// [S_kappa, B_kappa; B_kappa', (r / beta) I] >= 0  for every kappa,
/// sum_kappa S_kappa <= r I.
/// ```
pub fn pcc_spectral_psd(
    ctx: &CompileContext,
    vars: &AgentVars,
    k: usize,
    beta: f64,
    builder: &mut ProgramBuilder,
) -> Result<()> {
    if beta <= 0.0 {
        return Err(Error::Invalid("ball scaling beta must be positive".into()));
    }
    let q = ctx.q_dim();
    let n = ctx.n();
    let gb = vars.gain_block();
    let r_col = vars.radius_coord(k);
    let side = q + n;
    let s_len = q * (q + 1) / 2;
    let sqrt2 = std::f64::consts::SQRT_2;

    let loadings: Vec<ThetaAffine> = (0..q)
        .map(|d| theta_affine(ctx, k, &ctx.spec.p_sel.row(d).transpose()))
        .collect();

    let mut corner_coeffs = Vec::with_capacity((k + 1) * s_len + q);
    for kappa in 0..=k {
        let aux = builder.alloc_aux(s_len);
        let mut constants = DVector::zeros(side * (side + 1) / 2);
        let mut coeffs = Vec::new();
        for (idx, (i, j)) in svec_pairs(q).enumerate() {
            coeffs.push((svec_index(side, i, j), aux.offset + idx, 1.0));
            corner_coeffs.push((idx, aux.offset + idx, -1.0));
        }
        for i in 0..n {
            coeffs.push((svec_index(side, q + i, q + i), r_col, 1.0 / beta));
        }
        for (d, ta) in loadings.iter().enumerate() {
            for c in 0..n {
                let idx = svec_index(side, q + c, d);
                constants[idx] = ta.cov_const[kappa * n + c] * sqrt2;
            }
            for &(r, coord, v) in &ta.cov_coeffs {
                if r < kappa * n || r >= (kappa + 1) * n {
                    continue;
                }
                let idx = svec_index(side, q + (r - kappa * n), d);
                coeffs.push((idx, gb.offset + coord, v * sqrt2));
            }
        }
        builder.push_psd(side, &constants, &coeffs);
    }
    for d in 0..q {
        corner_coeffs.push((svec_index(q, d, d), r_col, 1.0));
    }
    builder.push_psd(q, &DVector::zeros(s_len), &corner_coeffs);
    Ok(())
}

fn unit_direction(lin: &LinearizationPoint, what: &str) -> Result<DVector<f64>> {
    let diff = &lin.p_i - &lin.p_j;
    let norm = diff.norm();
    if norm <= 1e-12 {
        return Err(Error::Invalid(format!(
            "{what} linearization points coincide; cannot form a separation direction"
        )));
    }
    Ok(diff / norm)
}

#[allow(clippy::too_many_arguments)]
fn pair_mean_row(
    ctx_i: &CompileContext,
    vars_i: &AgentVars,
    ctx_j: &CompileContext,
    vars_j: &AgentVars,
    k: usize,
    lin: &LinearizationPoint,
    margin: f64,
    radius_i: RadiusExpr,
    radius_j: RadiusExpr,
    builder: &mut ProgramBuilder,
) -> Result<()> {
    let a = unit_direction(lin, "pair")?;
    let ta_i = theta_affine(ctx_i, k, &(ctx_i.spec.p_sel.transpose() * &a));
    let ta_j = theta_affine(ctx_j, k, &(ctx_j.spec.p_sel.transpose() * &a));

    let mut row = AffineRow {
        constant: ta_i.mean_const - ta_j.mean_const - margin,
        coeffs: Vec::with_capacity(ta_i.v_coeffs.len() + ta_j.v_coeffs.len() + 2),
    };
    let vb_i = vars_i.v_block();
    let vb_j = vars_j.v_block();
    for &(idx, v) in &ta_i.v_coeffs {
        row.coeffs.push((vb_i.offset + idx, v));
    }
    for &(idx, v) in &ta_j.v_coeffs {
        row.coeffs.push((vb_j.offset + idx, -v));
    }
    for radius in [radius_i, radius_j] {
        match radius {
            RadiusExpr::Variable(col) => row.coeffs.push((col, -1.0)),
            RadiusExpr::Fixed(r) => row.constant -= r,
        }
    }
    builder.push_nonneg_row(&row);
    Ok(())
}

fn obstacle_mean_row(
    ctx: &CompileContext,
    vars: &AgentVars,
    k: usize,
    lin: &LinearizationPoint,
    obstacle: &Obstacle,
    radius: RadiusExpr,
    builder: &mut ProgramBuilder,
) -> Result<()> {
    let a = unit_direction(lin, "obstacle")?;
    let ta = theta_affine(ctx, k, &(ctx.spec.p_sel.transpose() * &a));
    let mut row = AffineRow {
        constant: ta.mean_const - a.dot(&obstacle.center) - obstacle.radius,
        coeffs: Vec::with_capacity(ta.v_coeffs.len() + 1),
    };
    let vb = vars.v_block();
    for &(idx, v) in &ta.v_coeffs {
        row.coeffs.push((vb.offset + idx, v));
    }
    match radius {
        RadiusExpr::Variable(col) => row.coeffs.push((col, -1.0)),
        RadiusExpr::Fixed(r) => row.constant -= r,
    }
    builder.push_nonneg_row(&row);
    Ok(())
}

/// Linearized mean-separation row for a pair, with both ball radii as
/// decision variables: `a' (mu_i - mu_j) >= r_i + r_j + margin` along the
/// unit direction `a` of the linearization points.
#[allow(clippy::too_many_arguments)]
pub fn pcc_pair_mean_row(
    ctx_i: &CompileContext,
    vars_i: &AgentVars,
    ctx_j: &CompileContext,
    vars_j: &AgentVars,
    k: usize,
    lin: &LinearizationPoint,
    margin: f64,
    builder: &mut ProgramBuilder,
) -> Result<()> {
    pair_mean_row(
        ctx_i,
        vars_i,
        ctx_j,
        vars_j,
        k,
        lin,
        margin,
        RadiusExpr::Variable(vars_i.radius_coord(k)),
        RadiusExpr::Variable(vars_j.radius_coord(k)),
        builder,
    )
}

/// Linearized obstacle-clearance row with the ball radius as a variable.
pub fn pcc_obstacle_mean_row(
    ctx: &CompileContext,
    vars: &AgentVars,
    k: usize,
    lin: &LinearizationPoint,
    obstacle: &Obstacle,
    builder: &mut ProgramBuilder,
) -> Result<()> {
    obstacle_mean_row(ctx, vars, k, lin, obstacle, RadiusExpr::Variable(vars.radius_coord(k)), builder)
}

/// Pair separation row with fixed ball radii.
#[allow(clippy::too_many_arguments)]
pub fn mc_pair_mean_row(
    ctx_i: &CompileContext,
    vars_i: &AgentVars,
    ctx_j: &CompileContext,
    vars_j: &AgentVars,
    k: usize,
    lin: &LinearizationPoint,
    margin: f64,
    r_hat_i: f64,
    r_hat_j: f64,
    builder: &mut ProgramBuilder,
) -> Result<()> {
    if r_hat_i <= 0.0 || r_hat_j <= 0.0 {
        return Err(Error::Invalid("fixed ball radii must be positive".into()));
    }
    pair_mean_row(
        ctx_i,
        vars_i,
        ctx_j,
        vars_j,
        k,
        lin,
        margin,
        RadiusExpr::Fixed(r_hat_i),
        RadiusExpr::Fixed(r_hat_j),
        builder,
    )
}

/// Obstacle clearance row with a fixed ball radius.
pub fn mc_obstacle_mean_row(
    ctx: &CompileContext,
    vars: &AgentVars,
    k: usize,
    lin: &LinearizationPoint,
    obstacle: &Obstacle,
    r_hat: f64,
    builder: &mut ProgramBuilder,
) -> Result<()> {
    if r_hat <= 0.0 {
        return Err(Error::Invalid("fixed ball radius must be positive".into()));
    }
    obstacle_mean_row(ctx, vars, k, lin, obstacle, RadiusExpr::Fixed(r_hat), builder)
}
