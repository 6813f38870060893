//! Conic-program intermediate representation and embedded solver.
//!
//! Programs take the form
//!
//! ```text
//! minimize   (1/2) x' P x + c' x
//! subject to b - A x in K
//! ```
//!
//! where `K` is an ordered product of zero, nonnegative, second-order, and
//! PSD cones partitioning the rows of `A`. PSD segments cover the scaled
//! vectorization (`svec`) of a symmetric block, so every segment lives in a
//! plain Euclidean slice of the row space.
//!
//! The embedded solver is an operator-splitting (ADMM) method: each iteration
//! solves one quasi-definite linear system, reduced here to dense normal
//! equations with a cached Cholesky factor, then projects onto the shifted
//! cone `b - K`. Problems are Ruiz-equilibrated first (uniformly per SOC/PSD
//! block, so cone membership is preserved), the step size adapts on a fixed
//! iteration schedule, and all arithmetic is sequential, which makes solves
//! bit-for-bit deterministic for fixed inputs and settings.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One cone segment. `Psd(n)` covers the `n (n + 1) / 2` svec coordinates of
/// an `n x n` symmetric block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cone {
    Zero(usize),
    Nonneg(usize),
    Soc(usize),
    Psd(usize),
}

impl Cone {
    /// Number of rows the segment occupies.
    pub fn dim(&self) -> usize {
        match *self {
            Cone::Zero(d) | Cone::Nonneg(d) | Cone::Soc(d) => d,
            Cone::Psd(n) => n * (n + 1) / 2,
        }
    }
}

/// Compressed sparse row matrix; the only operations the solver needs.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    nrows: usize,
    ncols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    vals: Vec<f64>,
}

impl SparseMatrix {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        SparseMatrix { nrows, ncols, row_ptr: vec![0; nrows + 1], col_idx: Vec::new(), vals: Vec::new() }
    }

    /// Builds from (row, col, value) triplets; duplicates are summed.
    pub fn from_triplets(nrows: usize, ncols: usize, triplets: &[(usize, usize, f64)]) -> Result<Self> {
        let mut counts = vec![0usize; nrows + 1];
        for &(r, c, _) in triplets {
            if r >= nrows || c >= ncols {
                return Err(Error::Dimension(format!(
                    "triplet ({r}, {c}) outside {nrows}x{ncols}"
                )));
            }
            counts[r + 1] += 1;
        }
        for i in 0..nrows {
            counts[i + 1] += counts[i];
        }
        let mut col_idx = vec![0usize; triplets.len()];
        let mut vals = vec![0.0; triplets.len()];
        let mut cursor = counts.clone();
        for &(r, c, v) in triplets {
            let at = cursor[r];
            col_idx[at] = c;
            vals[at] = v;
            cursor[r] += 1;
        }
        // Sort each row by column and merge duplicates.
        let mut out_ptr = vec![0usize; nrows + 1];
        let mut out_col = Vec::with_capacity(triplets.len());
        let mut out_val = Vec::with_capacity(triplets.len());
        for r in 0..nrows {
            let lo = counts[r];
            let hi = counts[r + 1];
            let mut row: Vec<(usize, f64)> =
                (lo..hi).map(|k| (col_idx[k], vals[k])).collect();
            row.sort_unstable_by_key(|&(c, _)| c);
            for (c, v) in row {
                if out_col.len() > out_ptr[r] && *out_col.last().unwrap() == c {
                    *out_val.last_mut().unwrap() += v;
                } else {
                    out_col.push(c);
                    out_val.push(v);
                }
            }
            out_ptr[r + 1] = out_col.len();
        }
        Ok(SparseMatrix { nrows, ncols, row_ptr: out_ptr, col_idx: out_col, vals: out_val })
    }

    pub fn from_dense(m: &DMatrix<f64>) -> Self {
        let mut triplets = Vec::new();
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                if m[(r, c)] != 0.0 {
                    triplets.push((r, c, m[(r, c)]));
                }
            }
        }
        Self::from_triplets(m.nrows(), m.ncols(), &triplets).expect("dense conversion in range")
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        (self.row_ptr[r]..self.row_ptr[r + 1]).map(move |k| (self.col_idx[k], self.vals[k]))
    }

    pub fn triplets(&self) -> Vec<(usize, usize, f64)> {
        (0..self.nrows)
            .flat_map(|r| self.row(r).map(move |(c, v)| (r, c, v)))
            .collect()
    }

    /// `out = A x`.
    pub fn mul_vec(&self, x: &DVector<f64>, out: &mut DVector<f64>) {
        debug_assert_eq!(x.len(), self.ncols);
        debug_assert_eq!(out.len(), self.nrows);
        for r in 0..self.nrows {
            let mut acc = 0.0;
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc += self.vals[k] * x[self.col_idx[k]];
            }
            out[r] = acc;
        }
    }

    /// `out = A' y`.
    pub fn mul_vec_t(&self, y: &DVector<f64>, out: &mut DVector<f64>) {
        debug_assert_eq!(y.len(), self.nrows);
        debug_assert_eq!(out.len(), self.ncols);
        out.fill(0.0);
        for r in 0..self.nrows {
            let yr = y[r];
            if yr == 0.0 {
                continue;
            }
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                out[self.col_idx[k]] += self.vals[k] * yr;
            }
        }
    }

    /// `x' A x` for a symmetric A.
    pub fn quad_form(&self, x: &DVector<f64>) -> f64 {
        let mut ax = DVector::zeros(self.nrows);
        self.mul_vec(x, &mut ax);
        ax.dot(x)
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.nrows, self.ncols);
        for r in 0..self.nrows {
            for (c, v) in self.row(r) {
                m[(r, c)] += v;
            }
        }
        m
    }

    #[allow(clippy::needless_range_loop)]
    fn scale_rows_cols(&self, row_scale: &[f64], col_scale: &[f64]) -> SparseMatrix {
        let mut out = self.clone();
        for r in 0..self.nrows {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                out.vals[k] = self.vals[k] * row_scale[r] * col_scale[self.col_idx[k]];
            }
        }
        out
    }

    fn col_inf_norms(&self) -> Vec<f64> {
        let mut norms = vec![0.0f64; self.ncols];
        for k in 0..self.vals.len() {
            let c = self.col_idx[k];
            norms[c] = norms[c].max(self.vals[k].abs());
        }
        norms
    }

    fn row_inf_norm(&self, r: usize) -> f64 {
        self.row(r).fold(0.0f64, |a, (_, v)| a.max(v.abs()))
    }
}

/// A quadratic objective over a product of cones. See the module docs for the
/// sign convention: feasibility means `b - A x` lies in the listed cones.
#[derive(Debug, Clone)]
pub struct ConicProgram {
    pub num_vars: usize,
    pub p: SparseMatrix,
    pub c: DVector<f64>,
    pub a: SparseMatrix,
    pub b: DVector<f64>,
    pub cones: Vec<Cone>,
}

impl ConicProgram {
    pub fn num_rows(&self) -> usize {
        self.a.nrows()
    }

    /// Checks shapes, the cone partition, and that `P` admits a PSD
    /// factorization (after a tiny diagonal shift to tolerate semidefiniteness).
    pub fn validate(&self) -> Result<()> {
        self.validate_shapes()?;
        let p_dense = self.p.to_dense();
        if crate::linalg::asymmetry(&p_dense) > 1e-8 {
            return Err(Error::Invalid("P must be symmetric".into()));
        }
        let scale = p_dense.iter().fold(1.0f64, |a, &v| a.max(v.abs()));
        let shifted = &p_dense + DMatrix::identity(self.num_vars, self.num_vars) * (1e-10 * scale);
        if shifted.cholesky().is_none() {
            return Err(Error::Invalid("P must be positive semidefinite".into()));
        }
        Ok(())
    }

    /// The shape and cone-partition part of [`validate`](Self::validate),
    /// cheap enough to run on every solve.
    pub fn validate_shapes(&self) -> Result<()> {
        if self.p.nrows() != self.num_vars || self.p.ncols() != self.num_vars {
            return Err(Error::Dimension(format!(
                "P must be {0}x{0}",
                self.num_vars
            )));
        }
        if self.c.len() != self.num_vars {
            return Err(Error::Dimension("c length must equal num_vars".into()));
        }
        if self.a.ncols() != self.num_vars {
            return Err(Error::Dimension("A column count must equal num_vars".into()));
        }
        if self.b.len() != self.a.nrows() {
            return Err(Error::Dimension("b length must equal the row count of A".into()));
        }
        let cone_rows: usize = self.cones.iter().map(Cone::dim).sum();
        if cone_rows != self.a.nrows() {
            return Err(Error::Dimension(format!(
                "cone segments cover {cone_rows} rows but A has {}",
                self.a.nrows()
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&ProgramIr::from(self)).expect("IR serialization")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ir: ProgramIr =
            serde_json::from_str(text).map_err(|e| Error::Parse(format!("program IR: {e}")))?;
        ir.into_program()
    }
}

/// Stable serialized layout of [`ConicProgram`] for external-solver bridges.
pub const IR_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct SparseIr {
    nrows: usize,
    ncols: usize,
    rows: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl SparseIr {
    fn from_matrix(m: &SparseMatrix) -> Self {
        let triplets = m.triplets();
        SparseIr {
            nrows: m.nrows(),
            ncols: m.ncols(),
            rows: triplets.iter().map(|t| t.0).collect(),
            cols: triplets.iter().map(|t| t.1).collect(),
            vals: triplets.iter().map(|t| t.2).collect(),
        }
    }

    fn into_matrix(self) -> Result<SparseMatrix> {
        if self.rows.len() != self.cols.len() || self.rows.len() != self.vals.len() {
            return Err(Error::Parse("triplet arrays must have equal length".into()));
        }
        let triplets: Vec<_> = self
            .rows
            .iter()
            .zip(&self.cols)
            .zip(&self.vals)
            .map(|((&r, &c), &v)| (r, c, v))
            .collect();
        SparseMatrix::from_triplets(self.nrows, self.ncols, &triplets)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ConeIr {
    kind: String,
    dim: usize,
}

/// Versioned JSON form of a conic program.
#[derive(Debug, Serialize, Deserialize)]
pub struct ProgramIr {
    format_version: u32,
    num_vars: usize,
    p: SparseIr,
    c: Vec<f64>,
    a: SparseIr,
    b: Vec<f64>,
    cones: Vec<ConeIr>,
}

impl From<&ConicProgram> for ProgramIr {
    fn from(p: &ConicProgram) -> Self {
        ProgramIr {
            format_version: IR_FORMAT_VERSION,
            num_vars: p.num_vars,
            p: SparseIr::from_matrix(&p.p),
            c: p.c.iter().cloned().collect(),
            a: SparseIr::from_matrix(&p.a),
            b: p.b.iter().cloned().collect(),
            cones: p
                .cones
                .iter()
                .map(|c| match *c {
                    Cone::Zero(d) => ConeIr { kind: "zero".into(), dim: d },
                    Cone::Nonneg(d) => ConeIr { kind: "nonneg".into(), dim: d },
                    Cone::Soc(d) => ConeIr { kind: "soc".into(), dim: d },
                    Cone::Psd(n) => ConeIr { kind: "psd".into(), dim: n },
                })
                .collect(),
        }
    }
}

impl ProgramIr {
    fn into_program(self) -> Result<ConicProgram> {
        if self.format_version != IR_FORMAT_VERSION {
            return Err(Error::Parse(format!(
                "unsupported program IR version {} (expected {IR_FORMAT_VERSION})",
                self.format_version
            )));
        }
        let cones = self
            .cones
            .into_iter()
            .map(|c| match c.kind.as_str() {
                "zero" => Ok(Cone::Zero(c.dim)),
                "nonneg" => Ok(Cone::Nonneg(c.dim)),
                "soc" => Ok(Cone::Soc(c.dim)),
                "psd" => Ok(Cone::Psd(c.dim)),
                other => Err(Error::Parse(format!("unknown cone kind {other:?}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        let program = ConicProgram {
            num_vars: self.num_vars,
            p: self.p.into_matrix()?,
            c: DVector::from_vec(self.c),
            a: self.a.into_matrix()?,
            b: DVector::from_vec(self.b),
            cones,
        };
        program.validate()?;
        Ok(program)
    }
}

/// Scaled vectorization of a symmetric matrix: lower triangle, column by
/// column, off-diagonal entries multiplied by sqrt(2) so that
/// `<X, Y>_F = svec(X)' svec(Y)`.
pub fn svec(m: &DMatrix<f64>) -> DVector<f64> {
    let n = m.nrows();
    assert_eq!(n, m.ncols(), "svec needs a square matrix");
    let mut out = DVector::zeros(n * (n + 1) / 2);
    let mut at = 0;
    for j in 0..n {
        for i in j..n {
            out[at] = if i == j { m[(i, j)] } else { m[(i, j)] * std::f64::consts::SQRT_2 };
            at += 1;
        }
    }
    out
}

/// Inverse of [`svec`].
pub fn smat(v: &DVector<f64>) -> DMatrix<f64> {
    let len = v.len();
    let n = ((((8 * len + 1) as f64).sqrt() as usize) - 1) / 2;
    assert_eq!(n * (n + 1) / 2, len, "svec length must be triangular");
    let mut m = DMatrix::zeros(n, n);
    let mut at = 0;
    for j in 0..n {
        for i in j..n {
            if i == j {
                m[(i, j)] = v[at];
            } else {
                let x = v[at] / std::f64::consts::SQRT_2;
                m[(i, j)] = x;
                m[(j, i)] = x;
            }
            at += 1;
        }
    }
    m
}

/// Side length of the symmetric matrix a svec slice of length `len` encodes.
pub fn smat_side(len: usize) -> usize {
    ((((8 * len + 1) as f64).sqrt() as usize) - 1) / 2
}

fn project_cone_slice(cone: &Cone, v: &mut [f64]) {
    match *cone {
        Cone::Zero(_) => v.fill(0.0),
        Cone::Nonneg(_) => {
            for x in v.iter_mut() {
                if *x < 0.0 {
                    *x = 0.0;
                }
            }
        }
        Cone::Soc(d) => {
            if d == 0 {
                return;
            }
            let t = v[0];
            let norm = v[1..].iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm <= t {
                // inside
            } else if norm <= -t {
                v.fill(0.0);
            } else {
                let alpha = 0.5 * (t + norm);
                v[0] = alpha;
                let scale = alpha / norm;
                for x in v[1..].iter_mut() {
                    *x *= scale;
                }
            }
        }
        Cone::Psd(n) => {
            let vec = DVector::from_column_slice(v);
            let m = smat(&vec);
            let mut eig = m.symmetric_eigen();
            for lam in eig.eigenvalues.iter_mut() {
                if *lam < 0.0 {
                    *lam = 0.0;
                }
            }
            let mut scaled = eig.eigenvectors.clone();
            for j in 0..n {
                scaled.column_mut(j).scale_mut(eig.eigenvalues[j]);
            }
            let proj = scaled * eig.eigenvectors.transpose();
            v.copy_from_slice(svec(&proj).as_slice());
        }
    }
}

/// Euclidean projection onto a cone segment.
pub fn project_cone(cone: &Cone, v: &DVector<f64>) -> DVector<f64> {
    assert_eq!(v.len(), cone.dim(), "projection input must match the segment");
    let mut out = v.clone();
    project_cone_slice(cone, out.as_mut_slice());
    out
}

/// Projection onto the dual cone (zero segments have free duals; the other
/// three cones are self-dual).
pub fn project_dual_cone(cone: &Cone, v: &DVector<f64>) -> DVector<f64> {
    match cone {
        Cone::Zero(_) => v.clone(),
        _ => project_cone(cone, v),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Optimal,
    MaxIter,
    /// A certificate heuristic fired: covers both primal infeasibility and
    /// unboundedness (dual infeasibility).
    Infeasible,
}

#[derive(Debug, Clone)]
pub struct ConicSolution {
    pub x: DVector<f64>,
    /// Multipliers for `b - A x in K`, one per row, in the dual cone.
    pub y_dual: DVector<f64>,
    /// Slack `b - A x` at the returned primal point.
    pub s: DVector<f64>,
    pub status: SolveStatus,
    pub primal_res: f64,
    pub dual_res: f64,
    pub gap: f64,
    pub iterations: usize,
}

impl ConicSolution {
    pub fn objective(&self, prog: &ConicProgram) -> f64 {
        0.5 * prog.p.quad_form(&self.x) + prog.c.dot(&self.x)
    }
}

#[derive(Debug, Clone)]
pub struct SolverSettings {
    pub eps_abs: f64,
    pub eps_rel: f64,
    pub eps_gap: f64,
    pub max_iter: usize,
    /// Over-relaxation parameter.
    pub alpha: f64,
    /// Proximal regularization on the primal block.
    pub sigma: f64,
    /// Initial step size; zero-cone rows use `rho * rho_eq_scale`.
    pub rho: f64,
    pub rho_eq_scale: f64,
    pub adaptive_rho: bool,
    /// Ruiz equilibration sweeps (0 disables scaling).
    pub scaling_iters: usize,
    /// Residual-check cadence after the first ten iterations.
    pub check_every: usize,
    /// Relative threshold for the infeasibility certificates.
    pub eps_infeas: f64,
    /// Prints residuals at every check to stderr.
    pub verbose: bool,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings {
            eps_abs: 1e-7,
            eps_rel: 1e-7,
            eps_gap: 1e-6,
            max_iter: 50_000,
            alpha: 1.6,
            sigma: 1e-6,
            rho: 0.1,
            rho_eq_scale: 1e3,
            adaptive_rho: true,
            scaling_iters: 10,
            check_every: 25,
            eps_infeas: 1e-8,
            verbose: false,
        }
    }
}

/// Primal/dual iterates to resume from (typically the previous round's
/// solution of a re-linearized problem).
#[derive(Debug, Clone)]
pub struct WarmStart {
    pub x: DVector<f64>,
    pub y: DVector<f64>,
}

struct Scaling {
    d: DVector<f64>,
    e: DVector<f64>,
    gamma: f64,
}

/// Ruiz equilibration over the KKT block structure, keeping one scalar per
/// SOC/PSD segment so the scaled rows still live in the same cone.
fn equilibrate(prog: &ConicProgram, iters: usize) -> (SparseMatrix, SparseMatrix, DVector<f64>, DVector<f64>, Scaling) {
    let n = prog.num_vars;
    let m = prog.num_rows();
    let mut d = DVector::from_element(n, 1.0);
    let mut e = DVector::from_element(m, 1.0);
    let mut p = prog.p.clone();
    let mut a = prog.a.clone();

    // Row ranges of each cone segment, for the blockwise uniformization.
    let mut segments = Vec::with_capacity(prog.cones.len());
    let mut at = 0;
    for cone in &prog.cones {
        segments.push((at, at + cone.dim(), matches!(cone, Cone::Soc(_) | Cone::Psd(_))));
        at += cone.dim();
    }

    for _ in 0..iters {
        let p_cols = p.col_inf_norms();
        let a_cols = a.col_inf_norms();
        let mut dd = vec![1.0f64; n];
        for j in 0..n {
            let norm = p_cols[j].max(a_cols[j]);
            if norm > 1e-12 {
                dd[j] = 1.0 / norm.sqrt();
            }
        }
        let mut ee = vec![1.0f64; m];
        for &(lo, hi, uniform) in &segments {
            if uniform {
                let norm = (lo..hi).fold(0.0f64, |acc, r| acc.max(a.row_inf_norm(r)));
                let s = if norm > 1e-12 { 1.0 / norm.sqrt() } else { 1.0 };
                for item in ee.iter_mut().take(hi).skip(lo) {
                    *item = s;
                }
            } else {
                for (r, item) in ee.iter_mut().enumerate().take(hi).skip(lo) {
                    let norm = a.row_inf_norm(r);
                    if norm > 1e-12 {
                        *item = 1.0 / norm.sqrt();
                    }
                }
            }
        }
        p = p.scale_rows_cols(&dd, &dd);
        a = a.scale_rows_cols(&ee, &dd);
        for j in 0..n {
            d[j] *= dd[j];
        }
        for r in 0..m {
            e[r] *= ee[r];
        }
    }

    // Cost scaling, from the average column norm of the scaled P and the
    // scaled linear cost.
    let mut gamma = 1.0;
    if iters > 0 {
        let p_cols = p.col_inf_norms();
        let mean_p = if n > 0 { p_cols.iter().sum::<f64>() / n as f64 } else { 0.0 };
        let q_norm = (0..n).fold(0.0f64, |acc, j| acc.max((prog.c[j] * d[j]).abs()));
        let denom = mean_p.max(q_norm).max(1e-12);
        gamma = 1.0 / denom.clamp(1.0, 1e12);
        if !gamma.is_finite() || gamma <= 0.0 {
            gamma = 1.0;
        }
        for v in p.vals.iter_mut() {
            *v *= gamma;
        }
    }

    let c_hat = DVector::from_fn(n, |j, _| prog.c[j] * d[j] * gamma);
    let b_hat = DVector::from_fn(m, |r, _| prog.b[r] * e[r]);
    (p, a, c_hat, b_hat, Scaling { d, e, gamma })
}

#[allow(clippy::needless_range_loop)]
fn build_normal_matrix(p: &SparseMatrix, a: &SparseMatrix, sigma: f64, rho: &[f64]) -> DMatrix<f64> {
    let n = p.nrows();
    let mut m = DMatrix::zeros(n, n);
    for r in 0..n {
        for (c, v) in p.row(r) {
            m[(r, c)] += v;
        }
        m[(r, r)] += sigma;
    }
    for r in 0..a.nrows() {
        let w = rho[r];
        let lo = a.row_ptr[r];
        let hi = a.row_ptr[r + 1];
        for k1 in lo..hi {
            let (c1, v1) = (a.col_idx[k1], a.vals[k1]);
            let wv1 = w * v1;
            for k2 in lo..hi {
                m[(c1, a.col_idx[k2])] += wv1 * a.vals[k2];
            }
        }
    }
    m
}

fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0f64, |a, &x| a.max(x.abs()))
}

/// Solves the program, optionally resuming from a warm start.
pub fn solve(
    prog: &ConicProgram,
    settings: &SolverSettings,
    warm: Option<&WarmStart>,
) -> Result<ConicSolution> {
    prog.validate_shapes()?;
    let n = prog.num_vars;
    let m = prog.num_rows();
    let (p_hat, a_hat, c_hat, b_hat, scaling) = equilibrate(prog, settings.scaling_iters);

    // Per-row step sizes: uniform inside each segment, boosted on zero cones.
    let mut rho_base = settings.rho;
    let rho_vec = |base: f64| -> Vec<f64> {
        let mut rho = vec![base; m];
        let mut at = 0;
        for cone in &prog.cones {
            if matches!(cone, Cone::Zero(_)) {
                for item in rho.iter_mut().skip(at).take(cone.dim()) {
                    *item = base * settings.rho_eq_scale;
                }
            }
            at += cone.dim();
        }
        rho
    };
    let mut rho = rho_vec(rho_base);

    let mut factor = build_normal_matrix(&p_hat, &a_hat, settings.sigma, &rho)
        .cholesky()
        .ok_or_else(|| Error::Solver("normal-equation matrix is not positive definite".into()))?;

    // Scaled iterates.
    let mut x = DVector::zeros(n);
    let mut z = DVector::zeros(m);
    let mut y = DVector::zeros(m);
    if let Some(w) = warm {
        if w.x.len() != n || w.y.len() != m {
            return Err(Error::Dimension("warm start shape mismatch".into()));
        }
        for j in 0..n {
            x[j] = w.x[j] / scaling.d[j];
        }
        for r in 0..m {
            y[r] = w.y[r] * scaling.gamma / scaling.e[r];
        }
        a_hat.mul_vec(&x, &mut z);
        // Put z inside the shifted cone so the first dual step is consistent.
        project_shifted(&prog.cones, &b_hat, &mut z);
    }

    let mut x_prev_cert = x.clone();
    let mut y_prev_cert = y.clone();

    let mut x_tilde = DVector::zeros(n);
    let mut z_tilde = DVector::zeros(m);
    let mut rhs = DVector::zeros(n);
    let mut work_m = DVector::zeros(m);
    let mut work_n = DVector::zeros(n);
    let mut w = DVector::zeros(m);
    let mut z_next = DVector::zeros(m);

    let alpha = settings.alpha;
    let mut iterations = 0;
    let mut status = SolveStatus::MaxIter;
    let (mut primal_res, mut dual_res, mut gap) = (f64::INFINITY, f64::INFINITY, f64::INFINITY);
    let mut next_rho_update = 50usize;

    while iterations < settings.max_iter {
        iterations += 1;

        // Linear step: (P + sigma I + A' diag(rho) A) x~ = sigma x - c + A'(rho z - y).
        for r in 0..m {
            work_m[r] = rho[r] * z[r] - y[r];
        }
        a_hat.mul_vec_t(&work_m, &mut rhs);
        for j in 0..n {
            rhs[j] += settings.sigma * x[j] - c_hat[j];
        }
        x_tilde.copy_from(&rhs);
        factor.solve_mut(&mut x_tilde);
        a_hat.mul_vec(&x_tilde, &mut z_tilde);

        // Over-relaxed primal and projected slack updates.
        for j in 0..n {
            x[j] = alpha * x_tilde[j] + (1.0 - alpha) * x[j];
        }
        for r in 0..m {
            w[r] = alpha * z_tilde[r] + (1.0 - alpha) * z[r];
            z_next[r] = w[r] + y[r] / rho[r];
        }
        project_shifted(&prog.cones, &b_hat, &mut z_next);
        for r in 0..m {
            y[r] += rho[r] * (w[r] - z_next[r]);
        }
        std::mem::swap(&mut z, &mut z_next);

        let check_now = iterations <= 10 || iterations % settings.check_every == 0;
        if !check_now {
            continue;
        }

        // Unscaled residuals.
        a_hat.mul_vec(&x, &mut work_m);
        let mut ax_norm = 0.0f64;
        let mut z_norm = 0.0f64;
        let mut rp = 0.0f64;
        for r in 0..m {
            let ax_u = work_m[r] / scaling.e[r];
            let z_u = z[r] / scaling.e[r];
            ax_norm = ax_norm.max(ax_u.abs());
            z_norm = z_norm.max(z_u.abs());
            rp = rp.max((ax_u - z_u).abs());
        }
        let mut px = DVector::zeros(n);
        p_hat.mul_vec(&x, &mut px);
        a_hat.mul_vec_t(&y, &mut work_n);
        let mut px_norm = 0.0f64;
        let mut aty_norm = 0.0f64;
        let mut q_norm = 0.0f64;
        let mut rd = 0.0f64;
        for j in 0..n {
            let unscale = 1.0 / (scaling.d[j] * scaling.gamma);
            let px_u = px[j] * unscale;
            let aty_u = work_n[j] * unscale;
            let q_u = c_hat[j] * unscale;
            px_norm = px_norm.max(px_u.abs());
            aty_norm = aty_norm.max(aty_u.abs());
            q_norm = q_norm.max(q_u.abs());
            rd = rd.max((px_u + q_u + aty_u).abs());
        }
        primal_res = rp;
        dual_res = rd;

        let eps_p = settings.eps_abs + settings.eps_rel * ax_norm.max(z_norm);
        let eps_d = settings.eps_abs + settings.eps_rel * px_norm.max(q_norm).max(aty_norm);

        if settings.verbose {
            let mut fam = [0.0f64; 4];
            let mut at = 0;
            for cone in &prog.cones {
                let idx = match cone {
                    Cone::Zero(_) => 0,
                    Cone::Nonneg(_) => 1,
                    Cone::Soc(_) => 2,
                    Cone::Psd(_) => 3,
                };
                for r in at..at + cone.dim() {
                    let res = ((work_m[r] - z[r]) / scaling.e[r]).abs();
                    fam[idx] = fam[idx].max(res);
                }
                at += cone.dim();
            }
            eprintln!(
                "iter {iterations:>6}  rp {rp:.3e} (eps {eps_p:.1e})  rd {rd:.3e} (eps {eps_d:.1e})  rho {rho_base:.2e}  rp[zero {:.1e} nonneg {:.1e} soc {:.1e} psd {:.1e}]",
                fam[0], fam[1], fam[2], fam[3]
            );
        }

        if rp <= eps_p && rd <= eps_d {
            // Objective gap on the unscaled iterates.
            let x_u = unscale_x(&x, &scaling);
            let y_u = unscale_y(&y, &scaling);
            let quad = prog.p.quad_form(&x_u);
            let p_obj = 0.5 * quad + prog.c.dot(&x_u);
            let d_obj = -0.5 * quad - prog.b.dot(&y_u);
            gap = (p_obj - d_obj).abs();
            if gap <= settings.eps_gap * p_obj.abs().max(d_obj.abs()).max(1.0) {
                status = SolveStatus::Optimal;
                break;
            }
        }

        // Infeasibility certificates from the iterate increments.
        let dy = &y - &y_prev_cert;
        let dx = &x - &x_prev_cert;
        if certify_primal_infeasible(prog, &scaling, &a_hat, &dy, settings.eps_infeas)
            || certify_dual_infeasible(prog, &scaling, &p_hat, &a_hat, &dx, settings.eps_infeas)
        {
            status = SolveStatus::Infeasible;
            break;
        }
        x_prev_cert.copy_from(&x);
        y_prev_cert.copy_from(&y);

        // Step-size adaptation on a fixed iteration schedule keeps runs
        // deterministic; refactorization happens only when rho moves.
        if settings.adaptive_rho && iterations >= next_rho_update {
            next_rho_update *= 2;
            let pr = rp / ax_norm.max(z_norm).max(1e-12);
            let dr = rd / px_norm.max(q_norm).max(aty_norm).max(1e-12);
            let ratio = (pr / dr.max(1e-18)).sqrt();
            if !(0.2..=5.0).contains(&ratio) {
                rho_base = (rho_base * ratio).clamp(1e-6, 1e6);
                rho = rho_vec(rho_base);
                factor = build_normal_matrix(&p_hat, &a_hat, settings.sigma, &rho)
                    .cholesky()
                    .ok_or_else(|| {
                        Error::Solver("normal-equation matrix lost positive definiteness".into())
                    })?;
            }
        }
    }

    let x_u = unscale_x(&x, &scaling);
    let y_u = unscale_y(&y, &scaling);
    let mut ax = DVector::zeros(m);
    prog.a.mul_vec(&x_u, &mut ax);
    let s = &prog.b - &ax;
    if status == SolveStatus::Optimal {
        let quad = prog.p.quad_form(&x_u);
        let p_obj = 0.5 * quad + prog.c.dot(&x_u);
        let d_obj = -0.5 * quad - prog.b.dot(&y_u);
        gap = (p_obj - d_obj).abs();
    }
    Ok(ConicSolution {
        x: x_u,
        y_dual: y_u,
        s,
        status,
        primal_res,
        dual_res,
        gap,
        iterations,
    })
}

fn unscale_x(x: &DVector<f64>, scaling: &Scaling) -> DVector<f64> {
    DVector::from_fn(x.len(), |j, _| x[j] * scaling.d[j])
}

fn unscale_y(y: &DVector<f64>, scaling: &Scaling) -> DVector<f64> {
    DVector::from_fn(y.len(), |r, _| y[r] * scaling.e[r] / scaling.gamma)
}

/// Projects `z` onto the shifted cone `{z : b - z in K}`, segment by segment.
fn project_shifted(cones: &[Cone], b: &DVector<f64>, z: &mut DVector<f64>) {
    let mut at = 0;
    for cone in cones {
        let d = cone.dim();
        let mut seg: Vec<f64> = (0..d).map(|i| b[at + i] - z[at + i]).collect();
        project_cone_slice(cone, &mut seg);
        for i in 0..d {
            z[at + i] = b[at + i] - seg[i];
        }
        at += d;
    }
}

fn certify_primal_infeasible(
    prog: &ConicProgram,
    scaling: &Scaling,
    a_hat: &SparseMatrix,
    dy: &DVector<f64>,
    eps: f64,
) -> bool {
    let m = dy.len();
    let dy_u = DVector::from_fn(m, |r, _| dy[r] * scaling.e[r] / scaling.gamma);
    let norm = inf_norm(&dy_u);
    if norm <= 1e-12 {
        return false;
    }
    let dy_n = &dy_u / norm;
    // A' dy ~ 0 (computed in scaled space then unscaled).
    let mut aty = DVector::zeros(prog.num_vars);
    let dy_scaled = DVector::from_fn(m, |r, _| dy_n[r] * scaling.e[r]);
    a_hat.mul_vec_t(&dy_scaled, &mut aty);
    let aty_u = DVector::from_fn(prog.num_vars, |j, _| aty[j] / scaling.d[j]);
    if inf_norm(&aty_u) > eps {
        return false;
    }
    // Support function of the shifted cone: b' dy with dy in the dual cone.
    if prog.b.dot(&dy_n) > -eps {
        return false;
    }
    let mut at = 0;
    for cone in &prog.cones {
        let d = cone.dim();
        let seg = DVector::from_fn(d, |i, _| dy_n[at + i]);
        let proj = project_dual_cone(cone, &seg);
        if (proj - seg).amax() > eps {
            return false;
        }
        at += d;
    }
    true
}

fn certify_dual_infeasible(
    prog: &ConicProgram,
    scaling: &Scaling,
    p_hat: &SparseMatrix,
    a_hat: &SparseMatrix,
    dx: &DVector<f64>,
    eps: f64,
) -> bool {
    let n = dx.len();
    let dx_u = DVector::from_fn(n, |j, _| dx[j] * scaling.d[j]);
    let norm = inf_norm(&dx_u);
    if norm <= 1e-12 {
        return false;
    }
    let dx_n = &dx_u / norm;
    let dx_scaled = DVector::from_fn(n, |j, _| dx_n[j] / scaling.d[j]);
    let mut px = DVector::zeros(n);
    p_hat.mul_vec(&dx_scaled, &mut px);
    let px_u = DVector::from_fn(n, |j, _| px[j] / (scaling.d[j] * scaling.gamma));
    if inf_norm(&px_u) > eps {
        return false;
    }
    if prog.c.dot(&dx_n) > -eps {
        return false;
    }
    // A dx must be a recession direction of {z : b - z in K}: -A dx in K.
    let mut adx = DVector::zeros(prog.num_rows());
    a_hat.mul_vec(&dx_scaled, &mut adx);
    let adx_u = DVector::from_fn(prog.num_rows(), |r, _| adx[r] / scaling.e[r]);
    let mut at = 0;
    for cone in &prog.cones {
        let d = cone.dim();
        let seg = DVector::from_fn(d, |i, _| -adx_u[at + i]);
        match cone {
            Cone::Zero(_) => {
                if seg.amax() > eps {
                    return false;
                }
            }
            _ => {
                let proj = project_cone(cone, &seg);
                if (proj - seg).amax() > eps {
                    return false;
                }
            }
        }
        at += d;
    }
    true
}

/// Contract for plugging a different conic solver behind the same IR.
/// Implementations must honor the [`ConicProgram`] sign conventions and fill
/// the same solution fields; the serialized form in [`ProgramIr`] is the
/// stable process-boundary layout.
pub trait ExternalConicSolver {
    fn solve(&self, prog: &ConicProgram, settings: &SolverSettings) -> Result<ConicSolution>;
}

/// The embedded solver exposed through the external-solver contract.
pub struct EmbeddedSolver;

impl ExternalConicSolver for EmbeddedSolver {
    fn solve(&self, prog: &ConicProgram, settings: &SolverSettings) -> Result<ConicSolution> {
        solve(prog, settings, None)
    }
}
