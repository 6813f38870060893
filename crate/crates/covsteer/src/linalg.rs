//! Small dense linear-algebra helpers shared across modules.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Forces exact symmetry by averaging with the transpose.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Largest absolute asymmetry |M - Mᵀ|_∞.
pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_symmetric_eigenvalue(m: &DMatrix<f64>) -> f64 {
    symmetrize(m)
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .fold(f64::INFINITY, |a, &b| a.min(b))
}

/// Largest eigenvalue of a symmetric matrix.
pub fn max_symmetric_eigenvalue(m: &DMatrix<f64>) -> f64 {
    symmetrize(m)
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .fold(f64::NEG_INFINITY, |a, &b| a.max(b))
}

/// Symmetric positive-semidefinite square root via eigendecomposition.
///
/// Eigenvalues below `1e-12` are clipped to zero, so PSD-but-singular inputs
/// (for example a zero noise covariance) are accepted. Returns an error when
/// the matrix is materially indefinite or not symmetric.
pub fn sqrt_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if m.nrows() != m.ncols() {
        return Err(Error::Dimension(format!(
            "sqrt_psd expects a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if asymmetry(m) > 1e-8 {
        return Err(Error::Invalid("sqrt_psd input is not symmetric".into()));
    }
    let eig = symmetrize(m).symmetric_eigen();
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, &b| a.max(b.abs()));
    let mut roots = eig.eigenvalues.clone();
    for lam in roots.iter_mut() {
        if *lam < -1e-8 * scale {
            return Err(Error::Invalid(format!(
                "sqrt_psd input has negative eigenvalue {lam:.3e}"
            )));
        }
        *lam = if *lam < 1e-12 { 0.0 } else { lam.sqrt() };
    }
    let v = &eig.eigenvectors;
    let mut root = v.clone();
    for (j, lam) in roots.iter().enumerate() {
        root.column_mut(j).scale_mut(*lam);
    }
    Ok(&root * v.transpose())
}

/// Inverse of the symmetric square root of a positive definite matrix.
pub fn inv_sqrt_spd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if m.nrows() != m.ncols() {
        return Err(Error::Dimension(format!(
            "inv_sqrt_spd expects a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if asymmetry(m) > 1e-8 {
        return Err(Error::Invalid("inv_sqrt_spd input is not symmetric".into()));
    }
    let eig = symmetrize(m).symmetric_eigen();
    let scale = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let mut roots = eig.eigenvalues.clone();
    for lam in roots.iter_mut() {
        if *lam <= 1e-12 * scale.max(1.0) {
            return Err(Error::Invalid(format!(
                "inv_sqrt_spd input has non-positive eigenvalue {lam:.3e}"
            )));
        }
        *lam = 1.0 / lam.sqrt();
    }
    let v = &eig.eigenvectors;
    let mut root = v.clone();
    for (j, lam) in roots.iter().enumerate() {
        root.column_mut(j).scale_mut(*lam);
    }
    Ok(&root * v.transpose())
}

/// Block-diagonal assembly of square blocks.
pub fn block_diag(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), (b.nrows(), b.ncols())).copy_from(b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

/// Horizontal concatenation [A | B].
pub fn hcat(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    assert_eq!(a.nrows(), b.nrows(), "hcat row mismatch");
    let mut out = DMatrix::zeros(a.nrows(), a.ncols() + b.ncols());
    out.view_mut((0, 0), (a.nrows(), a.ncols())).copy_from(a);
    out.view_mut((0, a.ncols()), (b.nrows(), b.ncols())).copy_from(b);
    out
}

/// Stacks vectors end to end.
pub fn vcat_vec(parts: &[DVector<f64>]) -> DVector<f64> {
    let len: usize = parts.iter().map(|p| p.len()).sum();
    let mut out = DVector::zeros(len);
    let mut r = 0;
    for p in parts {
        out.rows_mut(r, p.len()).copy_from(p);
        r += p.len();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn sqrt_psd_recovers_matrix() {
        let a = DMatrix::from_row_slice(3, 3, &[2.0, 1.0, 0.0, 1.0, 3.0, 0.5, 0.0, 0.5, 1.5]);
        let m = &a * a.transpose();
        let r = sqrt_psd(&m).unwrap();
        assert_relative_eq!(&r * &r, m, epsilon = 1e-10);
        assert!(asymmetry(&r) < 1e-12);
    }

    #[test]
    fn sqrt_psd_accepts_singular() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let r = sqrt_psd(&m).unwrap();
        assert_relative_eq!(&r * &r, m, epsilon = 1e-12);
        let z = DMatrix::zeros(3, 3);
        assert_eq!(sqrt_psd(&z).unwrap(), z);
    }

    #[test]
    fn sqrt_psd_rejects_indefinite() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(sqrt_psd(&m).is_err());
    }

    #[test]
    fn inv_sqrt_spd_inverts_root() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 0.5]);
        let m = &a * a.transpose();
        let r = inv_sqrt_spd(&m).unwrap();
        assert_relative_eq!(&r * &m * &r, DMatrix::identity(2, 2), epsilon = 1e-10);
        let singular = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        assert!(inv_sqrt_spd(&singular).is_err());
    }

    #[test]
    fn block_diag_layout() {
        let a = DMatrix::identity(2, 2);
        let b = DMatrix::from_element(1, 1, 5.0);
        let d = block_diag(&[a, b]);
        assert_eq!(d.nrows(), 3);
        assert_eq!(d[(2, 2)], 5.0);
        assert_eq!(d[(0, 2)], 0.0);
    }
}
