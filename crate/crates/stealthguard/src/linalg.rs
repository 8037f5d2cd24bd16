//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{Complex, DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

pub type CMatrix = DMatrix<Complex<f64>>;

/// Relative symmetry tolerance for user-supplied matrices.
pub const SYMMETRY_TOL: f64 = 1e-9;
/// Relative PSD tolerance for Löwner comparisons.
pub const PSD_TOL: f64 = 1e-9;

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Accept `m` if it is symmetric to tolerance and return its symmetric part.
pub fn checked_symmetric(m: &DMatrix<f64>, name: &str) -> Result<DMatrix<f64>> {
    if !m.is_square() {
        return Err(Error::Validation(format!("{name} must be square, got {}x{}", m.nrows(), m.ncols())));
    }
    let asym = (m - m.transpose()).norm();
    if asym > SYMMETRY_TOL * (1.0 + m.norm()) {
        return Err(Error::Validation(format!("{name} is not symmetric (asymmetry {asym:.3e})")));
    }
    Ok(symmetrize(m))
}

pub fn sym_eigenvalues(m: &DMatrix<f64>) -> DVector<f64> {
    if m.nrows() == 0 {
        return DVector::zeros(0);
    }
    SymmetricEigen::new(symmetrize(m)).eigenvalues
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    sym_eigenvalues(m).min()
}

pub fn max_eigenvalue(m: &DMatrix<f64>) -> f64 {
    sym_eigenvalues(m).max()
}

/// `true` when `m` is PSD up to `-PSD_TOL * (1 + ‖m‖)`.
pub fn is_psd(m: &DMatrix<f64>) -> bool {
    m.nrows() == 0 || min_eigenvalue(m) >= -PSD_TOL * (1.0 + m.norm())
}

/// Löwner order `inner ⪯ outer` with the relative PSD tolerance.
pub fn lowner_leq(inner: &DMatrix<f64>, outer: &DMatrix<f64>) -> bool {
    let diff = outer - inner;
    if diff.nrows() == 0 {
        return true;
    }
    let scale = 1.0 + inner.norm().max(outer.norm());
    min_eigenvalue(&diff) >= -PSD_TOL * scale
}

pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    m.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Singular values in descending order.
pub fn singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Vec::new();
    }
    let mut s: Vec<f64> = m.singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// Numerical rank with singular values compared against `tol * max(1, σ_max)`.
pub fn rank(m: &DMatrix<f64>, tol: f64) -> usize {
    let s = singular_values(m);
    let cutoff = tol * s.first().copied().unwrap_or(0.0).max(1.0);
    s.iter().filter(|&&v| v > cutoff).count()
}

/// Orthonormal basis of the column space of `m`.
pub fn column_basis(m: &DMatrix<f64>, tol: f64) -> DMatrix<f64> {
    let n = m.nrows();
    if m.ncols() == 0 || n == 0 {
        return DMatrix::zeros(n, 0);
    }
    let svd = m.clone().svd(true, false);
    let u = svd.u.expect("requested U");
    let smax = svd.singular_values.max().max(1.0);
    let keep: Vec<usize> = (0..svd.singular_values.len()).filter(|&i| svd.singular_values[i] > tol * smax).collect();
    DMatrix::from_fn(n, keep.len(), |r, c| u[(r, keep[c])])
}

/// Singular values (descending) and matching right singular vectors of a complex
/// matrix. Rows are zero-padded so that every right singular vector is produced.
pub fn complex_svd(m: &CMatrix) -> (Vec<f64>, CMatrix) {
    let (r, c) = m.shape();
    let padded = if r < c {
        let mut p = CMatrix::zeros(c, c);
        p.view_mut((0, 0), (r, c)).copy_from(m);
        p
    } else {
        m.clone()
    };
    let svd = padded.svd(false, true);
    let vt = svd.v_t.expect("requested V^H");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let s = order.iter().map(|&i| svd.singular_values[i]).collect();
    let v = CMatrix::from_fn(c, order.len(), |row, col| vt[(order[col], row)].conj());
    (s, v)
}

/// Orthonormal basis of the null space of a complex matrix; singular values at
/// or below `tol * max(1, σ_max)` count as zero.
pub fn complex_null_space(m: &CMatrix, tol: f64) -> CMatrix {
    let c = m.ncols();
    if c == 0 {
        return CMatrix::zeros(0, 0);
    }
    if m.nrows() == 0 {
        return CMatrix::identity(c, c);
    }
    let (s, v) = complex_svd(m);
    let cutoff = tol * s.first().copied().unwrap_or(0.0).max(1.0);
    let keep: Vec<usize> = (0..c).filter(|&i| s[i] <= cutoff).collect();
    CMatrix::from_fn(c, keep.len(), |r, k| v[(r, keep[k])])
}

/// Null space spanned by the `dim` smallest right singular vectors.
pub fn complex_smallest_subspace(m: &CMatrix, dim: usize) -> CMatrix {
    let c = m.ncols();
    let (_, v) = complex_svd(m);
    CMatrix::from_fn(c, dim, |r, k| v[(r, c - dim + k)])
}

pub fn complex_rank(m: &CMatrix, tol: f64) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    let (s, _) = complex_svd(m);
    let cutoff = tol * s.first().copied().unwrap_or(0.0).max(1.0);
    s.iter().filter(|&&v| v > cutoff).count()
}

pub fn to_complex(m: &DMatrix<f64>) -> CMatrix {
    m.map(|x| Complex::new(x, 0.0))
}

/// Solve `S X = B` for symmetric positive definite `S`.
pub fn spd_solve(s: &DMatrix<f64>, b: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let chol = symmetrize(s).cholesky().ok_or_else(|| Error::Numerical(format!("{what} is not positive definite")))?;
    Ok(chol.solve(b))
}

pub fn spd_inverse(s: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let id = DMatrix::identity(s.nrows(), s.nrows());
    Ok(symmetrize(&spd_solve(s, &id, what)?))
}

/// Columns of `m` listed in `idx`.
pub fn select_columns(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), idx.len(), |r, c| m[(r, idx[c])])
}

pub fn select_rows(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), m.ncols(), |r, c| m[(idx[r], c)])
}

pub fn select_block(m: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |r, c| m[(rows[r], cols[c])])
}

/// The `p × |idx|` matrix whose columns are the unit vectors `e_i`, `i ∈ idx`.
pub fn selection(p: usize, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(p, idx.len(), |r, c| if idx[c] == r { 1.0 } else { 0.0 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lowner_examples() {
        let i2 = DMatrix::<f64>::identity(2, 2);
        assert!(lowner_leq(&(i2.clone() * 0.5), &i2));
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 0.1]));
        assert!(!lowner_leq(&d, &i2));
        assert!(lowner_leq(&d, &d));
    }

    #[test]
    fn symmetry_guard() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5 + 1e-12, 2.0]);
        assert!(checked_symmetric(&m, "m").is_ok());
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.6, 2.0]);
        assert!(checked_symmetric(&bad, "m").is_err());
    }

    #[test]
    fn null_space_of_jordan_block() {
        let n = to_complex(&DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]));
        let ns = complex_null_space(&n, 1e-9);
        assert_eq!(ns.ncols(), 1);
        assert!(ns[(1, 0)].norm() < 1e-12);
        assert!((ns[(0, 0)].norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn wide_null_space_is_complete() {
        let m = to_complex(&DMatrix::from_row_slice(1, 3, &[1.0, 1.0, 0.0]));
        assert_eq!(complex_null_space(&m, 1e-9).ncols(), 2);
    }
}
