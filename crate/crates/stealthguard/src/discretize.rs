use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Zero-order-hold discretization via the exponential of `[[A, B], [0, 0]]·Ts`.
pub fn discretize_zoh(a: &DMatrix<f64>, b: &DMatrix<f64>, ts: f64) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if !(ts > 0.0 && ts.is_finite()) {
        return Err(Error::Validation(format!("sampling period must be positive, got {ts}")));
    }
    let n = a.nrows();
    if !a.is_square() || b.nrows() != n {
        return Err(Error::Validation("A must be square with as many rows as B".into()));
    }
    let m = b.ncols();
    let mut aug = DMatrix::zeros(n + m, n + m);
    aug.view_mut((0, 0), (n, n)).copy_from(a);
    aug.view_mut((0, n), (n, m)).copy_from(b);
    let e = (aug * ts).exp();
    Ok((e.view((0, 0), (n, n)).into_owned(), e.view((0, n), (n, m)).into_owned()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn double_integrator() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let (ad, bd) = discretize_zoh(&a, &b, 0.01).unwrap();
        let want_a = DMatrix::from_row_slice(2, 2, &[1.0, 0.01, 0.0, 1.0]);
        assert!((ad - want_a).norm() < 1e-15);
        assert!((bd[(0, 0)] - 5e-5).abs() < 1e-16 && (bd[(1, 0)] - 0.01).abs() < 1e-16);
    }

    #[test]
    fn zero_dynamics() {
        let (ad, bd) = discretize_zoh(&DMatrix::zeros(2, 2), &DMatrix::from_element(2, 1, 3.0), 0.5).unwrap();
        assert_eq!(ad, DMatrix::identity(2, 2));
        assert!((bd - DMatrix::from_element(2, 1, 1.5)).norm() < 1e-15);
    }

    #[test]
    fn rejects_nonpositive_period() {
        assert!(discretize_zoh(&DMatrix::zeros(1, 1), &DMatrix::zeros(1, 1), 0.0).is_err());
    }
}
