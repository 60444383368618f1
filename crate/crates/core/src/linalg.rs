//! Small dense linear-algebra helpers shared across modules.

use nalgebra::{DMatrix, SMatrix, SymmetricEigen};

use crate::error::{Error, Result};

/// `(m + mᵀ) / 2`, in place.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

/// Largest absolute asymmetry relative to the largest absolute entry.
pub fn relative_asymmetry(m: &DMatrix<f64>) -> f64 {
    let scale = m.amax().max(f64::MIN_POSITIVE);
    let mut worst: f64 = 0.0;
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst / scale
}

/// Positive-definiteness test: a plain Cholesky factorization with no slack.
pub fn is_positive_definite(m: &DMatrix<f64>) -> bool {
    m.nrows() == 0 || m.clone().cholesky().is_some()
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    SymmetricEigen::new(m.clone()).eigenvalues.min()
}

/// Scale used for the PSD tolerance `λ_min ≥ −tol · scale`.
pub fn trace_scale(m: &DMatrix<f64>) -> f64 {
    m.diagonal().iter().map(|v| v.abs()).sum::<f64>().max(1.0)
}

/// Checks that a symmetric matrix is PSD within `tol` relative to its trace.
pub fn check_psd(m: &DMatrix<f64>, tol: f64, what: &str) -> Result<()> {
    let lambda = min_eigenvalue(m);
    if lambda >= -tol * trace_scale(m) {
        Ok(())
    } else {
        Err(Error::numerical(format!(
            "{what} is not positive semidefinite (min eigenvalue {lambda:e})"
        )))
    }
}

/// Square-root factor `L` with `L Lᵀ = m` for a symmetric PSD matrix.
///
/// Works for singular matrices (including zero), where a plain Cholesky
/// factorization would fail. Negative eigenvalues beyond `tol · trace` are an
/// error; smaller ones are clipped to zero.
pub fn psd_sqrt<const N: usize>(m: &SMatrix<f64, N, N>, tol: f64) -> Result<SMatrix<f64, N, N>> {
    let dynamic = DMatrix::from_column_slice(N, N, m.as_slice());
    let root = psd_sqrt_dyn(&dynamic, tol)?;
    Ok(SMatrix::from_column_slice(root.as_slice()))
}

pub fn psd_sqrt_dyn(m: &DMatrix<f64>, tol: f64) -> Result<DMatrix<f64>> {
    let n = m.nrows();
    let eig = SymmetricEigen::new(m.clone());
    let scale = trace_scale(m);
    let mut out = eig.eigenvectors;
    for (k, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda < -tol * scale {
            return Err(Error::config(format!(
                "covariance is not positive semidefinite (eigenvalue {lambda:e})"
            )));
        }
        let s = lambda.max(0.0).sqrt();
        for r in 0..n {
            out[(r, k)] *= s;
        }
    }
    Ok(out)
}

/// Clips eigenvalues below `floor` up to `floor` and rebuilds the matrix.
pub fn eigenvalue_floor(m: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    if eig.eigenvalues.min() >= floor {
        return m.clone();
    }
    let clipped = eig.eigenvalues.map(|v| v.max(floor));
    let mut out = &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
    symmetrize(&mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Matrix2;

    #[test]
    fn psd_sqrt_handles_singular_and_zero() {
        let zero = Matrix2::<f64>::zeros();
        assert_eq!(psd_sqrt(&zero, 1e-12).unwrap(), zero);

        let singular = Matrix2::new(1.0 / 3.0, 0.1, 0.1, 0.03);
        let l = psd_sqrt(&singular, 1e-12).unwrap();
        assert!((l * l.transpose() - singular).amax() < 1e-12);
    }

    #[test]
    fn psd_sqrt_rejects_indefinite() {
        let m = Matrix2::new(1.0, 2.0, 2.0, 1.0);
        assert!(psd_sqrt(&m, 1e-12).is_err());
    }

    #[test]
    fn floor_lifts_small_eigenvalues() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let f = eigenvalue_floor(&m, 1e-10);
        assert!(min_eigenvalue(&f) >= 1e-10 * 0.999);
        assert!((f - m).amax() < 1e-9);
    }
}
