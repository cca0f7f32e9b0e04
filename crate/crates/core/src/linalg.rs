use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

/// Reciprocal condition threshold below which a normal matrix is treated as singular.
const RCOND_TOL: f64 = 1e-12;

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// `||m - m'||_F / ||m||_F` (zero for the zero matrix).
pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    let norm = m.norm();
    if norm == 0.0 {
        0.0
    } else {
        (m - m.transpose()).norm() / norm
    }
}

/// Smallest eigenvalue of the symmetric part of `m`.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> Result<f64> {
    if !m.is_square() {
        return Err(Error::shape("square matrix", format!("{:?}", m.shape())));
    }
    if m.nrows() == 0 {
        return Ok(0.0);
    }
    let eig = SymmetricEigen::try_new(symmetrize(m), f64::EPSILON, 0)
        .ok_or_else(|| Error::SvdFailure("symmetric eigendecomposition did not converge".into()))?;
    Ok(eig.eigenvalues.min())
}

/// Inverse of a small normal matrix, refusing near-singular input.
pub fn invert_normal(m: &DMatrix<f64>, context: &str) -> Result<DMatrix<f64>> {
    if m.nrows() == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::singular(context));
    }
    let sv = m.clone().singular_values();
    let max = sv.max();
    if max == 0.0 || sv.min() <= RCOND_TOL * max {
        return Err(Error::singular(context));
    }
    m.clone().try_inverse().ok_or_else(|| Error::singular(context))
}

/// Inverse square root of a symmetric positive definite matrix.
pub fn inverse_sqrt_spd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::try_new(symmetrize(m), f64::EPSILON, 0)
        .ok_or_else(|| Error::SvdFailure("symmetric eigendecomposition did not converge".into()))?;
    if eig.eigenvalues.iter().any(|&l| l <= 1e-12) {
        return Err(Error::DegenerateDoF("leverage block has eigenvalue at or above one".into()));
    }
    let scale = eig.eigenvalues.map(|l| 1.0 / l.sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&scale) * eig.eigenvectors.transpose())
}

/// `x' m x` for a vector and matrix.
pub fn quad_form(m: &DMatrix<f64>, x: &[f64]) -> f64 {
    let n = x.len();
    let mut total = 0.0;
    for j in 0..n {
        if x[j] == 0.0 {
            continue;
        }
        let col = m.column(j);
        let mut s = 0.0;
        for i in 0..n {
            s += x[i] * col[i];
        }
        total += s * x[j];
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_singular() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        assert!(matches!(invert_normal(&m, "t"), Err(Error::SingularNormalMatrix { .. })));
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 4.0]);
        assert_eq!(invert_normal(&m, "t").unwrap()[(1, 1)], 0.25);
    }

    #[test]
    fn inverse_sqrt_roundtrip() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let s = inverse_sqrt_spd(&m).unwrap();
        let back = (&s * &m * &s) - DMatrix::identity(2, 2);
        assert!(back.norm() < 1e-12);
    }

    #[test]
    fn quad_form_matches_dense() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(quad_form(&m, &[1.0, 2.0]), 1.0 + 2.0 * 2.0 + 3.0 * 2.0 + 4.0 * 4.0);
    }
}
