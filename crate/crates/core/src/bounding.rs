//! Bounding matrices: estimable surrogates `d̃` with `y'd̃y >= y'dy` for all `y`.
//!
//! The built-in construction zeroes every unidentified off-diagonal cell
//! (`p_ab = 0`) and moves its magnitude onto the two diagonals, using
//! `2|d_ab| y_a y_b <= |d_ab| (y_a^2 + y_b^2)`. Identified cells are copied.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{safe_divide, DesignMatrix, JointProbs};
use crate::linalg::min_eigenvalue;

/// Minimum eigenvalue of `d̃ - d` accepted as positive semidefinite.
pub const PSD_TOL: f64 = -1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundMethod {
    IdentifiedCellsAmgm,
    Custom,
}

#[derive(Debug, Clone)]
pub struct BoundingMatrix {
    pub d_tilde: DMatrix<f64>,
    pub method: BoundMethod,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub min_eigenvalue: f64,
    pub passed: bool,
}

/// Absorbs every unidentified off-diagonal cell of `m` into the diagonal.
pub fn amgm_absorb(m: &DMatrix<f64>, p: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if m.shape() != p.shape() || !m.is_square() {
        return Err(Error::shape(format!("{:?}", p.shape()), format!("{:?}", m.shape())));
    }
    let n = m.nrows();
    let mut out = m.clone();
    for b in 0..n {
        for a in 0..n {
            if a != b && p[(a, b)] == 0.0 && m[(a, b)] != 0.0 {
                out[(a, b)] = 0.0;
                out[(a, a)] += m[(a, b)].abs();
            }
        }
    }
    Ok(out)
}

pub fn amgm_bound(d: &DesignMatrix, p: &JointProbs) -> Result<BoundingMatrix> {
    Ok(BoundingMatrix {
        d_tilde: amgm_absorb(&d.d, &p.p)?,
        method: BoundMethod::IdentifiedCellsAmgm,
    })
}

/// Accepts a user-supplied bound after checking domination and estimability.
pub fn custom_bound(d_tilde: DMatrix<f64>, d: &DesignMatrix, p: &JointProbs) -> Result<BoundingMatrix> {
    let report = verify_bound(&d_tilde, &d.d)?;
    if !report.passed {
        return Err(Error::Config(format!(
            "custom bounding matrix does not dominate d (min eigenvalue {:.3e})",
            report.min_eigenvalue
        )));
    }
    check_estimable(&d_tilde, &p.p)?;
    Ok(BoundingMatrix {
        d_tilde,
        method: BoundMethod::Custom,
    })
}

/// Minimum eigenvalue of `d̃ - d` and whether it clears [`PSD_TOL`].
pub fn verify_bound(d_tilde: &DMatrix<f64>, d: &DMatrix<f64>) -> Result<BoundReport> {
    if d_tilde.shape() != d.shape() {
        return Err(Error::shape(format!("{:?}", d.shape()), format!("{:?}", d_tilde.shape())));
    }
    let min = min_eigenvalue(&(d_tilde - d))?;
    Ok(BoundReport {
        min_eigenvalue: min,
        passed: min >= PSD_TOL,
    })
}

fn check_estimable(m: &DMatrix<f64>, p: &DMatrix<f64>) -> Result<()> {
    if m.shape() != p.shape() {
        return Err(Error::shape(format!("{:?}", p.shape()), format!("{:?}", m.shape())));
    }
    for col in 0..m.ncols() {
        for row in 0..m.nrows() {
            if p[(row, col)] == 0.0 && m[(row, col)] != 0.0 {
                return Err(Error::NonEstimableCell { row, col });
            }
        }
    }
    Ok(())
}

/// `d̃ / p` with division by zero resolving to zero.
pub fn weight_by_p(d_tilde: &DMatrix<f64>, p: &JointProbs) -> Result<DMatrix<f64>> {
    check_estimable(d_tilde, &p.p)?;
    safe_divide(d_tilde, &p.p)
}
