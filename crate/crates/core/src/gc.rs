//! Guaranteed Conservative (GC) estimator built from the exact variance
//! matrix `g` of the point estimator: `V(c'WRy) = y'gy` with
//! `g = E[R W'c c'W R] - E[R W'c] E[c'W R]`.

use nalgebra::{DMatrix, DVector};

use crate::bounding::{amgm_absorb, verify_bound, weight_by_p, BoundReport};
use crate::design::DesignDistribution;
use crate::error::{Error, Result};
use crate::estimators::LinearEstimator;
use crate::kernel::JointProbs;
use crate::linalg::quad_form;
use crate::moments::{expectation, matrix_expectation};

#[derive(Debug, Clone)]
pub struct GMatrix {
    pub g: DMatrix<f64>,
    /// Monte Carlo standard errors of `g` (sampled designs only).
    pub std_err: Option<DMatrix<f64>>,
}

/// `g` by two passes over the same assignments: the mean of `v = R W'c`,
/// then the mean of `(v - v̄)(v - v̄)'`. Sampled designs use the `N - 1`
/// divisor.
pub fn g_matrix(dist: &DesignDistribution, est: &LinearEstimator) -> Result<GMatrix> {
    let kn = est.kn();
    if dist.kn() != kn {
        return Err(Error::shape(format!("design with kn = {kn}"), dist.kn().to_string()));
    }
    let v_of = |assignment: &crate::design::Assignment| -> Result<DVector<f64>> {
        let realized = est.realize(assignment)?;
        Ok(realized.r.component_mul(&realized.wc))
    };
    let first = expectation(dist, kn, |a, out| {
        out.copy_from_slice(v_of(a)?.as_slice());
        Ok(())
    })?;
    let mean = first.mean;
    let m = matrix_expectation(dist, kn, kn, |a, out| {
        let v = v_of(a)?;
        for j in 0..kn {
            let dj = v[j] - mean[j];
            if dj == 0.0 {
                continue;
            }
            for i in 0..kn {
                out[j * kn + i] = (v[i] - mean[i]) * dj;
            }
        }
        Ok(())
    })?;
    let scale = if dist.is_exact() || m.count < 2 {
        1.0
    } else {
        m.count as f64 / (m.count as f64 - 1.0)
    };
    let g = m.mean * scale;
    // The centered products ignore the error in the first-pass mean; that
    // term, `(v̄ - μ)_i (v̄ - μ)_j`, has standard deviation
    // `se_i se_j sqrt(1 + ρ_ij²)` and dominates where the products barely vary.
    let std_err = match (m.std_err, first.std_err) {
        (Some(se), Some(se_mean)) => Some(DMatrix::from_fn(kn, kn, |i, j| {
            let denom = (g[(i, i)] * g[(j, j)]).sqrt();
            let rho = if denom > 0.0 { g[(i, j)] / denom } else { 0.0 };
            let mean_term = se_mean[i] * se_mean[j];
            scale * (se[(i, j)].powi(2) + (1.0 + rho * rho) * mean_term * mean_term).sqrt()
        })),
        (se, _) => se.map(|se| se * scale),
    };
    Ok(GMatrix { g, std_err })
}

/// `g̃`: unidentified off-diagonal cells of `g` absorbed into the diagonal.
#[derive(Debug, Clone)]
pub struct GBound {
    pub g_tilde: DMatrix<f64>,
    pub report: BoundReport,
}

pub fn g_bound(g: &DMatrix<f64>, p: &JointProbs) -> Result<GBound> {
    let g_tilde = amgm_absorb(g, &p.p)?;
    let report = verify_bound(&g_tilde, g)?;
    Ok(GBound { g_tilde, report })
}

/// `g̃ / p` with division by zero resolving to zero.
pub fn g_over_p(bound: &GBound, p: &JointProbs) -> Result<DMatrix<f64>> {
    weight_by_p(&bound.g_tilde, p)
}

/// `y'R (g̃/p) R y`.
pub fn gc_estimate(r: &DVector<f64>, y: &DVector<f64>, g_over_p: &DMatrix<f64>) -> Result<f64> {
    if r.len() != y.len() || g_over_p.shape() != (y.len(), y.len()) {
        return Err(Error::shape(format!("kn = {}", r.len()), format!("y {}, g/p {:?}", y.len(), g_over_p.shape())));
    }
    Ok(quad_form(g_over_p, r.component_mul(y).as_slice()))
}
