//! Variance of variance estimators of the form `y'O y` over the design.
//!
//! The direct path evaluates `y'O y` at every assignment. The tensor path
//! forms `E[O^{ab} O^{cd}] - E[O^{ab}] E[O^{cd}]` and contracts it with `y`
//! four times; it exists to validate the algebra on tiny designs.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::design::{Assignment, DesignDistribution};
use crate::error::{Error, Result};
use crate::estimators::LinearEstimator;
use crate::linalg::quad_form;
use crate::moments::{evaluate_all, matrix_expectation, weighted_mean_var};
use crate::oc::{OcPrecomputed, MAX_TENSOR_KN};
use crate::sandwich::o0_matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarPath {
    Direct,
    Tensor,
}

/// `V(y'O y)` over `dist`.
pub fn var_of_varest<F>(dist: &DesignDistribution, o_fn: F, y: &DVector<f64>, path: VarPath) -> Result<f64>
where
    F: Fn(&Assignment) -> Result<DMatrix<f64>> + Sync,
{
    let kn = y.len();
    match path {
        VarPath::Direct => {
            let values = evaluate_all(dist, |_, a| {
                let o = o_fn(a)?;
                if o.shape() != (kn, kn) {
                    return Err(Error::shape(format!("{kn}x{kn}"), format!("{:?}", o.shape())));
                }
                Ok(quad_form(&o, y.as_slice()))
            })?;
            Ok(weighted_mean_var(&values).1.max(0.0))
        }
        VarPath::Tensor => {
            if kn > MAX_TENSOR_KN {
                return Err(Error::TensorTooLarge { kn, max: MAX_TENSOR_KN });
            }
            let dim = kn * kn;
            // vec(O) with entry (a, b) at a*kn + b; E[vec(O) vec(O)'] holds E[O^{ab} O^{cd}]
            let second = matrix_expectation(dist, dim, dim, |a, out| {
                let o = o_fn(a)?;
                let v: Vec<f64> = o.transpose().iter().copied().collect();
                for (j, &vj) in v.iter().enumerate() {
                    if vj != 0.0 {
                        for (i, &vi) in v.iter().enumerate() {
                            out[j * dim + i] = vi * vj;
                        }
                    }
                }
                Ok(())
            })?
            .mean;
            let first = matrix_expectation(dist, kn, kn, |a, out| {
                out.copy_from_slice(o_fn(a)?.as_slice());
                Ok(())
            })?
            .mean;
            let yy: Vec<f64> = (0..dim).map(|i| y[i / kn] * y[i % kn]).collect();
            let mean_q = quad_form(&first, y.as_slice());
            Ok(quad_form(&second, &yy) - mean_q * mean_q)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrecisionComparison {
    pub v_gs: f64,
    pub v_oc2: f64,
    /// `v_gs - v_oc2`; no sign is implied.
    pub difference: f64,
}

pub fn compare_gs_oc2(
    dist: &DesignDistribution,
    est: &LinearEstimator,
    dp: &DMatrix<f64>,
    pre: &OcPrecomputed,
    y: &DVector<f64>,
) -> Result<PrecisionComparison> {
    let v_gs = var_of_varest(dist, |a| o0_matrix(est, &est.realize(a)?, dp), y, VarPath::Direct)?;
    let v_oc2 = var_of_varest(dist, |a| Ok(pre.o2_matrix(&est.realize(a)?)), y, VarPath::Direct)?;
    Ok(PrecisionComparison {
        v_gs,
        v_oc2,
        difference: v_gs - v_oc2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bounding::{amgm_bound, weight_by_p};
    use crate::design::enumerate;
    use crate::estimators::{Contrast, EstimatorSpec};
    use crate::fixtures::{two_pair_covariate, two_pair_toy};
    use crate::kernel::DesignMoments;
    use crate::oc::{bbar_mean, spectral_split, GE1_EPS};
    use crate::sandwich::o0_mean;

    #[test]
    fn direct_and_tensor_paths_agree() {
        let dist = enumerate(&two_pair_toy(), 100).unwrap();
        let m = DesignMoments::compute(&dist).unwrap();
        let est = LinearEstimator::new(&EstimatorSpec::ols(None), &Contrast::for_arms(&[-1.0, 1.0], 0), &m.pi, 6).unwrap();
        let dp = weight_by_p(&amgm_bound(&m.d, &m.p).unwrap().d_tilde, &m.p).unwrap();
        let y = DVector::from_fn(12, |i, _| ((i % 6) as f64 * 0.7).sin());
        let o_fn = |a: &Assignment| o0_matrix(&est, &est.realize(a)?, &dp);
        let direct = var_of_varest(&dist, o_fn, &y, VarPath::Direct).unwrap();
        let tensor = var_of_varest(&dist, o_fn, &y, VarPath::Tensor).unwrap();
        assert!((direct - tensor).abs() <= 1e-9 * direct.abs().max(1e-300), "{direct} vs {tensor}");
        assert_eq!(var_of_varest(&dist, o_fn, &DVector::zeros(12), VarPath::Direct).unwrap(), 0.0);
    }

    #[test]
    fn comparison_with_covariate() {
        let dist = enumerate(&two_pair_toy(), 100).unwrap();
        let m = DesignMoments::compute(&dist).unwrap();
        let spec = EstimatorSpec::ols(Some(two_pair_covariate()));
        let est = LinearEstimator::new(&spec, &Contrast::for_arms(&[-1.0, 1.0], 1), &m.pi, 6).unwrap();
        let dp = weight_by_p(&amgm_bound(&m.d, &m.p).unwrap().d_tilde, &m.p).unwrap();
        let o0 = o0_mean(&dist, &est, &dp).unwrap().mean;
        let split = spectral_split(&bbar_mean(&dist, &est, &m.p.p).unwrap(), GE1_EPS).unwrap();
        let pre = OcPrecomputed::new(&o0, &m.p.p, &split).unwrap();
        let y = DVector::from_fn(12, |i, _| ((i % 6) as f64 * 1.3).cos());
        let cmp = compare_gs_oc2(&dist, &est, &dp, &pre, &y).unwrap();
        assert!(cmp.v_gs >= -1e-12 && cmp.v_oc2 >= -1e-12);
        let fit = est.x() * DVector::from_column_slice(&[1.0, 2.0, -0.5]);
        let zero = compare_gs_oc2(&dist, &est, &dp, &pre, &fit).unwrap();
        assert!(zero.v_gs.abs() < 1e-20 && zero.v_oc2.abs() < 1e-20);
    }
}
