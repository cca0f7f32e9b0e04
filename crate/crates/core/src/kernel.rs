//! First- and second-order assignment probabilities and the design matrix.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::design::{Assignment, DesignDistribution};
use crate::error::{Error, Result};
use crate::moments::expectation;

/// Largest kn for which dense kn x kn design matrices are formed.
pub const MAX_MATRIX_KN: usize = 4_000;

/// π: probability that each of the kn slots is the realized one.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FirstOrderProbs {
    pub pi: DVector<f64>,
    /// Monte Carlo standard errors; `None` for exact enumeration.
    pub std_err: Option<DVector<f64>>,
}

/// **p**: `p[a, b] = E[R_a R_b]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JointProbs {
    pub p: DMatrix<f64>,
    pub std_err: Option<DMatrix<f64>>,
}

/// **d**: `d[a, b] = p[a, b] / (π_a π_b) - 1`, the covariance of the
/// inverse-probability-weighted indicators.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DesignMatrix {
    pub d: DMatrix<f64>,
}

fn slots(assignment: &Assignment, k: usize) -> Result<Vec<usize>> {
    let n = assignment.n_units();
    assignment
        .arm_of
        .iter()
        .enumerate()
        .map(|(unit, &arm)| {
            if arm == 0 || arm > k {
                Err(Error::ArmOutOfRange { unit, arm, k })
            } else {
                Ok((arm - 1) * n + unit)
            }
        })
        .collect()
}

pub fn compute_pi(dist: &DesignDistribution) -> Result<FirstOrderProbs> {
    if dist.is_empty() {
        return Err(Error::EmptySupport);
    }
    let k = dist.k_arms();
    let kn = dist.kn();
    let m = expectation(dist, kn, |a, out| {
        for s in slots(a, k)? {
            out[s] = 1.0;
        }
        Ok(())
    })?;
    Ok(FirstOrderProbs {
        pi: DVector::from_vec(m.mean),
        std_err: m.std_err.map(DVector::from_vec),
    })
}

pub fn compute_p(dist: &DesignDistribution) -> Result<JointProbs> {
    if dist.is_empty() {
        return Err(Error::EmptySupport);
    }
    let k = dist.k_arms();
    let kn = dist.kn();
    if kn > MAX_MATRIX_KN {
        return Err(Error::MatrixTooLarge { kn, max: MAX_MATRIX_KN });
    }
    let m = expectation(dist, kn * kn, |a, out| {
        let s = slots(a, k)?;
        for &i in &s {
            for &j in &s {
                // column-major, matching nalgebra storage
                out[j * kn + i] = 1.0;
            }
        }
        Ok(())
    })?;
    Ok(JointProbs {
        p: DMatrix::from_vec(kn, kn, m.mean),
        std_err: m.std_err.map(|se| DMatrix::from_vec(kn, kn, se)),
    })
}

pub fn compute_d(p: &JointProbs, pi: &FirstOrderProbs) -> Result<DesignMatrix> {
    let kn = pi.pi.len();
    if p.p.shape() != (kn, kn) {
        return Err(Error::shape(format!("{kn}x{kn}"), format!("{:?}", p.p.shape())));
    }
    if let Some(slot) = pi.pi.iter().position(|&v| v <= 0.0) {
        return Err(Error::ZeroPi { slot });
    }
    let d = DMatrix::from_fn(kn, kn, |a, b| p.p[(a, b)] / (pi.pi[a] * pi.pi[b]) - 1.0);
    Ok(DesignMatrix { d })
}

/// Element-wise `a / b` with any division by zero resolving to zero.
pub fn safe_divide(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("{:?}", a.shape()), format!("{:?}", b.shape())));
    }
    Ok(a.zip_map(b, |x, y| if y == 0.0 { 0.0 } else { x / y }))
}

/// All design moments needed downstream, computed from one distribution.
#[derive(Debug, Clone)]
pub struct DesignMoments {
    pub n_units: usize,
    pub k_arms: usize,
    pub pi: FirstOrderProbs,
    pub p: JointProbs,
    pub d: DesignMatrix,
}

impl DesignMoments {
    pub fn compute(dist: &DesignDistribution) -> Result<Self> {
        let pi = compute_pi(dist)?;
        let p = compute_p(dist)?;
        let d = compute_d(&p, &pi)?;
        Ok(DesignMoments {
            n_units: dist.n_units(),
            k_arms: dist.k_arms(),
            pi,
            p,
            d,
        })
    }

    pub fn kn(&self) -> usize {
        self.n_units * self.k_arms
    }
}
