//! Linear treatment-effect estimators `c' W R y`: Horvitz-Thompson and
//! weighted least squares, their residual makers, and the first-order
//! (Taylor) quantities used by the variance estimators.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::design::{expand, Assignment};
use crate::error::{Error, Result};
use crate::kernel::FirstOrderProbs;
use crate::linalg::invert_normal;
use crate::matrix_io::Fingerprint;

const CENTER_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovariateLayout {
    /// The same covariate columns repeated in every arm block.
    Pooled,
    /// One copy of the covariates per arm, along a block diagonal.
    ByArm,
}

/// Pre-treatment covariates, `n x l`. Serialized as a list of columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateBlock {
    pub layout: CovariateLayout,
    pub columns: Vec<Vec<f64>>,
}

impl CovariateBlock {
    pub fn new(layout: CovariateLayout, x: &DMatrix<f64>) -> Self {
        let columns = x.column_iter().map(|c| c.iter().copied().collect()).collect();
        CovariateBlock { layout, columns }
    }

    pub fn n_covariates(&self) -> usize {
        self.columns.len()
    }

    pub fn matrix(&self, n: usize) -> Result<DMatrix<f64>> {
        if let Some(bad) = self.columns.iter().find(|c| c.len() != n) {
            return Err(Error::shape(format!("covariate columns of length {n}"), bad.len().to_string()));
        }
        Ok(DMatrix::from_fn(n, self.columns.len(), |i, j| self.columns[j][i]))
    }

    /// Number of columns the block contributes to the stacked design.
    pub fn width(&self, k: usize) -> usize {
        match self.layout {
            CovariateLayout::Pooled => self.n_covariates(),
            CovariateLayout::ByArm => k * self.n_covariates(),
        }
    }
}

/// Builds the stacked `kn x (k + l)` regressor matrix: arm intercepts first,
/// then the covariates in the requested layout.
pub fn build_x(cov: Option<&CovariateBlock>, n: usize, k: usize) -> Result<DMatrix<f64>> {
    let width = cov.map_or(0, |c| c.width(k));
    let mut x = DMatrix::zeros(k * n, k + width);
    for arm in 0..k {
        for unit in 0..n {
            x[(arm * n + unit, arm)] = 1.0;
        }
    }
    let Some(cov) = cov else {
        return Ok(x);
    };
    let raw = cov.matrix(n)?;
    match cov.layout {
        CovariateLayout::Pooled => {
            for arm in 0..k {
                for unit in 0..n {
                    for j in 0..raw.ncols() {
                        x[(arm * n + unit, k + j)] = raw[(unit, j)];
                    }
                }
            }
        }
        CovariateLayout::ByArm => {
            for (j, column) in raw.column_iter().enumerate() {
                let sum: f64 = column.sum();
                if sum.abs() > CENTER_TOL {
                    return Err(Error::UncenteredByArm { column: j, sum });
                }
            }
            let l = raw.ncols();
            for arm in 0..k {
                for unit in 0..n {
                    for j in 0..l {
                        x[(arm * n + unit, k + arm * l + j)] = raw[(unit, j)];
                    }
                }
            }
        }
    }
    Ok(x)
}

/// Contrast over the estimator's coefficient vector: `k` arm weights followed
/// by zeros for every covariate coefficient.
#[derive(Debug, Clone, PartialEq)]
pub struct Contrast {
    c: DVector<f64>,
    k: usize,
}

impl Contrast {
    pub fn new(values: Vec<f64>, k: usize, n_covariate_columns: usize) -> Result<Self> {
        let expected = k + n_covariate_columns;
        if values.len() != expected {
            return Err(Error::shape(format!("contrast of length {expected}"), values.len().to_string()));
        }
        if values[k..].iter().any(|&v| v != 0.0) {
            return Err(Error::InvalidEstimator(
                "contrast entries for covariate coefficients must be zero".into(),
            ));
        }
        Ok(Contrast {
            c: DVector::from_vec(values),
            k,
        })
    }

    /// Pads arm weights with zeros for the covariate columns.
    pub fn for_arms(arm_weights: &[f64], n_covariate_columns: usize) -> Self {
        let mut values = arm_weights.to_vec();
        values.resize(arm_weights.len() + n_covariate_columns, 0.0);
        Contrast {
            c: DVector::from_vec(values),
            k: arm_weights.len(),
        }
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.c
    }

    pub fn arm_weights(&self) -> &[f64] {
        &self.c.as_slice()[..self.k]
    }

    /// Advisory conditions `sum c = 0` and `sum |c| = 2`; violations are not errors.
    pub fn warnings(&self) -> Vec<String> {
        let arms = self.arm_weights();
        let sum: f64 = arms.iter().sum();
        let abs: f64 = arms.iter().map(|v| v.abs()).sum();
        let mut out = Vec::new();
        if sum.abs() > 1e-12 {
            out.push(format!("contrast arm weights sum to {sum}, not 0"));
        }
        if (abs - 2.0).abs() > 1e-12 {
            out.push(format!("contrast absolute weights sum to {abs}, not 2"));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    #[serde(alias = "HT")]
    Ht,
    #[serde(alias = "WLS")]
    Wls,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NamedWeights {
    Identity,
    InvPi,
}

/// Diagonal of the WLS weight matrix **m**.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Weights {
    Named(NamedWeights),
    Vector(Vec<f64>),
}

impl Default for Weights {
    fn default() -> Self {
        Weights::Named(NamedWeights::Identity)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSpec {
    pub kind: EstimatorKind,
    #[serde(default)]
    pub m: Weights,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covariates: Option<CovariateBlock>,
}

impl EstimatorSpec {
    pub fn ht() -> Self {
        EstimatorSpec {
            kind: EstimatorKind::Ht,
            m: Weights::default(),
            covariates: None,
        }
    }

    /// Ordinary least squares (difference in means when `covariates` is `None`).
    pub fn ols(covariates: Option<CovariateBlock>) -> Self {
        EstimatorSpec {
            kind: EstimatorKind::Wls,
            m: Weights::Named(NamedWeights::Identity),
            covariates,
        }
    }

    pub fn hajek() -> Self {
        EstimatorSpec {
            kind: EstimatorKind::Wls,
            m: Weights::Named(NamedWeights::InvPi),
            covariates: None,
        }
    }

    /// Number of coefficient rows in `W`.
    pub fn n_coefficients(&self, k: usize) -> usize {
        k + self.covariates.as_ref().map_or(0, |c| c.width(k))
    }

    pub fn m_vector(&self, pi: &DVector<f64>) -> Result<DVector<f64>> {
        let m = match &self.m {
            Weights::Named(NamedWeights::Identity) => DVector::from_element(pi.len(), 1.0),
            Weights::Named(NamedWeights::InvPi) => {
                if let Some(slot) = pi.iter().position(|&v| v <= 0.0) {
                    return Err(Error::ZeroPi { slot });
                }
                pi.map(|v| 1.0 / v)
            }
            Weights::Vector(values) => {
                if values.len() != pi.len() {
                    return Err(Error::shape(format!("m of length {}", pi.len()), values.len().to_string()));
                }
                DVector::from_column_slice(values)
            }
        };
        if m.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::InvalidEstimator("m must have nonnegative finite entries".into()));
        }
        if !m.iter().any(|&v| v > 0.0) {
            return Err(Error::InvalidEstimator("m must have a strictly positive entry".into()));
        }
        Ok(m)
    }
}

/// Horvitz-Thompson weights `(1'1)^{-1} 1' π^{-1}`: `1/(n π_a)` on the own-arm block.
pub fn w_ht(pi: &FirstOrderProbs, n: usize) -> Result<DMatrix<f64>> {
    let kn = pi.pi.len();
    if n == 0 || !kn.is_multiple_of(n) {
        return Err(Error::shape(format!("multiple of n = {n}"), kn.to_string()));
    }
    if let Some(slot) = pi.pi.iter().position(|&v| v <= 0.0) {
        return Err(Error::ZeroPi { slot });
    }
    let k = kn / n;
    Ok(DMatrix::from_fn(k, kn, |arm, a| {
        if a / n == arm {
            1.0 / (n as f64 * pi.pi[a])
        } else {
            0.0
        }
    }))
}

/// `(x' m diag(r) x)^{-1} x' m`, where `r` is a realized indicator or π.
fn wls_weights(x: &DMatrix<f64>, m: &DVector<f64>, r: &DVector<f64>, context: &str) -> Result<DMatrix<f64>> {
    let kn = x.nrows();
    if m.len() != kn || r.len() != kn {
        return Err(Error::shape(format!("vectors of length {kn}"), format!("{} / {}", m.len(), r.len())));
    }
    let q = x.ncols();
    let mut normal = DMatrix::zeros(q, q);
    let mut xtm = x.transpose();
    for a in 0..kn {
        let weight = m[a] * r[a];
        if weight != 0.0 {
            let row = x.row(a);
            normal += row.transpose() * row * weight;
        }
        xtm.column_mut(a).scale_mut(m[a]);
    }
    Ok(invert_normal(&normal, context)? * xtm)
}

/// `W^{WLS}` for a realized assignment indicator `r`.
pub fn w_wls(spec: &EstimatorSpec, pi: &FirstOrderProbs, r: &DVector<f64>, n: usize) -> Result<DMatrix<f64>> {
    let kn = pi.pi.len();
    if n == 0 || !kn.is_multiple_of(n) {
        return Err(Error::shape(format!("multiple of n = {n}"), kn.to_string()));
    }
    let x = build_x(spec.covariates.as_ref(), n, kn / n)?;
    wls_weights(&x, &spec.m_vector(&pi.pi)?, r, "W for realized assignment")
}

/// `w̄^{WLS}`: the WLS weights with π in place of the realized indicator.
pub fn w_wls_bar(spec: &EstimatorSpec, pi: &FirstOrderProbs, n: usize) -> Result<DMatrix<f64>> {
    let kn = pi.pi.len();
    let x = build_x(spec.covariates.as_ref(), n, kn / n)?;
    wls_weights(&x, &spec.m_vector(&pi.pi)?, &pi.pi, "expected-assignment W")
}

/// `c' W R y`.
pub fn point_estimate(c: &Contrast, w: &DMatrix<f64>, r: &DVector<f64>, y: &DVector<f64>) -> Result<f64> {
    if w.nrows() != c.values().len() || w.ncols() != r.len() || r.len() != y.len() {
        return Err(Error::shape(
            format!("W {}x{}", c.values().len(), r.len()),
            format!("W {}x{}, y {}", w.nrows(), w.ncols(), y.len()),
        ));
    }
    let ry = r.component_mul(y);
    Ok(c.values().dot(&(w * ry)))
}

/// The residual maker `M = R - R x W R` in factored form.
///
/// `M` is zero outside the observed rows and columns, so it is stored as the
/// observed slots plus the factors restricted to them.
#[derive(Debug, Clone)]
pub struct ResidualMaker {
    kn: usize,
    observed: Vec<usize>,
    /// `x` restricted to observed rows, `n_obs x q`.
    x_obs: DMatrix<f64>,
    /// `W` restricted to observed columns, `q x n_obs`.
    w_obs: DMatrix<f64>,
}

impl ResidualMaker {
    fn new(r: &DVector<f64>, x: Option<&DMatrix<f64>>, w: Option<&DMatrix<f64>>) -> Self {
        let observed: Vec<usize> = (0..r.len()).filter(|&a| r[a] != 0.0).collect();
        let (x_obs, w_obs) = match (x, w) {
            (Some(x), Some(w)) => (x.select_rows(&observed), w.select_columns(&observed)),
            _ => (DMatrix::zeros(observed.len(), 0), DMatrix::zeros(0, observed.len())),
        };
        ResidualMaker {
            kn: r.len(),
            observed,
            x_obs,
            w_obs,
        }
    }

    pub fn kn(&self) -> usize {
        self.kn
    }

    pub fn observed(&self) -> &[usize] {
        &self.observed
    }

    /// Observed block of `M` (`n_obs x n_obs`).
    fn block(&self) -> DMatrix<f64> {
        let n = self.observed.len();
        DMatrix::identity(n, n) - &self.x_obs * &self.w_obs
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let block = self.block();
        let mut m = DMatrix::zeros(self.kn, self.kn);
        for (i, &a) in self.observed.iter().enumerate() {
            for (j, &b) in self.observed.iter().enumerate() {
                m[(a, b)] = block[(i, j)];
            }
        }
        m
    }

    /// `M v`.
    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        let v_obs = DVector::from_iterator(self.observed.len(), self.observed.iter().map(|&a| v[a]));
        let res = &v_obs - &self.x_obs * (&self.w_obs * &v_obs);
        let mut out = DVector::zeros(self.kn);
        for (i, &a) in self.observed.iter().enumerate() {
            out[a] = res[i];
        }
        out
    }

    /// `M' B M` for a `kn x kn` matrix `B`.
    pub fn sandwich(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let b_obs = b.select_rows(&self.observed).select_columns(&self.observed);
        let inner = if self.x_obs.ncols() == 0 {
            b_obs
        } else {
            // (I - K'L') B (I - L K) expanded to keep every product rank-q
            let bl = &b_obs * &self.x_obs;
            let ltb = self.x_obs.transpose() * &b_obs;
            let ltbl = self.x_obs.transpose() * &bl;
            let kt = self.w_obs.transpose();
            &b_obs - &bl * &self.w_obs - &kt * &ltb + &kt * (ltbl * &self.w_obs)
        };
        let mut out = DMatrix::zeros(self.kn, self.kn);
        for (i, &a) in self.observed.iter().enumerate() {
            for (j, &c) in self.observed.iter().enumerate() {
                out[(a, c)] = inner[(i, j)];
            }
        }
        out
    }
}

/// An estimator specification bound to a design's π, ready to evaluate at
/// realized assignments.
#[derive(Debug, Clone)]
pub struct LinearEstimator {
    kind: EstimatorKind,
    n: usize,
    k: usize,
    x: DMatrix<f64>,
    m: DVector<f64>,
    pi: DVector<f64>,
    contrast: Contrast,
    /// HT weights (HT) or `w̄^{WLS}` (WLS).
    w_bar: DMatrix<f64>,
}

/// Estimator quantities at one realized assignment.
#[derive(Debug, Clone)]
pub struct Realized {
    pub r: DVector<f64>,
    pub w: DMatrix<f64>,
    /// `W' c`.
    pub wc: DVector<f64>,
    pub maker: ResidualMaker,
}

/// Nonrandom first-order quantities.
#[derive(Debug, Clone)]
pub struct TaylorQuantities {
    pub b: DVector<f64>,
    pub u: DVector<f64>,
    pub z_c: DVector<f64>,
}

/// Random counterparts of the Taylor quantities at a realized assignment.
#[derive(Debug, Clone)]
pub struct RandomQuantities {
    pub u: DVector<f64>,
    pub z_c: DVector<f64>,
}

impl LinearEstimator {
    pub fn new(spec: &EstimatorSpec, contrast: &Contrast, pi: &FirstOrderProbs, n: usize) -> Result<Self> {
        let kn = pi.pi.len();
        if n == 0 || !kn.is_multiple_of(n) {
            return Err(Error::shape(format!("multiple of n = {n}"), kn.to_string()));
        }
        let k = kn / n;
        let q = spec.n_coefficients(k);
        if contrast.values().len() != q {
            return Err(Error::shape(format!("contrast of length {q}"), contrast.values().len().to_string()));
        }
        let (x, m, w_bar) = match spec.kind {
            EstimatorKind::Ht => {
                if spec.covariates.is_some() {
                    return Err(Error::InvalidEstimator("HT estimator takes no covariates".into()));
                }
                (build_x(None, n, k)?, DVector::from_element(kn, 1.0), w_ht(pi, n)?)
            }
            EstimatorKind::Wls => {
                let x = build_x(spec.covariates.as_ref(), n, k)?;
                let m = spec.m_vector(&pi.pi)?;
                let w_bar = wls_weights(&x, &m, &pi.pi, "expected-assignment W")?;
                (x, m, w_bar)
            }
        };
        Ok(LinearEstimator {
            kind: spec.kind,
            n,
            k,
            x,
            m,
            pi: pi.pi.clone(),
            contrast: contrast.clone(),
            w_bar,
        })
    }

    pub fn kind(&self) -> EstimatorKind {
        self.kind
    }

    pub fn n_units(&self) -> usize {
        self.n
    }

    pub fn k_arms(&self) -> usize {
        self.k
    }

    pub fn kn(&self) -> usize {
        self.n * self.k
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn pi(&self) -> &DVector<f64> {
        &self.pi
    }

    pub fn contrast(&self) -> &Contrast {
        &self.contrast
    }

    pub fn w_bar(&self) -> &DMatrix<f64> {
        &self.w_bar
    }

    /// Feeds everything that determines the estimator into `f`.
    pub fn fingerprint(&self, f: &mut Fingerprint) {
        f.str(match self.kind {
            EstimatorKind::Ht => "ht",
            EstimatorKind::Wls => "wls",
        })
        .usize(self.n)
        .usize(self.k)
        .matrix(&self.x)
        .f64s(self.m.as_slice())
        .f64s(self.pi.as_slice())
        .f64s(self.contrast.values().as_slice());
    }

    pub fn indicator(&self, assignment: &Assignment) -> Result<DVector<f64>> {
        if assignment.n_units() != self.n {
            return Err(Error::shape(format!("{} units", self.n), assignment.n_units().to_string()));
        }
        expand(assignment, self.k)
    }

    pub fn weights(&self, r: &DVector<f64>) -> Result<DMatrix<f64>> {
        match self.kind {
            EstimatorKind::Ht => Ok(self.w_bar.clone()),
            EstimatorKind::Wls => wls_weights(&self.x, &self.m, r, "W for realized assignment"),
        }
    }

    pub fn realize(&self, assignment: &Assignment) -> Result<Realized> {
        let r = self.indicator(assignment)?;
        self.realize_indicator(r)
    }

    pub fn realize_indicator(&self, r: DVector<f64>) -> Result<Realized> {
        let w = self.weights(&r)?;
        let wc = w.transpose() * self.contrast.values();
        let maker = match self.kind {
            EstimatorKind::Ht => ResidualMaker::new(&r, None, None),
            EstimatorKind::Wls => ResidualMaker::new(&r, Some(&self.x), Some(&w)),
        };
        Ok(Realized { r, w, wc, maker })
    }

    pub fn point_estimate(&self, realized: &Realized, y: &DVector<f64>) -> Result<f64> {
        point_estimate(&self.contrast, &realized.w, &realized.r, y)
    }

    /// `b = w̄ π y`, `u = y - x b`, `z_c = π ∘ u ∘ (w̄' c)`.
    pub fn taylor_quantities(&self, y: &DVector<f64>) -> Result<TaylorQuantities> {
        self.check_len(y)?;
        let (b, u) = match self.kind {
            EstimatorKind::Ht => (DVector::zeros(0), y.clone()),
            EstimatorKind::Wls => {
                let b = &self.w_bar * self.pi.component_mul(y);
                let u = y - &self.x * &b;
                (b, u)
            }
        };
        let wc = self.w_bar.transpose() * self.contrast.values();
        let z_c = self.pi.component_mul(&u).component_mul(&wc);
        Ok(TaylorQuantities { b, u, z_c })
    }

    /// `π diag(c' w̄) u`, the rearranged form of `z_c`.
    pub fn z_c_rearranged(&self, u: &DVector<f64>) -> DVector<f64> {
        let cw = self.w_bar.transpose() * self.contrast.values();
        DMatrix::from_diagonal(&self.pi) * DMatrix::from_diagonal(&cw) * u
    }

    /// `U = y - x W R y` (or `y` for HT) and `Z_c = π ∘ U ∘ (W' c)`.
    pub fn random_quantities(&self, realized: &Realized, y: &DVector<f64>) -> Result<RandomQuantities> {
        self.check_len(y)?;
        let u = match self.kind {
            EstimatorKind::Ht => y.clone(),
            EstimatorKind::Wls => y - &self.x * (&realized.w * realized.r.component_mul(y)),
        };
        let z_c = self.pi.component_mul(&u).component_mul(&realized.wc);
        Ok(RandomQuantities { u, z_c })
    }

    fn check_len(&self, y: &DVector<f64>) -> Result<()> {
        if y.len() != self.kn() {
            return Err(Error::shape(format!("y of length {}", self.kn()), y.len().to_string()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::{enumerate, Design};
    use crate::kernel::{compute_pi, DesignMoments};
    use crate::moments::weighted_mean_var;

    fn pi_of(values: &[f64]) -> FirstOrderProbs {
        FirstOrderProbs {
            pi: DVector::from_column_slice(values),
            std_err: None,
        }
    }

    #[test]
    fn build_x_layouts() {
        let x = build_x(None, 3, 2).unwrap();
        assert_eq!(x.shape(), (6, 2));
        assert_eq!(x.column(1).as_slice(), &[0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);

        let pooled = CovariateBlock {
            layout: CovariateLayout::Pooled,
            columns: vec![vec![5.0, 7.0]],
        };
        let x = build_x(Some(&pooled), 2, 2).unwrap();
        assert_eq!(x.column(2).as_slice(), &[5.0, 7.0, 5.0, 7.0]);

        let by_arm = CovariateBlock {
            layout: CovariateLayout::ByArm,
            columns: vec![vec![-1.0, 1.0]],
        };
        let x = build_x(Some(&by_arm), 2, 2).unwrap();
        assert_eq!(x.column(2).as_slice(), &[-1.0, 1.0, 0.0, 0.0]);
        assert_eq!(x.column(3).as_slice(), &[0.0, 0.0, -1.0, 1.0]);

        let uncentered = CovariateBlock {
            layout: CovariateLayout::ByArm,
            columns: vec![vec![1.0, 1.0]],
        };
        assert!(matches!(build_x(Some(&uncentered), 2, 2), Err(Error::UncenteredByArm { .. })));
    }

    #[test]
    fn contrast_checks() {
        assert!(Contrast::new(vec![-1.0, 1.0, 0.5], 2, 1).is_err());
        assert!(Contrast::new(vec![-1.0, 1.0], 2, 1).is_err());
        let c = Contrast::new(vec![-1.0, 1.0, 0.0], 2, 1).unwrap();
        assert!(c.warnings().is_empty());
        assert_eq!(Contrast::new(vec![1.0, 1.0], 2, 0).unwrap().warnings().len(), 1);
    }

    #[test]
    fn ht_weights() {
        let w = w_ht(&pi_of(&[0.5; 8]), 4).unwrap();
        assert_eq!(w.shape(), (2, 8));
        assert_eq!(w[(0, 0)], 0.5);
        assert_eq!(w[(0, 4)], 0.0);
        assert_eq!(w[(1, 7)], 0.5);

        let w = w_ht(&pi_of(&[1.0 / 3.0; 6]), 2).unwrap();
        assert!((w[(0, 0)] - 1.5).abs() < 1e-12);

        let w = w_ht(&pi_of(&[0.25, 0.75]), 1).unwrap();
        assert_eq!(w[(0, 0)], 4.0);
        assert!((w[(1, 1)] - 4.0 / 3.0).abs() < 1e-15);
        assert_eq!(w[(0, 1)], 0.0);
        assert!(matches!(w_ht(&pi_of(&[0.0, 1.0]), 1), Err(Error::ZeroPi { slot: 0 })));
    }

    #[test]
    fn difference_in_means_on_toy() {
        let pi = pi_of(&[0.5; 8]);
        let c = Contrast::new(vec![-1.0, 1.0], 2, 0).unwrap();
        let est = LinearEstimator::new(&EstimatorSpec::ols(None), &c, &pi, 4).unwrap();
        let realized = est.realize(&Assignment::new(vec![2, 2, 1, 1])).unwrap();
        let y = DVector::from_column_slice(&[1.0, 2.0, 3.0, 4.0, 1.0, 2.0, 3.0, 4.0]);
        assert!((est.point_estimate(&realized, &y).unwrap() + 2.0).abs() < 1e-12);
        let zero = Contrast::new(vec![0.0, 0.0], 2, 0).unwrap();
        let est0 = LinearEstimator::new(&EstimatorSpec::ols(None), &zero, &pi, 4).unwrap();
        assert_eq!(est0.point_estimate(&realized, &y).unwrap(), 0.0);
    }

    #[test]
    fn single_arm_mean() {
        let pi = pi_of(&[1.0; 3]);
        let c = Contrast::new(vec![1.0], 1, 0).unwrap();
        let est = LinearEstimator::new(&EstimatorSpec::ols(None), &c, &pi, 3).unwrap();
        let realized = est.realize(&Assignment::new(vec![1, 1, 1])).unwrap();
        for j in 0..3 {
            assert!((realized.w[(0, j)] - 1.0 / 3.0).abs() < 1e-15);
        }
        let y = DVector::from_column_slice(&[3.0, 4.0, 8.0]);
        assert!((est.point_estimate(&realized, &y).unwrap() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn empty_arm_is_singular() {
        let pi = pi_of(&[0.5; 4]);
        let c = Contrast::new(vec![-1.0, 1.0], 2, 0).unwrap();
        let est = LinearEstimator::new(&EstimatorSpec::ols(None), &c, &pi, 2).unwrap();
        assert!(matches!(
            est.realize(&Assignment::new(vec![1, 1])),
            Err(Error::SingularNormalMatrix { .. })
        ));
    }

    #[test]
    fn w_bar_forms() {
        let pi = pi_of(&[0.5; 8]);
        let w = w_wls_bar(&EstimatorSpec::ols(None), &pi, 4).unwrap();
        assert!((w[(0, 0)] - 0.5).abs() < 1e-12 && w[(0, 5)] == 0.0);
        let pi = pi_of(&[0.2, 0.6, 0.8, 0.4]);
        // m = π^{-1}: w̄ reduces to the HT weights 1/(nπ), so w̄π has entries 1/n
        let w = w_wls_bar(&EstimatorSpec::hajek(), &pi, 2).unwrap();
        let ht = w_ht(&pi, 2).unwrap();
        assert!((&w - &ht).norm() < 1e-12);
        let w_pi = &w * DMatrix::from_diagonal(&pi.pi);
        for (row, col) in [(0, 0), (0, 1), (1, 2), (1, 3)] {
            assert!((w_pi[(row, col)] - 0.5).abs() < 1e-12, "{row},{col}");
        }
    }

    #[test]
    fn w_bar_with_covariate_matches_gls_solve() {
        // oracle: coefficients of the weighted normal equations by Cramer's rule
        let pi = pi_of(&[0.3, 0.6, 0.7, 0.4]);
        let cov = CovariateBlock {
            layout: CovariateLayout::Pooled,
            columns: vec![vec![1.0, 3.0]],
        };
        let spec = EstimatorSpec::ols(Some(cov));
        let w = w_wls_bar(&spec, &pi, 2).unwrap();
        let y = [2.0, -1.0, 0.5, 4.0];
        let xs = [[1.0, 0.0, 1.0], [1.0, 0.0, 3.0], [0.0, 1.0, 1.0], [0.0, 1.0, 3.0]];
        let mut a = [[0.0; 3]; 3];
        let mut rhs = [0.0; 3];
        for i in 0..4 {
            for r in 0..3 {
                rhs[r] += xs[i][r] * pi.pi[i] * y[i];
                for c in 0..3 {
                    a[r][c] += xs[i][r] * pi.pi[i] * xs[i][c];
                }
            }
        }
        let det = |m: [[f64; 3]; 3]| {
            m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
                + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
        };
        let d = det(a);
        let b = w * DVector::from_iterator(4, (0..4).map(|i| pi.pi[i] * y[i]));
        for col in 0..3 {
            let mut m = a;
            for r in 0..3 {
                m[r][col] = rhs[r];
            }
            assert!((b[col] - det(m) / d).abs() < 1e-12);
        }
    }

    #[test]
    fn taylor_quantities_on_toy() {
        let pi = pi_of(&[0.5; 8]);
        let c = Contrast::new(vec![-1.0, 1.0], 2, 0).unwrap();
        let est = LinearEstimator::new(&EstimatorSpec::ols(None), &c, &pi, 4).unwrap();
        let y = DVector::from_column_slice(&[1.0, 2.0, 3.0, 4.0, 1.0, 2.0, 3.0, 4.0]);
        let t = est.taylor_quantities(&y).unwrap();
        assert!((t.b[0] - 2.5).abs() < 1e-12 && (t.b[1] - 2.5).abs() < 1e-12);
        let expected = [-1.5, -0.5, 0.5, 1.5, -1.5, -0.5, 0.5, 1.5];
        for (u, e) in t.u.iter().zip(expected) {
            assert!((u - e).abs() < 1e-12);
        }
        assert!((&t.z_c - est.z_c_rearranged(&t.u)).norm() < 1e-12);

        let fit = est.x() * DVector::from_column_slice(&[1.0, -2.0]);
        let t = est.taylor_quantities(&fit).unwrap();
        assert!(t.u.norm() < 1e-12 && t.z_c.norm() < 1e-12);
    }

    #[test]
    fn residual_maker_identities() {
        let pi = pi_of(&[0.5; 8]);
        let cov = CovariateBlock {
            layout: CovariateLayout::Pooled,
            columns: vec![vec![0.3, -1.0, 2.0, 0.7]],
        };
        let spec = EstimatorSpec::ols(Some(cov));
        let c = Contrast::new(vec![-1.0, 1.0, 0.0], 2, 1).unwrap();
        let est = LinearEstimator::new(&spec, &c, &pi, 4).unwrap();
        let realized = est.realize(&Assignment::new(vec![1, 2, 2, 1])).unwrap();
        let m = realized.maker.to_dense();
        assert!((&m * est.x()).norm() < 1e-12);
        let y = DVector::from_fn(8, |i, _| (i as f64 * 1.7).sin());
        let rq = est.random_quantities(&realized, &y).unwrap();
        assert!((realized.maker.apply(&y) - realized.r.component_mul(&rq.u)).norm() < 1e-12);
        assert!((realized.maker.apply(&realized.r.component_mul(&y)) - realized.maker.apply(&y)).norm() < 1e-12);
        let expected = DMatrix::from_diagonal(&pi.pi) * DMatrix::from_diagonal(&realized.wc) * &rq.u;
        assert!((rq.z_c - expected).norm() < 1e-12);

        let fit = est.x() * DVector::from_column_slice(&[1.0, 0.5, -2.0]);
        let rq = est.random_quantities(&realized, &fit).unwrap();
        assert!(realized.r.component_mul(&rq.u).norm() < 1e-12);

        let b = DMatrix::from_fn(8, 8, |i, j| ((i * 3 + j) as f64).cos());
        let dense = m.transpose() * &b * &m;
        assert!((realized.maker.sandwich(&b) - dense).norm() < 1e-12);
    }

    #[test]
    fn linearization_variance_matches_design_quadratic_form() {
        let dist = enumerate(&Design::complete(vec![3, 2]).unwrap(), 100).unwrap();
        let moments = DesignMoments::compute(&dist).unwrap();
        let c = Contrast::new(vec![-1.0, 1.0], 2, 0).unwrap();
        let est = LinearEstimator::new(&EstimatorSpec::ols(None), &c, &moments.pi, 5).unwrap();
        let y = DVector::from_column_slice(&[1.0, 4.0, -2.0, 0.5, 3.0, 2.0, 0.0, 1.0, 1.5, -1.0]);
        let z = est.taylor_quantities(&y).unwrap().z_c;
        let w = w_ht(&moments.pi, 5).unwrap();
        let values: Vec<(f64, f64)> = dist
            .iter()
            .map(|(a, p)| {
                let r = est.indicator(&a).unwrap();
                let lin = 5.0 * (DVector::from_element(2, 1.0).transpose() * &w * r.component_mul(&z))[(0, 0)];
                (lin, p)
            })
            .collect();
        let (_, var) = weighted_mean_var(&values);
        let direct = (z.transpose() * &moments.d.d * &z)[(0, 0)];
        assert!((var - direct).abs() < 1e-10);
    }

    #[test]
    fn ht_constant_outcome_has_zero_mean_estimate() {
        let dist = enumerate(&Design::complete(vec![2, 2]).unwrap(), 100).unwrap();
        let pi = compute_pi(&dist).unwrap();
        let c = Contrast::new(vec![-1.0, 1.0], 2, 0).unwrap();
        let est = LinearEstimator::new(&EstimatorSpec::ht(), &c, &pi, 4).unwrap();
        let y = DVector::from_element(8, 3.7);
        let mean: f64 = dist
            .iter()
            .map(|(a, p)| p * est.point_estimate(&est.realize(&a).unwrap(), &y).unwrap())
            .sum();
        assert!(mean.abs() < 1e-12);
    }

    #[test]
    fn spec_json() {
        let spec: EstimatorSpec = serde_json::from_str(
            r#"{"kind":"wls","m":"inv_pi","covariates":{"layout":"pooled","columns":[[1,2]]}}"#,
        )
        .unwrap();
        assert_eq!(spec.m, Weights::Named(NamedWeights::InvPi));
        let spec: EstimatorSpec = serde_json::from_str(r#"{"kind":"WLS","m":[1,0,2,1]}"#).unwrap();
        assert_eq!(spec.m, Weights::Vector(vec![1.0, 0.0, 2.0, 1.0]));
        assert!(spec.m_vector(&DVector::from_element(4, 0.5)).is_ok());
        let bad = EstimatorSpec {
            m: Weights::Vector(vec![0.0; 4]),
            ..spec
        };
        assert!(bad.m_vector(&DVector::from_element(4, 0.5)).is_err());
    }
}
