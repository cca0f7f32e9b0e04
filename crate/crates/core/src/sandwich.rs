//! The Generalized Sandwich (GS) variance estimator, its center matrix
//! `O_(0)` and design mean `o_(0)`, and the classical HC/CR sandwiches used
//! as baselines.
//!
//! Convention: `M` is the residual maker of the realized assignment, which is
//! not symmetric for general WLS weights. Every quadratic form is written
//! with `M'` on the left, so that `y'M'BMy = (My)'B(My)` and the observed
//! residual vector `My = R U` appears on both sides.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::design::DesignDistribution;
use crate::error::{Error, Result};
use crate::estimators::{LinearEstimator, Realized};
use crate::linalg::{inverse_sqrt_spd, invert_normal, quad_form};
use crate::matrix_io::{Fingerprint, MatrixCache};
use crate::moments::{matrix_expectation, MatrixMoments};

fn check_square(m: &DMatrix<f64>, kn: usize, what: &str) -> Result<()> {
    if m.shape() != (kn, kn) {
        return Err(Error::shape(format!("{what} {kn}x{kn}"), format!("{:?}", m.shape())));
    }
    Ok(())
}

/// `diag(π ∘ W'c) (d̃/p) diag(π ∘ W'c)`.
fn center(pi: &DVector<f64>, wc: &DVector<f64>, dp: &DMatrix<f64>) -> DMatrix<f64> {
    let s = pi.component_mul(wc);
    DMatrix::from_fn(dp.nrows(), dp.ncols(), |a, b| s[a] * dp[(a, b)] * s[b])
}

/// GS value `Z_c' R (d̃/p) R Z_c` at a realized assignment.
pub fn gs_estimate(est: &LinearEstimator, realized: &Realized, y: &DVector<f64>, dp: &DMatrix<f64>) -> Result<f64> {
    check_square(dp, est.kn(), "d̃/p")?;
    let rq = est.random_quantities(realized, y)?;
    let rz = realized.r.component_mul(&rq.z_c);
    Ok(quad_form(dp, rz.as_slice()))
}

/// The three algebraically equal ways of writing GS.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GsForms {
    /// `Z_c' R (d̃/p) R Z_c`
    pub z_form: f64,
    /// `c'W diag(RU) (π (d̃/p) π) diag(RU) W'c`
    pub weight_form: f64,
    /// `y' O_(0) y`
    pub o_form: f64,
}

impl GsForms {
    /// Largest pairwise gap relative to the largest magnitude (absolute below 1).
    pub fn max_relative_gap(&self) -> f64 {
        let v = [self.z_form, self.weight_form, self.o_form];
        let scale = v.iter().fold(1.0f64, |m, x| m.max(x.abs()));
        let gap = (v[0] - v[1]).abs().max((v[0] - v[2]).abs()).max((v[1] - v[2]).abs());
        gap / scale
    }
}

pub fn gs_forms(est: &LinearEstimator, realized: &Realized, y: &DVector<f64>, dp: &DMatrix<f64>) -> Result<GsForms> {
    let z_form = gs_estimate(est, realized, y, dp)?;
    let rq = est.random_quantities(realized, y)?;
    let ru = DMatrix::from_diagonal(&realized.r.component_mul(&rq.u));
    let pi = DMatrix::from_diagonal(est.pi());
    let c = est.contrast().values();
    let left = c.transpose() * &realized.w * &ru;
    let weight_form = (&left * (&pi * dp * &pi) * left.transpose())[(0, 0)];
    let o0 = o0_matrix(est, realized, dp)?;
    let o_form = quad_form(&o0, y.as_slice());
    Ok(GsForms {
        z_form,
        weight_form,
        o_form,
    })
}

/// `O_(0) = M' diag(W'c) π (d̃/p) π diag(W'c) M`, so that `GS = y'O_(0)y`.
pub fn o0_matrix(est: &LinearEstimator, realized: &Realized, dp: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_square(dp, est.kn(), "d̃/p")?;
    Ok(realized.maker.sandwich(&center(est.pi(), &realized.wc, dp)))
}

/// `o_(0) = E[O_(0)]`, exact or Monte Carlo with entrywise standard errors.
pub fn o0_mean(dist: &DesignDistribution, est: &LinearEstimator, dp: &DMatrix<f64>) -> Result<MatrixMoments> {
    let kn = est.kn();
    check_square(dp, kn, "d̃/p")?;
    if dist.kn() != kn {
        return Err(Error::shape(format!("design with kn = {kn}"), dist.kn().to_string()));
    }
    matrix_expectation(dist, kn, kn, |assignment, out| {
        let realized = est.realize(assignment)?;
        let o = o0_matrix(est, &realized, dp)?;
        out.copy_from_slice(o.as_slice());
        Ok(())
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CachedMeta {
    kind: String,
    kn: usize,
    count: usize,
}

/// [`o0_mean`] through a content-addressed cache keyed by the distribution,
/// the estimator and `d̃/p`.
pub fn o0_mean_cached(
    dist: &DesignDistribution,
    est: &LinearEstimator,
    dp: &DMatrix<f64>,
    cache: Option<&MatrixCache>,
) -> Result<MatrixMoments> {
    let Some(cache) = cache else {
        return o0_mean(dist, est, dp);
    };
    let mut f = Fingerprint::new("o0");
    f.distribution(dist)?;
    est.fingerprint(&mut f);
    f.matrix(dp);
    let key = f.finish();
    if let Some((mean, std_err, meta)) = cache.get::<CachedMeta>(&key)? {
        return Ok(MatrixMoments {
            mean,
            std_err,
            count: meta.count,
        });
    }
    let m = o0_mean(dist, est, dp)?;
    let meta = CachedMeta {
        kind: "o0".into(),
        kn: est.kn(),
        count: m.count,
    };
    cache.put(&key, &m.mean, m.std_err.as_ref(), &meta)?;
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HcVariant {
    HC0,
    HC1,
    HC2,
    CR0,
    CR1,
    CR2,
}

impl HcVariant {
    pub fn is_clustered(self) -> bool {
        matches!(self, HcVariant::CR0 | HcVariant::CR1 | HcVariant::CR2)
    }

    pub fn name(self) -> &'static str {
        match self {
            HcVariant::HC0 => "HC0",
            HcVariant::HC1 => "HC1",
            HcVariant::HC2 => "HC2",
            HcVariant::CR0 => "CR0",
            HcVariant::CR1 => "CR1",
            HcVariant::CR2 => "CR2",
        }
    }
}

/// Sample-size information for the classical refinements.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefinementMeta {
    pub n_obs: usize,
    pub rank: usize,
    pub n_clusters: Option<usize>,
    /// Common leverage `h`, when every unit (or cluster block) has the same one.
    pub leverage: Option<f64>,
}

fn dof_scale(variant: HcVariant, meta: &RefinementMeta) -> Result<f64> {
    let n = meta.n_obs as f64;
    let resid_dof = meta.n_obs as f64 - meta.rank as f64;
    match variant {
        HcVariant::HC1 => {
            if resid_dof <= 0.0 {
                return Err(Error::DegenerateDoF(format!("n - rank = {resid_dof}")));
            }
            Ok(n / resid_dof)
        }
        HcVariant::CR1 => {
            let g = meta
                .n_clusters
                .ok_or_else(|| Error::Config("CR1 needs a cluster count".into()))? as f64;
            if g <= 1.0 || resid_dof <= 0.0 {
                return Err(Error::DegenerateDoF(format!("G - 1 = {}, n - rank = {resid_dof}", g - 1.0)));
            }
            Ok(g / (g - 1.0) * (n - 1.0) / resid_dof)
        }
        _ => Ok(1.0),
    }
}

/// Rescales an HC0/CR0 value to another variant.
///
/// * HC1: `n / (n - rank)`
/// * CR1: `G/(G-1) · (n-1)/(n-rank)`
/// * HC2/CR2: residuals scaled by `(1-h)^{-1/2}`, i.e. `base / (1-h)` when the
///   leverage `h` is common to every term; general leverage needs
///   [`ClassicalFit::variance`].
pub fn hc_refinement(base: f64, variant: HcVariant, meta: &RefinementMeta) -> Result<f64> {
    match variant {
        HcVariant::HC0 | HcVariant::CR0 => Ok(base),
        HcVariant::HC1 | HcVariant::CR1 => Ok(base * dof_scale(variant, meta)?),
        HcVariant::HC2 | HcVariant::CR2 => {
            let h = meta.leverage.ok_or_else(|| {
                Error::Config("leverage-adjusted refinement needs a common leverage or a full fit".into())
            })?;
            if h >= 1.0 {
                return Err(Error::DegenerateDoF(format!("leverage {h} >= 1")));
            }
            Ok(base / (1.0 - h))
        }
    }
}

/// Ordinary least squares on observed data with classical sandwich variances.
#[derive(Debug, Clone)]
pub struct ClassicalFit {
    x: DMatrix<f64>,
    bread: DMatrix<f64>,
    resid: DVector<f64>,
    clusters: Option<Vec<usize>>,
    n_clusters: usize,
}

impl ClassicalFit {
    /// `clusters` holds dense cluster ids `0..G` per row, when clustered
    /// variants are wanted.
    pub fn new(x: DMatrix<f64>, y: &DVector<f64>, clusters: Option<Vec<usize>>) -> Result<Self> {
        if y.len() != x.nrows() {
            return Err(Error::shape(format!("y of length {}", x.nrows()), y.len().to_string()));
        }
        let n_clusters = match &clusters {
            Some(c) if c.len() != x.nrows() => {
                return Err(Error::shape(format!("{} cluster ids", x.nrows()), c.len().to_string()))
            }
            Some(c) => c.iter().max().map_or(0, |m| m + 1),
            None => 0,
        };
        let bread = invert_normal(&(x.transpose() * &x), "classical OLS")?;
        let beta = &bread * (x.transpose() * y);
        let resid = y - &x * beta;
        Ok(ClassicalFit {
            x,
            bread,
            resid,
            clusters,
            n_clusters,
        })
    }

    pub fn coefficients_dot(&self, c: &DVector<f64>, y: &DVector<f64>) -> f64 {
        (c.transpose() * &self.bread * (self.x.transpose() * y))[(0, 0)]
    }

    pub fn meta(&self) -> RefinementMeta {
        RefinementMeta {
            n_obs: self.x.nrows(),
            rank: self.x.ncols(),
            n_clusters: self.clusters.as_ref().map(|_| self.n_clusters),
            leverage: None,
        }
    }

    fn groups(&self, variant: HcVariant) -> Result<Vec<Vec<usize>>> {
        if !variant.is_clustered() {
            return Ok((0..self.x.nrows()).map(|i| vec![i]).collect());
        }
        let clusters = self
            .clusters
            .as_ref()
            .ok_or_else(|| Error::Config(format!("{} needs cluster ids", variant.name())))?;
        let mut groups = vec![Vec::new(); self.n_clusters];
        for (i, &g) in clusters.iter().enumerate() {
            groups[g].push(i);
        }
        groups.retain(|g| !g.is_empty());
        Ok(groups)
    }

    /// `c' V c` for the requested variant.
    pub fn variance(&self, c: &DVector<f64>, variant: HcVariant) -> Result<f64> {
        if c.len() != self.x.ncols() {
            return Err(Error::shape(format!("contrast of length {}", self.x.ncols()), c.len().to_string()));
        }
        // per-row influence weights: a_i = x_i (X'X)^{-1} c
        let a = &self.x * (&self.bread * c);
        let leverage_adjusted = matches!(variant, HcVariant::HC2 | HcVariant::CR2);
        let mut total = 0.0;
        for group in self.groups(variant)? {
            let e = DVector::from_iterator(group.len(), group.iter().map(|&i| self.resid[i]));
            let e = if leverage_adjusted {
                let xg = self.x.select_rows(&group);
                let h = &xg * &self.bread * xg.transpose();
                let ih = DMatrix::identity(group.len(), group.len()) - h;
                inverse_sqrt_spd(&ih)? * e
            } else {
                e
            };
            let s: f64 = group.iter().zip(e.iter()).map(|(&i, ei)| a[i] * ei).sum();
            total += s * s;
        }
        Ok(total * dof_scale(variant, &self.meta())?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bounding::{amgm_bound, weight_by_p};
    use crate::design::{enumerate, Assignment, Design};
    use crate::estimators::{Contrast, CovariateBlock, CovariateLayout, EstimatorSpec};
    use crate::kernel::DesignMoments;
    use crate::linalg::min_eigenvalue;

    fn setup(design: Design, spec: EstimatorSpec) -> (DesignDistribution, DesignMoments, LinearEstimator, DMatrix<f64>) {
        let dist = enumerate(&design, 10_000).unwrap();
        let moments = DesignMoments::compute(&dist).unwrap();
        let q = spec.n_coefficients(moments.k_arms);
        let mut c = vec![0.0; q];
        c[0] = -1.0;
        c[1] = 1.0;
        let contrast = Contrast::new(c, moments.k_arms, q - moments.k_arms).unwrap();
        let est = LinearEstimator::new(&spec, &contrast, &moments.pi, moments.n_units).unwrap();
        let dp = weight_by_p(&amgm_bound(&moments.d, &moments.p).unwrap().d_tilde, &moments.p).unwrap();
        (dist, moments, est, dp)
    }

    fn pseudo_y(kn: usize, salt: f64) -> DVector<f64> {
        DVector::from_fn(kn, |i, _| ((i as f64 + 1.0) * 1.37 + salt).sin() * 2.0)
    }

    #[test]
    fn three_forms_agree_and_vanish_on_fitted_values() {
        let cov = CovariateBlock {
            layout: CovariateLayout::Pooled,
            columns: vec![vec![0.5, -1.0, 2.0, 0.1]],
        };
        let (_, _, est, dp) = setup(Design::complete(vec![2, 2]).unwrap(), EstimatorSpec::ols(Some(cov)));
        let realized = est.realize(&Assignment::new(vec![1, 2, 1, 2])).unwrap();
        let y = pseudo_y(8, 0.3);
        let forms = gs_forms(&est, &realized, &y, &dp).unwrap();
        assert!(forms.max_relative_gap() < 1e-12, "{forms:?}");
        let fit = est.x() * DVector::from_column_slice(&[0.4, -1.0, 3.0]);
        assert!(gs_estimate(&est, &realized, &fit, &dp).unwrap().abs() < 1e-20);
    }

    #[test]
    fn o0_is_psd_and_annihilates_covariate_span() {
        let (_, _, est, dp) = setup(Design::complete(vec![3, 2]).unwrap(), EstimatorSpec::ols(None));
        let realized = est.realize(&Assignment::new(vec![1, 2, 1, 2, 1])).unwrap();
        let o = o0_matrix(&est, &realized, &dp).unwrap();
        assert!((&o - o.transpose()).norm() < 1e-12);
        assert!(min_eigenvalue(&o).unwrap() >= -1e-9);
        assert!((&o * est.x()).norm() < 1e-12);
    }

    #[test]
    fn expected_gs_equals_o0_quadratic_form() {
        let (dist, _, est, dp) = setup(Design::complete(vec![3, 2]).unwrap(), EstimatorSpec::hajek());
        let o0 = o0_mean(&dist, &est, &dp).unwrap();
        let y = pseudo_y(10, 1.1);
        let mean: f64 = dist
            .iter()
            .map(|(a, w)| w * gs_estimate(&est, &est.realize(&a).unwrap(), &y, &dp).unwrap())
            .sum();
        let q = quad_form(&o0.mean, y.as_slice());
        assert!((mean - q).abs() <= 1e-10 * q.abs().max(1.0));
    }

    #[test]
    fn degenerate_design_mean_is_the_realization() {
        let design = Design::complete(vec![2, 1]).unwrap();
        let a = Assignment::new(vec![1, 2, 1]);
        let dist = DesignDistribution::from_support(3, 2, vec![(a.clone(), 1.0)]).unwrap();
        let (_, _, est, dp) = setup(design, EstimatorSpec::ols(None));
        let o0 = o0_mean(&dist, &est, &dp).unwrap();
        assert_eq!(o0.mean, o0_matrix(&est, &est.realize(&a).unwrap(), &dp).unwrap());
    }

    #[test]
    fn cache_returns_identical_matrix() {
        let dir = tempfile::tempdir().unwrap();
        let cache = MatrixCache::new(dir.path()).unwrap();
        let (dist, _, est, dp) = setup(Design::complete(vec![2, 2]).unwrap(), EstimatorSpec::ols(None));
        let first = o0_mean_cached(&dist, &est, &dp, Some(&cache)).unwrap();
        let second = o0_mean_cached(&dist, &est, &dp, Some(&cache)).unwrap();
        assert_eq!(first.mean, second.mean);
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 2);
    }

    #[test]
    fn refinement_scales() {
        let meta = RefinementMeta {
            n_obs: 10,
            rank: 2,
            n_clusters: None,
            leverage: Some(0.2),
        };
        assert!((hc_refinement(2.0, HcVariant::HC1, &meta).unwrap() - 2.5).abs() < 1e-15);
        assert!((hc_refinement(2.0, HcVariant::HC2, &meta).unwrap() - 2.5).abs() < 1e-15);
        let meta = RefinementMeta {
            n_obs: 497,
            rank: 2,
            n_clusters: Some(7),
            leverage: None,
        };
        let want = 7.0 / 6.0 * 496.0 / 495.0;
        assert!((hc_refinement(1.0, HcVariant::CR1, &meta).unwrap() - want).abs() < 1e-15);
        let bad = RefinementMeta {
            n_obs: 2,
            rank: 2,
            n_clusters: Some(1),
            leverage: None,
        };
        assert!(matches!(hc_refinement(1.0, HcVariant::HC1, &bad), Err(Error::DegenerateDoF(_))));
        assert!(matches!(hc_refinement(1.0, HcVariant::CR1, &bad), Err(Error::DegenerateDoF(_))));
    }

    #[test]
    fn classical_fit_variants_on_balanced_layout() {
        // two groups of three: leverage 1/3 everywhere
        let x = DMatrix::from_fn(6, 2, |i, j| if (i < 3) == (j == 0) { 1.0 } else { 0.0 });
        let y = DVector::from_column_slice(&[1.0, 2.0, 4.0, -1.0, 0.0, 3.0]);
        let c = DVector::from_column_slice(&[-1.0, 1.0]);
        let fit = ClassicalFit::new(x, &y, Some(vec![0, 0, 1, 1, 2, 2])).unwrap();
        // HC0 oracle: sum over arms of squared residuals / n_j^2
        let e: [f64; 6] = [1.0 - 7.0 / 3.0, 2.0 - 7.0 / 3.0, 4.0 - 7.0 / 3.0, -1.0 - 2.0 / 3.0, -2.0 / 3.0, 3.0 - 2.0 / 3.0];
        let hc0: f64 = e.iter().map(|v| v * v / 9.0).sum();
        assert!((fit.variance(&c, HcVariant::HC0).unwrap() - hc0).abs() < 1e-12);
        assert!((fit.variance(&c, HcVariant::HC1).unwrap() - hc0 * 1.5).abs() < 1e-12);
        assert!((fit.variance(&c, HcVariant::HC2).unwrap() - hc0 * 1.5).abs() < 1e-12);
        let mut meta = fit.meta();
        meta.leverage = Some(1.0 / 3.0);
        assert!((hc_refinement(hc0, HcVariant::HC2, &meta).unwrap() - fit.variance(&c, HcVariant::HC2).unwrap()).abs() < 1e-12);
        assert!(fit.variance(&c, HcVariant::CR0).unwrap() > 0.0);
        assert!(fit.variance(&c, HcVariant::CR2).is_ok());
    }

    #[test]
    fn singleton_groups_make_cr2_degenerate() {
        let x = DMatrix::from_fn(4, 2, |i, j| if (i < 2) == (j == 0) { 1.0 } else { 0.0 });
        let y = DVector::from_column_slice(&[1.0, 2.0, 3.0, 5.0]);
        let fit = ClassicalFit::new(x, &y, Some(vec![0, 0, 1, 1])).unwrap();
        let c = DVector::from_column_slice(&[-1.0, 1.0]);
        assert!(matches!(fit.variance(&c, HcVariant::CR2), Err(Error::DegenerateDoF(_))));
        assert!(fit.variance(&c, HcVariant::CR1).is_ok());
    }
}
