//! Obložené Chlebíčky (OC) estimators.
//!
//! * OC0 `= y'R (o/p) R y` is unbiased for `E[GS] = y'o_(0)y` but not location invariant.
//! * OC1 `= y'M'(o/p)My` is invariant but biased for `E[GS]`.
//! * OC2 removes the bias through the degree-4 design tensor
//!   `b[(a,d),(b,c)] = E[M_ba M_cd - R_ab R_cd] / sqrt(p_ad p_bc)`, stored
//!   matricized with row index `a*kn + d` and column index `b*kn + c`.
//!
//! With that layout `E[M'QM] = √p ∘ ((I + b)(√p ∘ Q))` for any `Q` vanishing
//! on unidentified cells, which is what the spectral split inverts.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::design::DesignDistribution;
use crate::error::{Error, Result};
use crate::estimators::{LinearEstimator, Realized};
use crate::kernel::safe_divide;
use crate::linalg::{asymmetry, quad_form, symmetrize};
use crate::matrix_io::{Fingerprint, MatrixCache};
use crate::moments::matrix_expectation;

/// Largest `kn` accepted by the tensor path (`(kn)^2 x (kn)^2` dense matrices).
pub const MAX_TENSOR_KN: usize = 60;
/// Eigenvalues at or above `1 - GE1_EPS` go to the `λ >= 1` partition.
pub const GE1_EPS: f64 = 1e-9;
/// Eigenvalues with magnitude at or below this are numerical zeros.
pub const ZERO_EIGENVALUE: f64 = 1e-12;
/// Relative asymmetry above which the matricized tensor is flagged.
pub const SYMMETRY_TOL: f64 = 1e-8;
/// Slack on the upper end of `[0, 1]` for the eigenvalue range diagnostic.
pub const LAMBDA_RANGE_TOL: f64 = 1e-8;

fn guard(kn: usize) -> Result<()> {
    if kn > MAX_TENSOR_KN {
        return Err(Error::TensorTooLarge { kn, max: MAX_TENSOR_KN });
    }
    Ok(())
}

/// `o_(0) / p` with division by zero resolving to zero.
pub fn o_over_p(o0: &DMatrix<f64>, p: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    safe_divide(o0, p)
}

pub fn oc0(r: &DVector<f64>, y: &DVector<f64>, o_over_p: &DMatrix<f64>) -> Result<f64> {
    if r.len() != y.len() || o_over_p.shape() != (y.len(), y.len()) {
        return Err(Error::shape(format!("kn = {}", r.len()), format!("y {}, o/p {:?}", y.len(), o_over_p.shape())));
    }
    Ok(quad_form(o_over_p, r.component_mul(y).as_slice()))
}

fn m_quad(realized: &Realized, y: &DVector<f64>, q: &DMatrix<f64>) -> Result<f64> {
    let kn = realized.maker.kn();
    if y.len() != kn || q.shape() != (kn, kn) {
        return Err(Error::shape(format!("kn = {kn}"), format!("y {}, matrix {:?}", y.len(), q.shape())));
    }
    Ok(quad_form(q, realized.maker.apply(y).as_slice()))
}

pub fn oc1(realized: &Realized, y: &DVector<f64>, o_over_p: &DMatrix<f64>) -> Result<f64> {
    m_quad(realized, y, o_over_p)
}

/// `O_(1) = M'(o/p)M`.
pub fn o1_matrix(realized: &Realized, o_over_p: &DMatrix<f64>) -> DMatrix<f64> {
    realized.maker.sandwich(o_over_p)
}

fn inv_sqrt(p: &DMatrix<f64>) -> DMatrix<f64> {
    p.map(|v| if v > 0.0 { 1.0 / v.sqrt() } else { 0.0 })
}

/// Writes the matricized tensor of one assignment into a column-major buffer.
fn fill_tensor(realized: &Realized, p_inv_sqrt: &DMatrix<f64>, out: &mut [f64]) {
    let kn = realized.maker.kn();
    let dim = kn * kn;
    let obs = realized.maker.observed();
    let m = realized.maker.to_dense();
    for &b in obs {
        for &c in obs {
            let col = b * kn + c;
            let s_bc = p_inv_sqrt[(b, c)];
            if s_bc == 0.0 {
                continue;
            }
            let column = &mut out[col * dim..(col + 1) * dim];
            for &a in obs {
                let m_ba = m[(b, a)];
                for &d in obs {
                    let r_term = if a == b && c == d { 1.0 } else { 0.0 };
                    let v = m_ba * m[(c, d)] - r_term;
                    if v != 0.0 {
                        column[a * kn + d] = v * p_inv_sqrt[(a, d)] * s_bc;
                    }
                }
            }
        }
    }
}

/// The matricized tensor `B` at one realized assignment.
pub fn tensor_b(realized: &Realized, p: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let kn = realized.maker.kn();
    guard(kn)?;
    if p.shape() != (kn, kn) {
        return Err(Error::shape(format!("p {kn}x{kn}"), format!("{:?}", p.shape())));
    }
    let dim = kn * kn;
    let mut out = vec![0.0; dim * dim];
    fill_tensor(realized, &inv_sqrt(p), &mut out);
    Ok(DMatrix::from_vec(dim, dim, out))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorMeta {
    pub kn: usize,
    pub exact: bool,
    pub count: usize,
}

/// `b̄ = E[B]`, matricized, with Monte Carlo standard errors when sampled.
#[derive(Debug, Clone)]
pub struct MomentTensor {
    pub bbar: DMatrix<f64>,
    pub std_err: Option<DMatrix<f64>>,
    pub meta: TensorMeta,
}

impl MomentTensor {
    pub fn kn(&self) -> usize {
        self.meta.kn
    }

    /// Index of entry `(a, b, c, d)` in the matricized layout.
    pub fn index(&self, a: usize, b: usize, c: usize, d: usize) -> (usize, usize) {
        let kn = self.meta.kn;
        (a * kn + d, b * kn + c)
    }
}

pub fn bbar_mean(dist: &DesignDistribution, est: &LinearEstimator, p: &DMatrix<f64>) -> Result<MomentTensor> {
    let kn = est.kn();
    guard(kn)?;
    if p.shape() != (kn, kn) || dist.kn() != kn {
        return Err(Error::shape(format!("kn = {kn}"), format!("p {:?}, design kn {}", p.shape(), dist.kn())));
    }
    let s = inv_sqrt(p);
    let dim = kn * kn;
    let m = matrix_expectation(dist, dim, dim, |assignment, out| {
        let realized = est.realize(assignment)?;
        fill_tensor(&realized, &s, out);
        Ok(())
    })?;
    Ok(MomentTensor {
        bbar: m.mean,
        std_err: m.std_err,
        meta: TensorMeta {
            kn,
            exact: dist.is_exact(),
            count: m.count,
        },
    })
}

/// [`bbar_mean`] through a content-addressed cache.
pub fn bbar_mean_cached(
    dist: &DesignDistribution,
    est: &LinearEstimator,
    p: &DMatrix<f64>,
    cache: Option<&MatrixCache>,
) -> Result<MomentTensor> {
    let Some(cache) = cache else {
        return bbar_mean(dist, est, p);
    };
    guard(est.kn())?;
    let mut f = Fingerprint::new("bbar");
    f.distribution(dist)?;
    est.fingerprint(&mut f);
    f.matrix(p);
    let key = f.finish();
    if let Some((bbar, std_err, meta)) = cache.get::<TensorMeta>(&key)? {
        return Ok(MomentTensor { bbar, std_err, meta });
    }
    let t = bbar_mean(dist, est, p)?;
    cache.put(&key, &t.bbar, t.std_err.as_ref(), &t.meta)?;
    Ok(t)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralDiagnostics {
    /// `||X - X'||_F / ||X||_F` of the matricized `-b̄`.
    pub asymmetry: f64,
    /// Whether the asymmetry exceeded [`SYMMETRY_TOL`].
    pub asymmetry_flagged: bool,
    pub max_lambda: f64,
    pub min_lambda: f64,
    /// All retained eigenvalues in `[0, 1 + LAMBDA_RANGE_TOL]`.
    pub lambda_in_range: bool,
    /// `||-U Λ U' - b̄||_F / ||b̄||_F`.
    pub reconstruction_error: f64,
    /// `||U'U - I||_F` on retained columns.
    pub orthogonality_error: f64,
}

/// Eigen-split of the symmetrized `-b̄` into the `λ < 1` (series) and `λ >= 1` parts.
#[derive(Debug, Clone)]
pub struct SpectralSplit {
    pub dim: usize,
    /// Retained eigenvalues, descending.
    pub lambda: DVector<f64>,
    /// Matching eigenvectors as columns, `dim x lambda.len()`.
    pub u: DMatrix<f64>,
    /// Positions in `lambda` with `λ < 1 - eps`.
    pub series: Vec<usize>,
    /// Positions in `lambda` with `λ >= 1 - eps`.
    pub ge1: Vec<usize>,
    /// `λ / (1 - λ)` for each entry of `series`.
    pub phi: DVector<f64>,
    pub diagnostics: SpectralDiagnostics,
}

pub fn spectral_split(tensor: &MomentTensor, eps: f64) -> Result<SpectralSplit> {
    let bbar = &tensor.bbar;
    let dim = bbar.nrows();
    if !bbar.is_square() || dim != tensor.kn() * tensor.kn() {
        return Err(Error::shape(format!("{0}x{0}", tensor.kn() * tensor.kn()), format!("{:?}", bbar.shape())));
    }
    if bbar.iter().any(|v| !v.is_finite()) {
        return Err(Error::SvdFailure("tensor has non-finite entries".into()));
    }
    let neg = -bbar;
    let asym = asymmetry(&neg);
    let sym = symmetrize(&neg);
    // rows and columns that are identically zero carry no spectrum
    let active: Vec<usize> = (0..dim)
        .filter(|&i| sym.row(i).iter().any(|&v| v != 0.0))
        .collect();
    let sub = sym.select_rows(&active).select_columns(&active);
    let (values, vectors) = if active.is_empty() {
        (DVector::zeros(0), DMatrix::zeros(0, 0))
    } else {
        let eig = SymmetricEigen::try_new(sub, f64::EPSILON, 0)
            .ok_or_else(|| Error::SvdFailure("symmetric eigendecomposition did not converge".into()))?;
        (eig.eigenvalues, eig.eigenvectors)
    };
    let mut order: Vec<usize> = (0..values.len()).filter(|&i| values[i].abs() > ZERO_EIGENVALUE).collect();
    order.sort_by(|&i, &j| values[j].total_cmp(&values[i]));
    let lambda = DVector::from_iterator(order.len(), order.iter().map(|&i| values[i]));
    let mut u = DMatrix::zeros(dim, order.len());
    for (col, &i) in order.iter().enumerate() {
        for (k, &row) in active.iter().enumerate() {
            u[(row, col)] = vectors[(k, i)];
        }
    }
    let series: Vec<usize> = (0..lambda.len()).filter(|&i| lambda[i] < 1.0 - eps).collect();
    let ge1: Vec<usize> = (0..lambda.len()).filter(|&i| lambda[i] >= 1.0 - eps).collect();
    let phi = DVector::from_iterator(series.len(), series.iter().map(|&i| lambda[i] / (1.0 - lambda[i])));

    let recon = -(&u * DMatrix::from_diagonal(&lambda) * u.transpose());
    let norm = bbar.norm();
    let reconstruction_error = if norm == 0.0 { 0.0 } else { (recon - bbar).norm() / norm };
    let orthogonality_error = (u.transpose() * &u - DMatrix::identity(lambda.len(), lambda.len())).norm();
    let max_lambda = lambda.iter().copied().fold(0.0f64, f64::max);
    let min_lambda = lambda.iter().copied().fold(0.0f64, f64::min);
    Ok(SpectralSplit {
        dim,
        lambda,
        u,
        series,
        ge1,
        phi,
        diagnostics: SpectralDiagnostics {
            asymmetry: asym,
            asymmetry_flagged: asym > SYMMETRY_TOL,
            max_lambda,
            min_lambda,
            lambda_in_range: min_lambda >= 0.0 && max_lambda <= 1.0 + LAMBDA_RANGE_TOL,
            reconstruction_error,
            orthogonality_error,
        },
    })
}

impl SpectralSplit {
    fn columns(&self, idx: &[usize]) -> DMatrix<f64> {
        self.u.select_columns(idx)
    }

    fn part(&self, idx: &[usize], values: &DVector<f64>) -> DMatrix<f64> {
        let u = self.columns(idx);
        -(&u * DMatrix::from_diagonal(values) * u.transpose())
    }

    /// `b̄_(0<λ<1) = -U Λ U'` on the series partition.
    pub fn series_part(&self) -> DMatrix<f64> {
        let values = DVector::from_iterator(self.series.len(), self.series.iter().map(|&i| self.lambda[i]));
        self.part(&self.series, &values)
    }

    /// `b̄_(λ>=1) = -U Λ U'` on the remaining partition.
    pub fn ge1_part(&self) -> DMatrix<f64> {
        let values = DVector::from_iterator(self.ge1.len(), self.ge1.iter().map(|&i| self.lambda[i]));
        self.part(&self.ge1, &values)
    }

    /// Largest eigenvalue magnitude in the series partition.
    pub fn series_lambda_max(&self) -> f64 {
        self.series.iter().map(|&i| self.lambda[i].abs()).fold(0.0, f64::max)
    }

    /// `(-U Φ U') v` on the series partition without forming the matrix.
    fn apply_closed_form(&self, v: &DVector<f64>) -> DVector<f64> {
        let u = self.columns(&self.series);
        let coeffs = (u.transpose() * v).component_mul(&self.phi);
        -(u * coeffs)
    }

    fn apply_ge1(&self, v: &DVector<f64>) -> DVector<f64> {
        let u = self.columns(&self.ge1);
        let values = DVector::from_iterator(self.ge1.len(), self.ge1.iter().map(|&i| self.lambda[i]));
        let coeffs = (u.transpose() * v).component_mul(&values);
        -(u * coeffs)
    }
}

/// Closed form `b̄_∞ = -U Φ U'` of the alternating series `b - b² + b³ - …`.
pub fn series_closed_form(split: &SpectralSplit) -> DMatrix<f64> {
    split.part(&split.series, &split.phi)
}

/// Partial sum `Σ_{j=1..terms} (-1)^{j+1} b^j` of the matricized series.
pub fn truncated_series(b: &DMatrix<f64>, terms: usize) -> DMatrix<f64> {
    let mut power = b.clone();
    let mut sum = b.clone();
    for j in 2..=terms {
        power = &power * b;
        if j % 2 == 0 {
            sum -= &power;
        } else {
            sum += &power;
        }
    }
    sum
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeriesCheck {
    pub terms: usize,
    /// Frobenius-relative gap between the partial sum and the closed form.
    pub gap: f64,
    /// `λ_max^terms / (1 - λ_max)`.
    pub bound: f64,
}

pub fn series_check(split: &SpectralSplit, terms: usize) -> SeriesCheck {
    let closed = series_closed_form(split);
    let partial = truncated_series(&split.series_part(), terms);
    let norm = closed.norm();
    let gap = if norm == 0.0 { (partial - &closed).norm() } else { (partial - &closed).norm() / norm };
    let lmax = split.series_lambda_max();
    SeriesCheck {
        terms,
        gap,
        bound: lmax.powi(terms as i32) / (1.0 - lmax),
    }
}

fn vec_of(m: &DMatrix<f64>) -> DVector<f64> {
    // row-major flattening: entry (a, d) at a*kn + d
    DVector::from_iterator(m.len(), m.transpose().iter().copied())
}

fn unvec(v: &DVector<f64>, kn: usize) -> DMatrix<f64> {
    DMatrix::from_row_slice(kn, kn, v.as_slice())
}

/// Design-level matrices reused at every assignment.
#[derive(Debug, Clone)]
pub struct OcPrecomputed {
    /// `o_(0) / p`.
    pub o_over_p: DMatrix<f64>,
    /// Center of the first bias term, `(b̄_∞ õ) / √p` unvectorized.
    pub q_bias: DMatrix<f64>,
    /// Center of the second bias term, `(b̄_(λ>=1) õ) / √p` unvectorized.
    pub q_invariant: DMatrix<f64>,
}

impl OcPrecomputed {
    /// OC0/OC1 only; the bias centers are zero.
    pub fn without_tensor(o0: &DMatrix<f64>, p: &DMatrix<f64>) -> Result<Self> {
        let kn = p.nrows();
        Ok(OcPrecomputed {
            o_over_p: o_over_p(o0, p)?,
            q_bias: DMatrix::zeros(kn, kn),
            q_invariant: DMatrix::zeros(kn, kn),
        })
    }

    pub fn new(o0: &DMatrix<f64>, p: &DMatrix<f64>, split: &SpectralSplit) -> Result<Self> {
        let kn = p.nrows();
        if split.dim != kn * kn {
            return Err(Error::shape(format!("tensor for kn = {kn}"), format!("dim {}", split.dim)));
        }
        let o_over_p = o_over_p(o0, p)?;
        let sqrt_p = p.map(|v| v.max(0.0).sqrt());
        let o_tilde = vec_of(&o_over_p.component_mul(&sqrt_p));
        let s = inv_sqrt(p);
        let q_bias = unvec(&split.apply_closed_form(&o_tilde), kn).component_mul(&s);
        let q_invariant = unvec(&split.apply_ge1(&o_tilde), kn).component_mul(&s);
        Ok(OcPrecomputed {
            o_over_p,
            q_bias,
            q_invariant,
        })
    }

    /// `O_(2) = M'(o/p - q_bias)M`.
    pub fn o2_matrix(&self, realized: &Realized) -> DMatrix<f64> {
        realized.maker.sandwich(&(&self.o_over_p - &self.q_bias))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasTerms {
    /// `y'M' q_bias M y`
    pub first: f64,
    /// `y'R q_invariant R y`
    pub second: f64,
}

impl BiasTerms {
    pub fn total(&self) -> f64 {
        self.first + self.second
    }
}

/// Unbiased estimate of `E[OC1] - E[GS]` at a realized assignment.
pub fn bias_estimate(realized: &Realized, y: &DVector<f64>, pre: &OcPrecomputed) -> Result<BiasTerms> {
    Ok(BiasTerms {
        first: m_quad(realized, y, &pre.q_bias)?,
        second: quad_form(&pre.q_invariant, realized.r.component_mul(y).as_slice()),
    })
}

/// Frobenius norm of `R q_invariant R`: zero exactly when the second bias
/// term vanishes for every outcome vector at this assignment.
pub fn invariant_term_norm(r: &DVector<f64>, pre: &OcPrecomputed) -> f64 {
    let obs: Vec<usize> = (0..r.len()).filter(|&a| r[a] != 0.0).collect();
    pre.q_invariant.select_rows(&obs).select_columns(&obs).norm()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Oc2Value {
    /// `OC1 - first bias term`.
    pub value: f64,
    /// `y'O_(2)y` evaluated as one quadratic form.
    pub single_form: f64,
}

pub fn oc2(realized: &Realized, y: &DVector<f64>, pre: &OcPrecomputed) -> Result<Oc2Value> {
    let value = oc1(realized, y, &pre.o_over_p)? - m_quad(realized, y, &pre.q_bias)?;
    let single_form = m_quad(realized, y, &(&pre.o_over_p - &pre.q_bias))?;
    Ok(Oc2Value { value, single_form })
}
