//! Expectations over a design distribution.
//!
//! Work is split into a fixed number of contiguous chunks that depends only on
//! the support size (and, for very large buffers, the buffer length), never on
//! the thread count. Chunks are reduced in a fixed pairwise tree, so results
//! are bit-identical across runs and thread pools.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::design::{Assignment, DesignDistribution};
use crate::error::Result;

const MAX_CHUNKS: usize = 32;
const MEMORY_CAP_BYTES: usize = 1 << 30;

/// Mean of a vector-valued function over the design, with Monte Carlo
/// standard errors when the distribution is sampled.
#[derive(Debug, Clone)]
pub struct Moments {
    pub mean: Vec<f64>,
    pub std_err: Option<Vec<f64>>,
    pub count: usize,
}

fn chunk_ranges(items: usize, len: usize, bytes_per_entry: usize) -> Vec<std::ops::Range<usize>> {
    let mut chunks = items.clamp(1, MAX_CHUNKS);
    let per_chunk = len.max(1) * bytes_per_entry;
    chunks = chunks.min((MEMORY_CAP_BYTES / per_chunk).max(1));
    let size = items.div_ceil(chunks).max(1);
    (0..items).step_by(size).map(|start| start..(start + size).min(items)).collect()
}

fn pairwise_reduce<T>(mut parts: Vec<T>, merge: impl Fn(T, T) -> T) -> Option<T> {
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        let mut iter = parts.into_iter();
        while let Some(left) = iter.next() {
            match iter.next() {
                Some(right) => next.push(merge(left, right)),
                None => next.push(left),
            }
        }
        parts = next;
    }
    parts.into_iter().next()
}

struct Welford {
    count: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    fn merge(mut self, other: Welford) -> Welford {
        if other.count == 0 {
            return self;
        }
        if self.count == 0 {
            return other;
        }
        let na = self.count as f64;
        let nb = other.count as f64;
        let n = na + nb;
        for i in 0..self.mean.len() {
            let delta = other.mean[i] - self.mean[i];
            self.mean[i] += delta * nb / n;
            self.m2[i] += other.m2[i] + delta * delta * na * nb / n;
        }
        self.count += other.count;
        self
    }
}

/// Computes `E[f(R)]` over `dist`. `f` fills a zeroed buffer of length `len`.
pub fn expectation<F>(dist: &DesignDistribution, len: usize, f: F) -> Result<Moments>
where
    F: Fn(&Assignment, &mut [f64]) -> Result<()> + Sync,
{
    let items = dist.len();
    if dist.is_exact() {
        let parts = chunk_ranges(items, len, 8)
            .into_par_iter()
            .map(|range| {
                let mut sum = vec![0.0; len];
                let mut buf = vec![0.0; len];
                for i in range {
                    let (assignment, weight) = dist.get(i);
                    buf.fill(0.0);
                    f(&assignment, &mut buf)?;
                    for (s, v) in sum.iter_mut().zip(&buf) {
                        *s += weight * v;
                    }
                }
                Ok(sum)
            })
            .collect::<Vec<Result<Vec<f64>>>>()
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let mean = pairwise_reduce(parts, |mut a, b| {
            a.iter_mut().zip(&b).for_each(|(x, y)| *x += y);
            a
        })
        .unwrap_or_else(|| vec![0.0; len]);
        Ok(Moments {
            mean,
            std_err: None,
            count: items,
        })
    } else {
        let parts = chunk_ranges(items, len, 16)
            .into_par_iter()
            .map(|range| {
                let mut acc = Welford {
                    count: 0,
                    mean: vec![0.0; len],
                    m2: vec![0.0; len],
                };
                let mut buf = vec![0.0; len];
                for i in range {
                    let (assignment, _) = dist.get(i);
                    buf.fill(0.0);
                    f(&assignment, &mut buf)?;
                    acc.count += 1;
                    let n = acc.count as f64;
                    for ((m, m2), &x) in acc.mean.iter_mut().zip(acc.m2.iter_mut()).zip(&buf) {
                        let delta = x - *m;
                        *m += delta / n;
                        *m2 += delta * (x - *m);
                    }
                }
                Ok(acc)
            })
            .collect::<Vec<Result<Welford>>>()
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let acc = pairwise_reduce(parts, Welford::merge).expect("sampled distribution has draws");
        let n = acc.count as f64;
        let std_err = acc
            .m2
            .iter()
            .map(|&m2| if acc.count > 1 { (m2 / (n - 1.0) / n).sqrt() } else { f64::INFINITY })
            .collect();
        Ok(Moments {
            mean: acc.mean,
            std_err: Some(std_err),
            count: acc.count,
        })
    }
}

/// Matrix-valued counterpart of [`Moments`].
#[derive(Debug, Clone)]
pub struct MatrixMoments {
    pub mean: DMatrix<f64>,
    pub std_err: Option<DMatrix<f64>>,
    pub count: usize,
}

/// `E[F(R)]` for a `rows x cols` matrix function; `f` fills a zeroed
/// column-major buffer.
pub fn matrix_expectation<F>(dist: &DesignDistribution, rows: usize, cols: usize, f: F) -> Result<MatrixMoments>
where
    F: Fn(&Assignment, &mut [f64]) -> Result<()> + Sync,
{
    let m = expectation(dist, rows * cols, f)?;
    Ok(MatrixMoments {
        mean: DMatrix::from_vec(rows, cols, m.mean),
        std_err: m.std_err.map(|se| DMatrix::from_vec(rows, cols, se)),
        count: m.count,
    })
}

/// Evaluates `f` on every assignment in order, returning `(value, weight)` pairs.
///
/// The first failing assignment (lowest index) determines the error.
pub fn evaluate_all<T, F>(dist: &DesignDistribution, f: F) -> Result<Vec<(T, f64)>>
where
    T: Send,
    F: Fn(usize, &Assignment) -> Result<T> + Sync,
{
    (0..dist.len())
        .into_par_iter()
        .map(|i| {
            let (assignment, weight) = dist.get(i);
            f(i, &assignment).map(|v| (v, weight))
        })
        .collect::<Vec<Result<(T, f64)>>>()
        .into_iter()
        .collect()
}

/// Weighted mean and variance of scalar values (weights sum to one).
pub fn weighted_mean_var(values: &[(f64, f64)]) -> (f64, f64) {
    let total: f64 = values.iter().map(|(_, w)| w).sum();
    let mean = values.iter().map(|(v, w)| v * w).sum::<f64>() / total;
    let var = values.iter().map(|(v, w)| w * (v - mean).powi(2)).sum::<f64>() / total;
    (mean, var)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::{enumerate, Design};

    #[test]
    fn chunking_depends_only_on_sizes() {
        let a = chunk_ranges(128, 10, 8);
        let b = chunk_ranges(128, 10, 8);
        assert_eq!(a, b);
        assert_eq!(a.iter().map(|r| r.len()).sum::<usize>(), 128);
        assert_eq!(chunk_ranges(3, 10, 8).len(), 3);
    }

    #[test]
    fn exact_expectation_of_indicator_mean() {
        let dist = enumerate(&Design::complete(vec![2, 2]).unwrap(), 100).unwrap();
        let m = expectation(&dist, 1, |a, out| {
            out[0] = (a.arm_of[0] == 1) as u8 as f64;
            Ok(())
        })
        .unwrap();
        assert!((m.mean[0] - 0.5).abs() < 1e-15);
        assert!(m.std_err.is_none());
    }

    #[test]
    fn welford_merge_matches_direct() {
        let design = Design::bernoulli(1, vec![0.3, 0.7]).unwrap();
        let dist = DesignDistribution::sampled(design, 3, 1000).unwrap();
        let m = expectation(&dist, 1, |a, out| {
            out[0] = a.arm_of[0] as f64;
            Ok(())
        })
        .unwrap();
        let values: Vec<f64> = dist.iter().map(|(a, _)| a.arm_of[0] as f64).collect();
        let mean = values.iter().sum::<f64>() / 1000.0;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 999.0;
        assert!((m.mean[0] - mean).abs() < 1e-12);
        assert!((m.std_err.unwrap()[0] - (var / 1000.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn weighted_moments() {
        let (m, v) = weighted_mean_var(&[(1.0, 0.5), (3.0, 0.5)]);
        assert_eq!((m, v), (2.0, 1.0));
    }
}
