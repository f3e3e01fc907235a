//! Error and distance metrics: relative L2 errors, empirical Gaussian
//! summaries and the closed-form Wasserstein-2 distance between Gaussians.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error("reference values are identically zero")]
    ZeroReference,
    #[error("need at least two samples, got {0}")]
    TooFewSamples(usize),
    #[error("sample buffer of length {len} is not a multiple of dimension {dim}")]
    Ragged { len: usize, dim: usize },
    #[error("covariance is not symmetric positive semidefinite")]
    NotPsd,
    #[error("dimension mismatch: {0} vs {1}")]
    Dim(usize, usize),
}

const SYM_TOL: f64 = 1e-12;
const EIG_TOL: f64 = -1e-10;

/// Mean and covariance of a (possibly empirical) Gaussian.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianSummary {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

impl GaussianSummary {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self, MetricsError> {
        let d = mean.len();
        if cov.nrows() != d || cov.ncols() != d {
            return Err(MetricsError::Dim(d, cov.nrows()));
        }
        let scale = cov.amax().max(1.0);
        for i in 0..d {
            for j in 0..i {
                if (cov[(i, j)] - cov[(j, i)]).abs() > SYM_TOL * scale {
                    return Err(MetricsError::NotPsd);
                }
            }
        }
        if !cov.iter().chain(mean.iter()).all(|v| v.is_finite()) {
            return Err(MetricsError::NotPsd);
        }
        let eig = SymmetricEigen::new(cov.clone()).eigenvalues;
        if eig.iter().any(|l| *l < EIG_TOL * scale) {
            return Err(MetricsError::NotPsd);
        }
        Ok(Self { mean, cov })
    }

    /// `N(mean, var I)`
    pub fn isotropic(mean: &[f64], var: f64) -> Result<Self, MetricsError> {
        let d = mean.len();
        Self::new(
            DVector::from_column_slice(mean),
            DMatrix::from_diagonal_element(d, d, var),
        )
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    /// Draws `n` row-major samples.
    pub fn sample(&self, n: usize, seed: u64) -> Vec<f64> {
        let d = self.dim();
        let l = psd_sqrt(&self.cov);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(n * d);
        let mut xi = DVector::zeros(d);
        for _ in 0..n {
            for v in xi.iter_mut() {
                *v = StandardNormal.sample(&mut rng);
            }
            let x = &self.mean + &l * &xi;
            out.extend(x.iter());
        }
        out
    }
}

/// Symmetric square root with negative eigenvalues clamped to zero.
fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let vals = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// `||approx - exact|| / ||exact||` over flattened values.
pub fn rel_l2(approx: &[f64], exact: &[f64]) -> Result<f64, MetricsError> {
    if approx.len() != exact.len() {
        return Err(MetricsError::Length(approx.len(), exact.len()));
    }
    let num: f64 = approx
        .iter()
        .zip(exact)
        .map(|(a, e)| (a - e) * (a - e))
        .sum();
    let den: f64 = exact.iter().map(|e| e * e).sum();
    if den == 0.0 {
        return Err(MetricsError::ZeroReference);
    }
    Ok((num / den).sqrt())
}

/// Closed-form W2 between two Gaussians.
pub fn gaussian_w2(g1: &GaussianSummary, g2: &GaussianSummary) -> Result<f64, MetricsError> {
    if g1.dim() != g2.dim() {
        return Err(MetricsError::Dim(g1.dim(), g2.dim()));
    }
    let dm = (&g1.mean - &g2.mean).norm_squared();
    let s2 = psd_sqrt(&g2.cov);
    let mut inner = &s2 * &g1.cov * &s2;
    // symmetrize against round-off before the second square root
    inner = (&inner + inner.transpose()) * 0.5;
    let cross = psd_sqrt(&inner);
    let tr = g1.cov.trace() + g2.cov.trace() - 2.0 * cross.trace();
    Ok((dm + tr).max(0.0).sqrt())
}

/// Sample mean and unbiased covariance of row-major samples.
pub fn empirical_moments(samples: &[f64], dim: usize) -> Result<GaussianSummary, MetricsError> {
    if dim == 0 || !samples.len().is_multiple_of(dim) {
        return Err(MetricsError::Ragged {
            len: samples.len(),
            dim,
        });
    }
    let n = samples.len() / dim;
    if n < 2 {
        return Err(MetricsError::TooFewSamples(n));
    }
    // shifted by the first sample: exact for identical particles
    let origin = &samples[..dim];
    let mut shift = DVector::zeros(dim);
    let mut cov = DMatrix::zeros(dim, dim);
    for row in samples.chunks_exact(dim) {
        for i in 0..dim {
            let di = row[i] - origin[i];
            shift[i] += di;
            for j in 0..=i {
                cov[(i, j)] += di * (row[j] - origin[j]);
            }
        }
    }
    shift /= n as f64;
    for i in 0..dim {
        for j in 0..=i {
            cov[(i, j)] -= n as f64 * shift[i] * shift[j];
            cov[(j, i)] = cov[(i, j)];
        }
    }
    let mean = DVector::from_column_slice(origin) + shift;
    cov /= (n - 1) as f64;
    GaussianSummary::new(mean, cov)
}

/// W2 between `exact` and the empirical Gaussian fit of `n` exact samples:
/// the noise floor of sample-based W2 reporting.
pub fn systemic_error(exact: &GaussianSummary, n: usize, seed: u64) -> Result<f64, MetricsError> {
    let samples = exact.sample(n, seed);
    let fit = empirical_moments(&samples, exact.dim())?;
    gaussian_w2(&fit, exact)
}

/// Unbiased per-dimension variance at every node; `nodes[j]` is row-major.
pub fn variance_curve(nodes: &[Vec<f64>], dim: usize) -> Result<Vec<Vec<f64>>, MetricsError> {
    nodes
        .iter()
        .map(|x| {
            let g = empirical_moments(x, dim)?;
            Ok((0..dim).map(|i| g.cov[(i, i)]).collect())
        })
        .collect()
}

/// Per-step training record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub loss: f64,
    /// Validation errors; absent when the validation rollout diverged.
    pub err_phi: Option<f64>,
    pub err_grad: Option<f64>,
    pub err_lap: Option<f64>,
    /// Gradient was non-finite and the update was skipped.
    pub skipped: bool,
}

/// Outcome of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub problem: String,
    pub mode: String,
    pub seed: u64,
    pub steps_completed: usize,
    pub curve: Vec<CurvePoint>,
    pub final_err_phi: Option<f64>,
    pub final_err_grad: Option<f64>,
    pub final_err_lap: Option<f64>,
    pub w2_terminal: Option<f64>,
    pub systemic_error: Option<f64>,
    pub skipped_updates: usize,
    /// Steps whose validation rollout diverged.
    pub validation_divergences: usize,
    pub divergence: Option<String>,
    pub config: serde_json::Value,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rel_l2_examples() {
        let e = [1.0, -2.0, 0.5];
        assert_eq!(rel_l2(&e, &e).unwrap(), 0.0);
        let twice: Vec<f64> = e.iter().map(|v| 2.0 * v).collect();
        assert!((rel_l2(&twice, &e).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(rel_l2(&[1.0], &[0.0]), Err(MetricsError::ZeroReference));
        assert!(matches!(
            rel_l2(&[1.0], &e),
            Err(MetricsError::Length(1, 3))
        ));
    }

    #[test]
    fn rel_l2_constant_offset() {
        // unit-norm exact over n points, offset c: c sqrt(n)
        let n = 4;
        let exact = vec![0.5; n];
        let c = 0.3;
        let approx: Vec<f64> = exact.iter().map(|v| v + c).collect();
        let r = rel_l2(&approx, &exact).unwrap();
        assert!((r - c * (n as f64).sqrt()).abs() < 1e-14);
    }

    #[test]
    fn w2_one_dimensional_cases() {
        let a = GaussianSummary::isotropic(&[0.0], 1.0).unwrap();
        let b = GaussianSummary::isotropic(&[1.0], 1.0).unwrap();
        assert!(gaussian_w2(&a, &a).unwrap() < 1e-12);
        assert!((gaussian_w2(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        let c = GaussianSummary::isotropic(&[0.0], 0.25).unwrap();
        let d = GaussianSummary::isotropic(&[0.0], 4.0).unwrap();
        assert!((gaussian_w2(&c, &d).unwrap() - 1.5).abs() < 1e-12);
    }

    #[test]
    fn moments_of_pair() {
        let g = empirical_moments(&[-1.0, 1.0], 1).unwrap();
        assert_eq!(g.mean()[0], 0.0);
        assert_eq!(g.cov()[(0, 0)], 2.0);
        assert_eq!(
            empirical_moments(&[1.0], 1),
            Err(MetricsError::TooFewSamples(1))
        );
    }

    #[test]
    fn duplicated_dataset_same_mean() {
        let x = [0.3, -1.2, 2.0, 0.7];
        let mut dup = x.to_vec();
        dup.extend_from_slice(&x);
        let a = empirical_moments(&x, 2).unwrap();
        let b = empirical_moments(&dup, 2).unwrap();
        assert!((a.mean() - b.mean()).norm() < 1e-15);
    }

    #[test]
    fn large_sample_variance() {
        let g = GaussianSummary::isotropic(&[0.0], 1.0).unwrap();
        let s = g.sample(100_000, 7);
        let m = empirical_moments(&s, 1).unwrap();
        assert!((m.cov()[(0, 0)] - 1.0).abs() < 0.02);
    }

    #[test]
    fn rejects_non_psd() {
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert_eq!(
            GaussianSummary::new(DVector::zeros(2), cov),
            Err(MetricsError::NotPsd)
        );
    }

    #[test]
    fn identical_particles_have_zero_variance() {
        let nodes = vec![vec![0.4; 6], vec![-1.0; 6]];
        let v = variance_curve(&nodes, 2).unwrap();
        assert!(v.iter().flatten().all(|x| *x == 0.0));
    }
}
