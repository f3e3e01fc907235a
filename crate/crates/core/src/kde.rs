//! Gaussian kernel density estimate over a particle cloud and its score.
//!
//! All evaluations go through the log-sum-exp form: with
//! `e_i(x) = -|x - x_i|^2 / (2 s^2)` the softmax weights `w_i = softmax(e)_i`
//! give `score(x) = -(x - sum_i w_i x_i) / s^2`, which stays finite however
//! far `x` is from the cloud.

use thiserror::Error;

use crate::scalar::{lit, Real};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KdeError {
    #[error("cloud must contain at least one sample")]
    Empty,
    #[error("bandwidth must be positive and finite")]
    Bandwidth,
    #[error("sample buffer of length {len} is not a multiple of dimension {dim}")]
    Ragged { len: usize, dim: usize },
    #[error("cloud contains non-finite samples")]
    NonFinite,
    #[error("point has dimension {got}, cloud has {expected}")]
    Dim { expected: usize, got: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct KdeCloud<T> {
    samples: Vec<T>,
    dim: usize,
    bandwidth: T,
}

impl<T: Real> KdeCloud<T> {
    /// `samples` is row-major, `N x dim`.
    pub fn new(samples: Vec<T>, dim: usize, bandwidth: T) -> Result<Self, KdeError> {
        if dim == 0 || !samples.len().is_multiple_of(dim) {
            return Err(KdeError::Ragged {
                len: samples.len(),
                dim,
            });
        }
        if samples.is_empty() {
            return Err(KdeError::Empty);
        }
        if !(bandwidth > T::zero() && bandwidth.is_finite()) {
            return Err(KdeError::Bandwidth);
        }
        if !crate::scalar::all_finite(&samples) {
            return Err(KdeError::NonFinite);
        }
        Ok(Self {
            samples,
            dim,
            bandwidth,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn bandwidth(&self) -> T {
        self.bandwidth
    }

    pub fn samples(&self) -> &[T] {
        &self.samples
    }

    fn sample(&self, i: usize) -> &[T] {
        &self.samples[i * self.dim..(i + 1) * self.dim]
    }

    fn check(&self, x: &[T]) -> Result<(), KdeError> {
        if x.len() != self.dim {
            return Err(KdeError::Dim {
                expected: self.dim,
                got: x.len(),
            });
        }
        Ok(())
    }

    /// `log((2 pi s^2)^(-d/2) / N)`
    fn log_norm(&self) -> T {
        let two_pi_s2 = T::TAU() * self.bandwidth * self.bandwidth;
        -(lit::<T>(self.dim as f64) / lit(2.0)) * two_pi_s2.ln() - lit::<T>(self.len() as f64).ln()
    }

    /// Fills `weights` with the softmax weights at `x`; returns the
    /// log-sum-exp of the exponents.
    fn softmax_into(&self, x: &[T], weights: &mut [T]) -> T {
        let inv = T::one() / (lit::<T>(2.0) * self.bandwidth * self.bandwidth);
        let mut max = T::neg_infinity();
        for (i, w) in weights.iter_mut().enumerate() {
            let s = self.sample(i);
            let mut sq = T::zero();
            for k in 0..self.dim {
                let diff = x[k] - s[k];
                sq += diff * diff;
            }
            *w = -sq * inv;
            if *w > max {
                max = *w;
            }
        }
        let mut total = T::zero();
        for w in weights.iter_mut() {
            *w = (*w - max).exp();
            total += *w;
        }
        for w in weights.iter_mut() {
            *w /= total;
        }
        max + total.ln()
    }

    pub fn log_density(&self, x: &[T]) -> Result<T, KdeError> {
        self.check(x)?;
        let mut w = vec![T::zero(); self.len()];
        Ok(self.softmax_into(x, &mut w) + self.log_norm())
    }

    pub fn density(&self, x: &[T]) -> Result<T, KdeError> {
        Ok(self.log_density(x)?.exp())
    }

    pub fn score(&self, x: &[T]) -> Result<Vec<T>, KdeError> {
        Ok(self.log_density_and_score(x)?.1)
    }

    pub fn log_density_and_score(&self, x: &[T]) -> Result<(T, Vec<T>), KdeError> {
        self.check(x)?;
        let mut w = vec![T::zero(); self.len()];
        let mut out = vec![T::zero(); self.dim + 1];
        self.eval_with(x, &mut w, &mut out);
        Ok((out[0], out[1..].to_vec()))
    }

    /// Softmax weights at `x`; they sum to one.
    pub fn weights(&self, x: &[T]) -> Result<Vec<T>, KdeError> {
        self.check(x)?;
        let mut w = vec![T::zero(); self.len()];
        self.softmax_into(x, &mut w);
        Ok(w)
    }

    /// Writes `[log rho, score_1..score_d]` for `x` into `out`.
    fn eval_with(&self, x: &[T], w: &mut [T], out: &mut [T]) {
        let lse = self.softmax_into(x, w);
        out[0] = lse + self.log_norm();
        let inv_s2 = T::one() / (self.bandwidth * self.bandwidth);
        for k in 0..self.dim {
            let mut mean = T::zero();
            for (i, wi) in w.iter().enumerate() {
                mean += *wi * self.samples[i * self.dim + k];
            }
            out[1 + k] = -(x[k] - mean) * inv_s2;
        }
    }

    /// `[log rho, score]` at every sample of the cloud (self included),
    /// row-major `N x (1 + d)`.
    pub fn evaluate_at_samples(&self) -> Vec<T> {
        let n = self.len();
        let stride = self.dim + 1;
        let mut out = vec![T::zero(); n * stride];
        let mut w = vec![T::zero(); n];
        for i in 0..n {
            let x = self.sample(i).to_vec();
            self.eval_with(&x, &mut w, &mut out[i * stride..(i + 1) * stride]);
        }
        out
    }

    /// Cotangent of `(log rho(x), score(x))` pulled back to the evaluation
    /// point (`x_bar`) and to every sample (`samples_bar`, added in place).
    fn vjp_into(
        &self,
        x: &[T],
        log_bar: T,
        score_bar: &[T],
        w: &mut [T],
        x_bar: &mut [T],
        samples_bar: &mut [T],
    ) {
        let d = self.dim;
        let n = self.len();
        let s2 = self.bandwidth * self.bandwidth;
        let inv_s2 = T::one() / s2;
        self.softmax_into(x, w);
        let mut mean = vec![T::zero(); d];
        for i in 0..n {
            for k in 0..d {
                mean[k] += w[i] * self.samples[i * d + k];
            }
        }
        // Cov_w * score_bar, and the per-sample projections it needs.
        let mut cov_sb = vec![T::zero(); d];
        for i in 0..n {
            let s = self.sample(i);
            let mut proj = T::zero();
            for k in 0..d {
                proj += (s[k] - mean[k]) * score_bar[k];
            }
            for k in 0..d {
                cov_sb[k] += w[i] * (s[k] - mean[k]) * proj;
            }
            // sample role
            let coef = w[i] * inv_s2;
            let r = proj * inv_s2 + log_bar;
            for k in 0..d {
                let diff = x[k] - s[k];
                samples_bar[i * d + k] += coef * (r * diff + score_bar[k]);
            }
        }
        // evaluation-point role: score is grad log rho and d score/dx is the
        // (symmetric) Hessian -(I - Cov_w / s^2) / s^2.
        for k in 0..d {
            let score_k = -(x[k] - mean[k]) * inv_s2;
            x_bar[k] += log_bar * score_k - inv_s2 * (score_bar[k] - cov_sb[k] * inv_s2);
        }
    }

    /// Vector-Jacobian product at an arbitrary point.
    pub fn vjp(&self, x: &[T], log_bar: T, score_bar: &[T]) -> Result<(Vec<T>, Vec<T>), KdeError> {
        self.check(x)?;
        self.check(score_bar)?;
        let mut w = vec![T::zero(); self.len()];
        let mut x_bar = vec![T::zero(); self.dim];
        let mut samples_bar = vec![T::zero(); self.samples.len()];
        self.vjp_into(x, log_bar, score_bar, &mut w, &mut x_bar, &mut samples_bar);
        Ok((x_bar, samples_bar))
    }

    /// Adjoint of [`evaluate_at_samples`]: each sample acts both as an
    /// evaluation point and as a kernel centre. `bar` is laid out like the
    /// forward output; the result is the cotangent of the sample buffer.
    pub fn vjp_at_samples(&self, bar: &[T]) -> Vec<T> {
        let n = self.len();
        let d = self.dim;
        let stride = d + 1;
        let mut out = vec![T::zero(); n * d];
        let mut w = vec![T::zero(); n];
        let mut x_bar = vec![T::zero(); d];
        for i in 0..n {
            let b = &bar[i * stride..(i + 1) * stride];
            if b.iter().all(|v| *v == T::zero()) {
                continue;
            }
            let x = self.sample(i).to_vec();
            x_bar.iter_mut().for_each(|v| *v = T::zero());
            self.vjp_into(&x, b[0], &b[1..], &mut w, &mut x_bar, &mut out);
            for k in 0..d {
                out[i * d + k] += x_bar[k];
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(samples: &[f64], dim: usize, bw: f64) -> KdeCloud<f64> {
        KdeCloud::new(samples.to_vec(), dim, bw).unwrap()
    }

    #[test]
    fn single_sample_at_centre() {
        let c = cloud(&[0.0], 1, 1.0);
        let rho = c.density(&[0.0]).unwrap();
        assert!((rho - 0.398_942_280_401_432_7).abs() < 1e-15);
    }

    #[test]
    fn symmetric_pair_matches_single_shifted_sample() {
        let a = 0.8;
        let pair = cloud(&[-a, a], 1, 0.5);
        let single = cloud(&[a], 1, 0.5);
        let lhs = pair.density(&[0.0]).unwrap();
        let rhs = single.density(&[0.0]).unwrap();
        assert!((lhs - rhs).abs() < 1e-15);
        assert_eq!(pair.score(&[0.0]).unwrap(), vec![0.0]);
    }

    #[test]
    fn single_sample_score_is_linear() {
        let s = [0.3, -1.0];
        let c = cloud(&s, 2, 0.7);
        let x = [1.1, 0.4];
        let sc = c.score(&x).unwrap();
        for k in 0..2 {
            let want = -(x[k] - s[k]) / 0.49;
            assert!((sc[k] - want).abs() < 1e-12);
        }
        assert_eq!(c.score(&s).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn far_point_stays_finite() {
        let c = cloud(&[0.0, 1.0, 2.0], 1, 0.01);
        // |x - x_i|^2 / s^2 around 1e8 here
        let (l, s) = c.log_density_and_score(&[100.0]).unwrap();
        assert!(l.is_finite() && s[0].is_finite());
        assert!((s[0] + (100.0 - 2.0) / 1e-4).abs() < 1e-6 * 1e6);
        let w = c.weights(&[1.3]).unwrap();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_construction() {
        assert_eq!(KdeCloud::<f64>::new(vec![], 1, 1.0), Err(KdeError::Empty));
        assert_eq!(KdeCloud::new(vec![1.0], 1, 0.0), Err(KdeError::Bandwidth));
        assert!(matches!(
            KdeCloud::new(vec![1.0, 2.0, 3.0], 2, 1.0),
            Err(KdeError::Ragged { .. })
        ));
        assert_eq!(
            KdeCloud::new(vec![f64::NAN], 1, 1.0),
            Err(KdeError::NonFinite)
        );
    }

    #[test]
    fn single_sample_jacobians() {
        // d score / dx = -I / s^2, d score / ds = I / s^2
        let bw = 0.6;
        let c = cloud(&[0.2, -0.1], 2, bw);
        let sb = [0.7, -1.3];
        let (xb, sbar) = c.vjp(&[0.5, 0.4], 0.0, &sb).unwrap();
        for k in 0..2 {
            assert!((xb[k] + sb[k] / (bw * bw)).abs() < 1e-12);
            assert!((sbar[k] - sb[k] / (bw * bw)).abs() < 1e-12);
        }
    }
}
