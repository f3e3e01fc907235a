use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use super::{
    gaussian_samples, isotropic_log_density, record_half_sq_norm, MfcProblem, PopNodes,
    ProblemError,
};
use crate::metrics::GaussianSummary;
use crate::net::{QuadraticCost, TerminalWrapper};
use crate::scalar::{lit, to_f64, Real};
use crate::tape::{ExprId, Recording};

/// Linear-quadratic problem with density tracking,
/// `f = gamma (rho - rho*)`, `V(x) = |x|^2 / 2`. The optimal density is
/// `rho* = N(0, 2 (T - t + 1) / beta I)`.
#[derive(Clone, Debug)]
pub struct LqProblem<T> {
    dim: usize,
    horizon: T,
    beta: T,
    gamma: T,
}

impl<T: Real> LqProblem<T> {
    pub fn new(dim: usize, horizon: T, beta: T, gamma: T) -> Result<Self, ProblemError> {
        if dim == 0 {
            return Err(ProblemError::Config("dimension must be at least 1".into()));
        }
        if !(horizon > T::zero() && horizon.is_finite()) {
            return Err(ProblemError::Config("horizon must be positive".into()));
        }
        if !(beta > T::zero() && beta.is_finite()) {
            return Err(ProblemError::Config("beta must be positive".into()));
        }
        if !(gamma >= T::zero() && gamma.is_finite()) {
            return Err(ProblemError::Config("gamma must be non-negative".into()));
        }
        Ok(Self {
            dim,
            horizon,
            beta,
            gamma,
        })
    }

    /// `T - t + 1`
    fn lag(&self, t: T) -> T {
        self.horizon - t + T::one()
    }

    /// Per-dimension variance of the optimal density at `t`.
    pub fn variance(&self, t: T) -> T {
        lit::<T>(2.0) * self.lag(t) / self.beta
    }
}

impl<T: Real> MfcProblem<T> for LqProblem<T> {
    fn name(&self) -> &'static str {
        "lq"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn horizon(&self) -> T {
        self.horizon
    }

    fn inv_beta(&self) -> T {
        T::one() / self.beta
    }

    fn uses_density(&self) -> bool {
        true
    }

    fn terminal(&self) -> TerminalWrapper<T> {
        TerminalWrapper::hard(
            self.horizon,
            Arc::new(QuadraticCost {
                curvature: T::one(),
                offset: T::zero(),
            }),
        )
    }

    fn record_hamiltonian(
        &self,
        tape: &mut Recording<T>,
        _t: T,
        _x: ExprId,
        p: ExprId,
        _pop: &PopNodes,
    ) -> Result<ExprId, ProblemError> {
        Ok(record_half_sq_norm(tape, p)?)
    }

    fn record_grad_p_hamiltonian(
        &self,
        _tape: &mut Recording<T>,
        _t: T,
        _x: ExprId,
        p: ExprId,
        _pop: &PopNodes,
    ) -> Result<ExprId, ProblemError> {
        Ok(p)
    }

    fn record_running_f(
        &self,
        tape: &mut Recording<T>,
        t: T,
        x: ExprId,
        pop: &PopNodes,
    ) -> Result<ExprId, ProblemError> {
        let log_rho = pop.log_density.ok_or(ProblemError::MissingDensity)?;
        let rho = tape.exp(log_rho)?;
        // rho*(t, x) = (2 pi v)^(-d/2) exp(-|x|^2 / (2 v))
        let v = self.variance(t);
        let d = lit::<T>(self.dim as f64);
        let norm = (T::TAU() * v).powf(-d / lit(2.0));
        let sq = tape.row_dot(x, x)?;
        let e = tape.scale(sq, -T::one() / (lit::<T>(2.0) * v))?;
        let e = tape.exp(e)?;
        let star = tape.scale(e, norm)?;
        let diff = tape.sub(rho, star)?;
        Ok(tape.scale(diff, self.gamma)?)
    }

    fn lagrangian(&self, _t: T, _x: &[T], v: &[T], _mean: Option<&[T]>) -> Result<T, ProblemError> {
        Ok(v.iter().map(|a| *a * *a).sum::<T>() / lit(2.0))
    }

    fn sample_initial(&self, seed: u64, n: usize) -> Vec<T> {
        gaussian_samples(
            seed,
            n,
            &vec![0.0; self.dim],
            to_f64(self.variance(T::zero())),
        )
    }

    fn exact_phi(&self, t: T, x: &[T]) -> T {
        let s = self.lag(t);
        let sq: T = x.iter().map(|a| *a * *a).sum();
        let d = lit::<T>(self.dim as f64);
        -(d / self.beta) * s.ln() - sq / (lit::<T>(2.0) * s)
    }

    fn exact_grad_phi(&self, t: T, x: &[T]) -> Vec<T> {
        let s = self.lag(t);
        x.iter().map(|a| -*a / s).collect()
    }

    fn exact_lap_phi(&self, t: T, x: &[T]) -> T {
        -lit::<T>(x.len() as f64) / self.lag(t)
    }

    fn exact_dt_phi(&self, t: T, x: &[T]) -> T {
        let s = self.lag(t);
        let sq: T = x.iter().map(|a| *a * *a).sum();
        let d = lit::<T>(self.dim as f64);
        d / (self.beta * s) - sq / (lit::<T>(2.0) * s * s)
    }

    fn exact_log_density(&self, t: T, x: &[T]) -> T {
        isotropic_log_density(x, &vec![T::zero(); x.len()], self.variance(t))
    }

    fn exact_score(&self, t: T, x: &[T]) -> Vec<T> {
        let v = self.variance(t);
        x.iter().map(|a| -*a / v).collect()
    }

    fn exact_moments(&self, t: T) -> GaussianSummary {
        GaussianSummary::new(
            DVector::zeros(self.dim),
            DMatrix::from_diagonal_element(self.dim, self.dim, to_f64(self.variance(t))),
        )
        .expect("isotropic covariance is valid")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lq() -> LqProblem<f64> {
        LqProblem::new(1, 0.5, 5.0, 0.1).unwrap()
    }

    #[test]
    fn hamiltonian_example() {
        let p = LqProblem::new(2, 0.5, 5.0, 0.1).unwrap();
        let h = p.hamiltonian(0.1, &[0.0, 0.0], &[1.0, 2.0], None).unwrap();
        assert_eq!(h, 2.5);
        let g = p
            .grad_p_hamiltonian(0.1, &[0.0, 0.0], &[1.0, 2.0], None)
            .unwrap();
        assert_eq!(g, vec![1.0, 2.0]);
    }

    #[test]
    fn f_vanishes_on_optimal_density() {
        let p = lq();
        let x = [0.4];
        let rho = p.exact_log_density(0.2, &x).exp();
        let f = p.running_f(0.2, &x, Some(rho), None).unwrap();
        assert!(f.abs() < 1e-15);
    }

    #[test]
    fn terminal_condition() {
        let p = lq();
        assert_eq!(p.exact_phi(0.5, &[1.3]), -1.3 * 1.3 / 2.0);
    }

    #[test]
    fn initial_covariance() {
        let p = lq();
        let m = p.exact_moments(0.0);
        assert!((m.cov()[(0, 0)] - 2.0 * 1.5 / 5.0).abs() < 1e-15);
    }

    #[test]
    fn initial_sample_variance() {
        let p = lq();
        let s = p.sample_initial(9, 100_000);
        let g = crate::metrics::empirical_moments(&s, 1).unwrap();
        let v = 2.0 * 1.5 / 5.0;
        assert!((g.cov()[(0, 0)] - v).abs() < 0.05 * v);
    }
}
