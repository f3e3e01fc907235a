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

/// Quadratic potential plus entropy running cost, `f = |x|^2/2 + gamma log rho`,
/// unit diffusion. The optimal density is stationary, `N(0, I/alpha)` with
/// `alpha^2 + gamma alpha = 1`, and `phi(t, x) = C t - alpha |x|^2 / 2`.
#[derive(Clone, Debug)]
pub struct EntropyProblem<T> {
    dim: usize,
    horizon: T,
    gamma: T,
    alpha: T,
    rate: T,
}

impl<T: Real> EntropyProblem<T> {
    pub fn new(dim: usize, horizon: T, gamma: T) -> Result<Self, ProblemError> {
        if dim == 0 {
            return Err(ProblemError::Config("dimension must be at least 1".into()));
        }
        if !(horizon > T::zero() && horizon.is_finite()) {
            return Err(ProblemError::Config("horizon must be positive".into()));
        }
        if !(gamma > T::zero() && gamma.is_finite()) {
            return Err(ProblemError::Config("gamma must be positive".into()));
        }
        let two = lit::<T>(2.0);
        let alpha = (-gamma + (gamma * gamma + lit(4.0)).sqrt()) / two;
        let d = lit::<T>(dim as f64);
        let rate = d * alpha + gamma * d / two * (alpha / T::TAU()).ln();
        Ok(Self {
            dim,
            horizon,
            gamma,
            alpha,
            rate,
        })
    }

    pub fn alpha(&self) -> T {
        self.alpha
    }

    pub fn gamma(&self) -> T {
        self.gamma
    }

    /// `C = d alpha + (gamma d / 2) log(alpha / 2 pi)`
    pub fn rate(&self) -> T {
        self.rate
    }

    /// `V(x) = alpha |x|^2 / 2 - C T`
    pub fn terminal_cost(&self) -> QuadraticCost<T> {
        QuadraticCost {
            curvature: self.alpha,
            offset: -self.rate * self.horizon,
        }
    }
}

impl<T: Real> MfcProblem<T> for EntropyProblem<T> {
    fn name(&self) -> &'static str {
        "entropy"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn horizon(&self) -> T {
        self.horizon
    }

    fn inv_beta(&self) -> T {
        T::one()
    }

    fn uses_density(&self) -> bool {
        true
    }

    fn terminal(&self) -> TerminalWrapper<T> {
        TerminalWrapper::hard(self.horizon, Arc::new(self.terminal_cost()))
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
        _t: T,
        x: ExprId,
        pop: &PopNodes,
    ) -> Result<ExprId, ProblemError> {
        let log_rho = pop.log_density.ok_or(ProblemError::MissingDensity)?;
        let pot = record_half_sq_norm(tape, x)?;
        let ent = tape.scale(log_rho, self.gamma)?;
        Ok(tape.add(pot, ent)?)
    }

    fn lagrangian(&self, _t: T, _x: &[T], v: &[T], _mean: Option<&[T]>) -> Result<T, ProblemError> {
        Ok(v.iter().map(|a| *a * *a).sum::<T>() / lit(2.0))
    }

    fn sample_initial(&self, seed: u64, n: usize) -> Vec<T> {
        gaussian_samples(seed, n, &vec![0.0; self.dim], 1.0 / to_f64(self.alpha))
    }

    fn exact_phi(&self, t: T, x: &[T]) -> T {
        let sq: T = x.iter().map(|a| *a * *a).sum();
        self.rate * t - self.alpha * sq / lit(2.0)
    }

    fn exact_grad_phi(&self, _t: T, x: &[T]) -> Vec<T> {
        x.iter().map(|a| -self.alpha * *a).collect()
    }

    fn exact_lap_phi(&self, _t: T, x: &[T]) -> T {
        -self.alpha * lit(x.len() as f64)
    }

    fn exact_dt_phi(&self, _t: T, _x: &[T]) -> T {
        self.rate
    }

    fn exact_log_density(&self, _t: T, x: &[T]) -> T {
        isotropic_log_density(x, &vec![T::zero(); x.len()], T::one() / self.alpha)
    }

    fn exact_score(&self, _t: T, x: &[T]) -> Vec<T> {
        x.iter().map(|a| -self.alpha * *a).collect()
    }

    fn exact_moments(&self, _t: T) -> GaussianSummary {
        GaussianSummary::new(
            DVector::zeros(self.dim),
            DMatrix::from_diagonal_element(self.dim, self.dim, 1.0 / to_f64(self.alpha)),
        )
        .expect("isotropic covariance is valid")
    }
}
