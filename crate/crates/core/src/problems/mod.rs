//! Benchmark mean field control problems behind a common interface.
//!
//! Every problem exposes its Hamiltonian, optimal velocity `D_p H`, running
//! cost `f` and terminal data twice: as tape builders over a whole particle
//! batch (used by the rollouts) and, derived from those, as plain scalar
//! functions (used by tests and metrics). Each also carries closed-form
//! oracles for the exact value function and density.

mod entropy;
mod lq;
pub mod riccati;
mod systemic;

use std::fmt::Debug;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::kde::{KdeCloud, KdeError};
use crate::metrics::GaussianSummary;
use crate::net::TerminalWrapper;
use crate::scalar::{lit, Real};
use crate::tape::{ExprId, Recording, Shape, TapeError};

pub use entropy::EntropyProblem;
pub use lq::LqProblem;
pub use riccati::{solve_riccati, RiccatiCoefficients, RiccatiError, RiccatiTable, VarianceTable};
pub use systemic::{SystemicParams, SystemicProblem, TerminalReading};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProblemError {
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Kde(#[from] KdeError),
    #[error(transparent)]
    Riccati(#[from] RiccatiError),
    #[error("problem couples to the population mean but none was supplied")]
    MissingPopulation,
    #[error("problem needs the density but none was supplied")]
    MissingDensity,
    #[error("density must be positive, got {0}")]
    NonPositiveDensity(f64),
    #[error("problem uses a hard terminal condition; no soft target")]
    HardTerminal,
    #[error("invalid problem constant: {0}")]
    Config(String),
}

/// Population-level inputs at one time node, as tape nodes.
#[derive(Clone, Copy, Debug, Default)]
pub struct PopNodes {
    /// `1 x d` empirical mean.
    pub mean: Option<ExprId>,
    /// `N x 1` log density at each particle.
    pub log_density: Option<ExprId>,
}

/// Particle cloud at one node with its empirical mean and KDE.
#[derive(Clone, Debug)]
pub struct PopulationState<T> {
    pub mean: Vec<T>,
    pub kde: KdeCloud<T>,
}

impl<T: Real> PopulationState<T> {
    pub fn new(samples: Vec<T>, dim: usize, bandwidth: T) -> Result<Self, KdeError> {
        let kde = KdeCloud::new(samples, dim, bandwidth)?;
        let n = lit::<T>(kde.len() as f64);
        let mut mean = vec![T::zero(); dim];
        for row in kde.samples().chunks_exact(dim) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += *v;
            }
        }
        for m in mean.iter_mut() {
            *m /= n;
        }
        Ok(Self { mean, kde })
    }

    pub fn samples(&self) -> &[T] {
        self.kde.samples()
    }
}

pub trait MfcProblem<T: Real>: Debug + Send + Sync {
    fn name(&self) -> &'static str;
    fn dim(&self) -> usize;
    fn horizon(&self) -> T;
    /// Diffusion coefficient `1/beta`.
    fn inv_beta(&self) -> T;
    /// `H` or `D_p H` depend on the population mean.
    fn uses_mean(&self) -> bool {
        false
    }
    /// `f` depends on the density.
    fn uses_density(&self) -> bool {
        false
    }
    fn terminal(&self) -> TerminalWrapper<T>;

    /// `N x 1`
    fn record_hamiltonian(
        &self,
        tape: &mut Recording<T>,
        t: T,
        x: ExprId,
        p: ExprId,
        pop: &PopNodes,
    ) -> Result<ExprId, ProblemError>;

    /// `N x d`
    fn record_grad_p_hamiltonian(
        &self,
        tape: &mut Recording<T>,
        t: T,
        x: ExprId,
        p: ExprId,
        pop: &PopNodes,
    ) -> Result<ExprId, ProblemError>;

    /// `N x 1`
    fn record_running_f(
        &self,
        tape: &mut Recording<T>,
        t: T,
        x: ExprId,
        pop: &PopNodes,
    ) -> Result<ExprId, ProblemError>;

    /// Terminal target `g(x_T)` for the soft terminal penalty, `N x 1`.
    fn record_terminal_target(
        &self,
        _tape: &mut Recording<T>,
        _x: ExprId,
        _pop: &PopNodes,
    ) -> Result<ExprId, ProblemError> {
        Err(ProblemError::HardTerminal)
    }

    fn lagrangian(&self, t: T, x: &[T], v: &[T], mean: Option<&[T]>) -> Result<T, ProblemError>;

    /// `n` row-major draws from the initial density.
    fn sample_initial(&self, seed: u64, n: usize) -> Vec<T>;

    /// Population mean the exact oracles are written against.
    fn exact_mean(&self) -> Vec<T> {
        vec![T::zero(); self.dim()]
    }
    fn exact_phi(&self, t: T, x: &[T]) -> T;
    fn exact_grad_phi(&self, t: T, x: &[T]) -> Vec<T>;
    fn exact_lap_phi(&self, t: T, x: &[T]) -> T;
    fn exact_dt_phi(&self, t: T, x: &[T]) -> T;
    fn exact_log_density(&self, t: T, x: &[T]) -> T;
    fn exact_score(&self, t: T, x: &[T]) -> Vec<T>;
    fn exact_moments(&self, t: T) -> GaussianSummary;

    fn hamiltonian(&self, t: T, x: &[T], p: &[T], mean: Option<&[T]>) -> Result<T, ProblemError> {
        let mut tape = Recording::new();
        let (xn, pop) = point_nodes(&mut tape, x, mean, None)?;
        let pn = tape.constant(p.to_vec(), Shape::new(1, p.len()))?;
        let h = self.record_hamiltonian(&mut tape, t, xn, pn, &pop)?;
        Ok(tape.scalar_value(h)?)
    }

    fn grad_p_hamiltonian(
        &self,
        t: T,
        x: &[T],
        p: &[T],
        mean: Option<&[T]>,
    ) -> Result<Vec<T>, ProblemError> {
        let mut tape = Recording::new();
        let (xn, pop) = point_nodes(&mut tape, x, mean, None)?;
        let pn = tape.constant(p.to_vec(), Shape::new(1, p.len()))?;
        let v = self.record_grad_p_hamiltonian(&mut tape, t, xn, pn, &pop)?;
        Ok(tape.value(v)?.to_vec())
    }

    /// `f(t, x, rho)`; `rho` is required when the problem uses the density.
    fn running_f(
        &self,
        t: T,
        x: &[T],
        rho: Option<T>,
        mean: Option<&[T]>,
    ) -> Result<T, ProblemError> {
        if let Some(r) = rho {
            // also rejects NaN
            #[allow(clippy::neg_cmp_op_on_partial_ord)]
            if !(r > T::zero()) {
                return Err(ProblemError::NonPositiveDensity(crate::scalar::to_f64(r)));
            }
        }
        let mut tape = Recording::new();
        let (xn, pop) = point_nodes(&mut tape, x, mean, rho.map(|r| r.ln()))?;
        let f = self.record_running_f(&mut tape, t, xn, &pop)?;
        Ok(tape.scalar_value(f)?)
    }

    fn terminal_target(&self, x: &[T], mean: Option<&[T]>) -> Result<T, ProblemError> {
        let mut tape = Recording::new();
        let (xn, pop) = point_nodes(&mut tape, x, mean, None)?;
        let g = self.record_terminal_target(&mut tape, xn, &pop)?;
        Ok(tape.scalar_value(g)?)
    }

    /// `d_t phi + (1/beta) Lap phi + H(x, grad phi) - f(x, rho)` at the exact
    /// solution and density.
    fn hjb_residual(&self, t: T, x: &[T]) -> Result<T, ProblemError> {
        let mean = self.exact_mean();
        let grad = self.exact_grad_phi(t, x);
        let h = self.hamiltonian(t, x, &grad, Some(&mean))?;
        let rho = self
            .uses_density()
            .then(|| self.exact_log_density(t, x).exp());
        let f = self.running_f(t, x, rho, Some(&mean))?;
        Ok(self.exact_dt_phi(t, x) + self.inv_beta() * self.exact_lap_phi(t, x) + h - f)
    }
}

fn point_nodes<T: Real>(
    tape: &mut Recording<T>,
    x: &[T],
    mean: Option<&[T]>,
    log_rho: Option<T>,
) -> Result<(ExprId, PopNodes), TapeError> {
    let xn = tape.constant(x.to_vec(), Shape::new(1, x.len()))?;
    let mean = match mean {
        Some(m) => Some(tape.constant(m.to_vec(), Shape::new(1, m.len()))?),
        None => None,
    };
    let log_density = log_rho.map(|l| tape.scalar(l));
    Ok((xn, PopNodes { mean, log_density }))
}

/// `|p|^2 / 2` row by row.
pub(crate) fn record_half_sq_norm<T: Real>(
    tape: &mut Recording<T>,
    p: ExprId,
) -> Result<ExprId, TapeError> {
    let sq = tape.row_dot(p, p)?;
    tape.scale(sq, lit(0.5))
}

/// `n x d` row-major draws from `N(mean, var I)`, generated in `f64`.
pub(crate) fn gaussian_samples<T: Real>(seed: u64, n: usize, mean: &[f64], var: f64) -> Vec<T> {
    let d = mean.len();
    let std = var.sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n * d);
    for _ in 0..n {
        for m in mean {
            let z: f64 = StandardNormal.sample(&mut rng);
            out.push(lit(m + std * z));
        }
    }
    out
}

/// Log density of `N(mean, var I)`.
pub(crate) fn isotropic_log_density<T: Real>(x: &[T], mean: &[T], var: T) -> T {
    let d = lit::<T>(x.len() as f64);
    let sq: T = x.iter().zip(mean).map(|(a, m)| (*a - *m) * (*a - *m)).sum();
    -sq / (lit::<T>(2.0) * var) - d / lit::<T>(2.0) * (T::TAU() * var).ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn population_mean() {
        let p = PopulationState::new(vec![0.7], 1, 0.3).unwrap();
        assert_eq!(p.mean, vec![0.7]);
        let p = PopulationState::new(vec![-1.5, 1.5], 1, 0.3).unwrap();
        assert_eq!(p.mean, vec![0.0]);
        let s: Vec<f64> = gaussian_samples(3, 10_000, &[0.0], 1.0);
        let p = PopulationState::new(s, 1, 0.3).unwrap();
        assert!(p.mean[0].abs() < 0.03);
    }

    #[test]
    fn sampler_is_deterministic() {
        let a: Vec<f64> = gaussian_samples(11, 50, &[0.0, 1.0], 2.0);
        let b: Vec<f64> = gaussian_samples(11, 50, &[0.0, 1.0], 2.0);
        assert_eq!(a, b);
    }

    #[test]
    fn sampler_mean_within_clt_bound() {
        let n = 100_000;
        let s: Vec<f64> = gaussian_samples(5, n, &[0.0], 1.0);
        let m = s.iter().sum::<f64>() / n as f64;
        assert!(m.abs() < 3.0 / (n as f64).sqrt());
    }
}
