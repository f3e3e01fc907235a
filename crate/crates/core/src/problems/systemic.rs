use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::riccati::{solve_riccati, RiccatiCoefficients, RiccatiTable, VarianceTable};
use super::{gaussian_samples, isotropic_log_density, MfcProblem, PopNodes, ProblemError};
use crate::metrics::GaussianSummary;
use crate::net::TerminalWrapper;
use crate::scalar::{lit, to_f64, Real};
use crate::tape::{ExprId, Recording};

/// How the terminal target enters the soft penalty.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalReading {
    /// `g = -(c/2) (xbar - x)^2`, consistent with the quadratic solution.
    #[default]
    Squared,
    /// `g = -(c/2) (xbar - x)`
    Literal,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemicParams {
    pub a: f64,
    pub q: f64,
    pub eps: f64,
    pub c: f64,
    pub sigma: f64,
    pub horizon: f64,
    pub initial_mean: f64,
    pub initial_var: f64,
    pub reading: TerminalReading,
    pub riccati_steps: usize,
}

impl Default for SystemicParams {
    fn default() -> Self {
        Self {
            a: 0.1,
            q: 0.5,
            eps: 0.1,
            c: 1.0,
            sigma: 1.0,
            horizon: 0.1,
            initial_mean: 0.0,
            initial_var: 0.25,
            reading: TerminalReading::Squared,
            riccati_steps: 10_000,
        }
    }
}

/// Interbank lending model in one dimension, coupled through the population
/// mean `xbar`; with `u = xbar - x`,
/// `H = p^2/2 + (a + q) u p - ((eps - q^2)/2) u^2` and `f = 0`. The value
/// function is `phi = -(eta/2) u^2 + chi` with `eta` from the Riccati table.
#[derive(Clone, Debug)]
pub struct SystemicProblem<T> {
    params: SystemicParams,
    table: RiccatiTable,
    variance: VarianceTable,
    _scalar: std::marker::PhantomData<T>,
}

impl<T: Real> SystemicProblem<T> {
    pub fn new(params: SystemicParams) -> Result<Self, ProblemError> {
        let p = &params;
        let finite = [p.a, p.q, p.eps, p.c, p.sigma, p.initial_mean, p.initial_var]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(ProblemError::Config("constants must be finite".into()));
        }
        if !(p.horizon > 0.0 && p.horizon.is_finite()) {
            return Err(ProblemError::Config("horizon must be positive".into()));
        }
        if p.sigma <= 0.0 {
            return Err(ProblemError::Config("sigma must be positive".into()));
        }
        if p.initial_var <= 0.0 {
            return Err(ProblemError::Config(
                "initial variance must be positive".into(),
            ));
        }
        let table = solve_riccati(
            RiccatiCoefficients {
                a: p.a,
                q: p.q,
                eps: p.eps,
                c: p.c,
            },
            p.horizon,
            p.riccati_steps,
        )?;
        let variance = VarianceTable::new(&table, p.sigma, p.initial_var);
        Ok(Self {
            params,
            table,
            variance,
            _scalar: std::marker::PhantomData,
        })
    }

    pub fn params(&self) -> &SystemicParams {
        &self.params
    }

    pub fn riccati(&self) -> &RiccatiTable {
        &self.table
    }

    pub fn variance(&self, t: T) -> T {
        lit(self.variance.at(to_f64(t)))
    }

    fn coupling(&self) -> T {
        lit(self.params.a + self.params.q)
    }

    fn mean_gap(&self, x: &[T]) -> T {
        lit::<T>(self.params.initial_mean) - x[0]
    }
}

impl<T: Real> MfcProblem<T> for SystemicProblem<T> {
    fn name(&self) -> &'static str {
        "systemic"
    }

    fn dim(&self) -> usize {
        1
    }

    fn horizon(&self) -> T {
        lit(self.params.horizon)
    }

    fn inv_beta(&self) -> T {
        lit(self.params.sigma * self.params.sigma / 2.0)
    }

    fn uses_mean(&self) -> bool {
        true
    }

    fn terminal(&self) -> TerminalWrapper<T> {
        TerminalWrapper::Soft
    }

    fn record_hamiltonian(
        &self,
        tape: &mut Recording<T>,
        _t: T,
        x: ExprId,
        p: ExprId,
        pop: &PopNodes,
    ) -> Result<ExprId, ProblemError> {
        let mean = pop.mean.ok_or(ProblemError::MissingPopulation)?;
        let u = tape.sub(mean, x)?;
        let p2 = tape.square(p)?;
        let kin = tape.scale(p2, lit(0.5))?;
        let up = tape.mul(u, p)?;
        let cross = tape.scale(up, self.coupling())?;
        let u2 = tape.square(u)?;
        let k = (self.params.eps - self.params.q * self.params.q) / 2.0;
        let pot = tape.scale(u2, lit(-k))?;
        let h = tape.add(kin, cross)?;
        Ok(tape.add(h, pot)?)
    }

    fn record_grad_p_hamiltonian(
        &self,
        tape: &mut Recording<T>,
        _t: T,
        x: ExprId,
        p: ExprId,
        pop: &PopNodes,
    ) -> Result<ExprId, ProblemError> {
        let mean = pop.mean.ok_or(ProblemError::MissingPopulation)?;
        let u = tape.sub(mean, x)?;
        let pull = tape.scale(u, self.coupling())?;
        Ok(tape.add(p, pull)?)
    }

    fn record_running_f(
        &self,
        tape: &mut Recording<T>,
        _t: T,
        x: ExprId,
        _pop: &PopNodes,
    ) -> Result<ExprId, ProblemError> {
        Ok(tape.scale(x, T::zero())?)
    }

    fn record_terminal_target(
        &self,
        tape: &mut Recording<T>,
        x: ExprId,
        pop: &PopNodes,
    ) -> Result<ExprId, ProblemError> {
        let mean = pop.mean.ok_or(ProblemError::MissingPopulation)?;
        let u = tape.sub(mean, x)?;
        let w = lit::<T>(-self.params.c / 2.0);
        match self.params.reading {
            TerminalReading::Squared => {
                let u2 = tape.square(u)?;
                Ok(tape.scale(u2, w)?)
            }
            TerminalReading::Literal => Ok(tape.scale(u, w)?),
        }
    }

    fn lagrangian(&self, _t: T, x: &[T], v: &[T], mean: Option<&[T]>) -> Result<T, ProblemError> {
        let m = mean.ok_or(ProblemError::MissingPopulation)?;
        let u = m[0] - x[0];
        let a = lit::<T>(self.params.a);
        let w = v[0] - a * u;
        let half = lit::<T>(0.5);
        Ok(half * w * w - lit::<T>(self.params.q) * w * u
            + half * lit::<T>(self.params.eps) * u * u)
    }

    fn sample_initial(&self, seed: u64, n: usize) -> Vec<T> {
        gaussian_samples(
            seed,
            n,
            &[self.params.initial_mean],
            self.params.initial_var,
        )
    }

    fn exact_mean(&self) -> Vec<T> {
        vec![lit(self.params.initial_mean)]
    }

    fn exact_phi(&self, t: T, x: &[T]) -> T {
        let tf = to_f64(t);
        let u = self.mean_gap(x);
        let eta = lit::<T>(self.table.eta(tf));
        -eta * u * u / lit(2.0) + lit(self.table.chi(self.params.sigma, tf))
    }

    fn exact_grad_phi(&self, t: T, x: &[T]) -> Vec<T> {
        vec![lit::<T>(self.table.eta(to_f64(t))) * self.mean_gap(x)]
    }

    fn exact_lap_phi(&self, t: T, _x: &[T]) -> T {
        -lit::<T>(self.table.eta(to_f64(t)))
    }

    fn exact_dt_phi(&self, t: T, x: &[T]) -> T {
        let tf = to_f64(t);
        let u = self.mean_gap(x);
        let s2 = self.params.sigma * self.params.sigma;
        -lit::<T>(self.table.eta_dot(tf)) * u * u / lit(2.0) + lit(0.5 * s2 * self.table.eta(tf))
    }

    fn exact_log_density(&self, t: T, x: &[T]) -> T {
        isotropic_log_density(x, &self.exact_mean(), self.variance(t))
    }

    fn exact_score(&self, t: T, x: &[T]) -> Vec<T> {
        vec![self.mean_gap(x) / self.variance(t)]
    }

    fn exact_moments(&self, t: T) -> GaussianSummary {
        GaussianSummary::new(
            DVector::from_element(1, self.params.initial_mean),
            DMatrix::from_element(1, 1, self.variance.at(to_f64(t))),
        )
        .expect("positive variance")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn problem() -> SystemicProblem<f64> {
        SystemicProblem::new(SystemicParams::default()).unwrap()
    }

    #[test]
    fn coupling_vanishes_at_mean() {
        let p = problem();
        let m = [0.3];
        let h = p.hamiltonian(0.0, &m, &[1.2], Some(&m)).unwrap();
        assert_eq!(h, 0.5 * 1.2 * 1.2);
        let g = p.grad_p_hamiltonian(0.0, &m, &[1.2], Some(&m)).unwrap();
        assert_eq!(g, vec![1.2]);
        assert!(matches!(
            p.hamiltonian(0.0, &m, &[1.2], None),
            Err(ProblemError::MissingPopulation)
        ));
    }

    #[test]
    fn f_is_zero() {
        let p = problem();
        assert_eq!(p.running_f(0.05, &[2.0], None, Some(&[0.0])).unwrap(), 0.0);
    }

    #[test]
    fn terminal_data() {
        let p = problem();
        assert_eq!(p.riccati().eta(0.1), 1.0);
        assert_eq!(p.riccati().chi(1.0, 0.1), 0.0);
        let x = [0.7];
        let g = p.terminal_target(&x, Some(&[0.0])).unwrap();
        assert!((p.exact_phi(0.1, &x) - g).abs() < 1e-15);
        assert_eq!(p.exact_grad_phi(0.05, &[0.0]), vec![0.0]);
    }

    #[test]
    fn literal_reading_target() {
        let p: SystemicProblem<f64> = SystemicProblem::new(SystemicParams {
            reading: TerminalReading::Literal,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(p.terminal_target(&[0.4], Some(&[0.0])).unwrap(), 0.2);
    }

    #[test]
    fn pure_diffusion_variance_limit() {
        let p: SystemicProblem<f64> = SystemicProblem::new(SystemicParams {
            a: -0.5,
            q: 0.5,
            eps: 0.25,
            c: 0.0,
            ..Default::default()
        })
        .unwrap();
        assert!((p.variance(0.1) - (0.25 + 0.1)).abs() < 1e-12);
    }
}
