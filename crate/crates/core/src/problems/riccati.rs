//! Backward RK4 solution of the scalar Riccati equation
//! `eta' = eta^2 + 2 (a + q) eta + q^2 - eps`, `eta(T) = c`, tabulated on a
//! uniform grid, plus the forward variance equation of the optimal flow.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RiccatiError {
    #[error("at least 100 steps required, got {0}")]
    TooFewSteps(usize),
    #[error("solution leaves the bounded regime near t = {0}")]
    BlowUp(f64),
    #[error("horizon must be positive and finite")]
    Horizon,
}

const BLOW_UP: f64 = 1e6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RiccatiCoefficients {
    pub a: f64,
    pub q: f64,
    pub eps: f64,
    pub c: f64,
}

impl RiccatiCoefficients {
    pub fn rhs(&self, eta: f64) -> f64 {
        eta * eta + 2.0 * (self.a + self.q) * eta + self.q * self.q - self.eps
    }
}

/// Values of `eta` and of `chi(t) = -(sigma^2/2) int_t^T eta` on
/// `t_k = k T / steps`.
#[derive(Clone, Debug, PartialEq)]
pub struct RiccatiTable {
    coeffs: RiccatiCoefficients,
    horizon: f64,
    eta: Vec<f64>,
    // int_{t_k}^T eta, composite trapezoid
    tail: Vec<f64>,
}

fn rk4_step(f: impl Fn(f64, f64) -> f64, t: f64, y: f64, h: f64) -> f64 {
    let k1 = f(t, y);
    let k2 = f(t + h / 2.0, y + h / 2.0 * k1);
    let k3 = f(t + h / 2.0, y + h / 2.0 * k2);
    let k4 = f(t + h, y + h * k3);
    y + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
}

/// Linear interpolation on the uniform grid `0..=horizon`.
fn interp(table: &[f64], horizon: f64, t: f64) -> f64 {
    let steps = table.len() - 1;
    let s = (t / horizon * steps as f64).clamp(0.0, steps as f64);
    let k = (s.floor() as usize).min(steps - 1);
    let w = s - k as f64;
    (1.0 - w) * table[k] + w * table[k + 1]
}

pub fn solve_riccati(
    coeffs: RiccatiCoefficients,
    horizon: f64,
    steps: usize,
) -> Result<RiccatiTable, RiccatiError> {
    if steps < 100 {
        return Err(RiccatiError::TooFewSteps(steps));
    }
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(RiccatiError::Horizon);
    }
    let h = horizon / steps as f64;
    let mut eta = vec![0.0; steps + 1];
    eta[steps] = coeffs.c;
    for k in (0..steps).rev() {
        let t = (k + 1) as f64 * h;
        let next = rk4_step(|_, y| coeffs.rhs(y), t, eta[k + 1], -h);
        if !next.is_finite() || next.abs() > BLOW_UP {
            return Err(RiccatiError::BlowUp(k as f64 * h));
        }
        eta[k] = next;
    }
    let mut tail = vec![0.0; steps + 1];
    for k in (0..steps).rev() {
        tail[k] = tail[k + 1] + 0.5 * h * (eta[k] + eta[k + 1]);
    }
    Ok(RiccatiTable {
        coeffs,
        horizon,
        eta,
        tail,
    })
}

impl RiccatiTable {
    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.eta.len() - 1
    }

    pub fn coefficients(&self) -> RiccatiCoefficients {
        self.coeffs
    }

    pub fn nodes(&self) -> &[f64] {
        &self.eta
    }

    pub fn eta(&self, t: f64) -> f64 {
        interp(&self.eta, self.horizon, t)
    }

    /// Right-hand side evaluated at the interpolated value.
    pub fn eta_dot(&self, t: f64) -> f64 {
        self.coeffs.rhs(self.eta(t))
    }

    /// `int_t^T eta`
    pub fn integral_to_horizon(&self, t: f64) -> f64 {
        interp(&self.tail, self.horizon, t)
    }

    /// `chi(t) = -(sigma^2 / 2) int_t^T eta`
    pub fn chi(&self, sigma: f64, t: f64) -> f64 {
        -0.5 * sigma * sigma * self.integral_to_horizon(t)
    }

    /// `(t, eta, chi)` rows.
    pub fn to_csv(&self, sigma: f64) -> String {
        let h = self.horizon / self.steps() as f64;
        let mut s = String::from("t,eta,chi\n");
        for k in 0..=self.steps() {
            let t = k as f64 * h;
            s.push_str(&format!(
                "{},{},{}\n",
                t,
                self.eta[k],
                -0.5 * sigma * sigma * self.tail[k]
            ));
        }
        s
    }
}

/// Variance `S(t)` of the optimal flow, `S' = -2 (a + q + eta) S + sigma^2`,
/// integrated forward with RK4 on the Riccati grid.
#[derive(Clone, Debug, PartialEq)]
pub struct VarianceTable {
    horizon: f64,
    var: Vec<f64>,
}

impl VarianceTable {
    pub fn new(table: &RiccatiTable, sigma: f64, initial: f64) -> Self {
        let steps = table.steps();
        let h = table.horizon / steps as f64;
        let k = table.coeffs.a + table.coeffs.q;
        let rhs = |t: f64, s: f64| -2.0 * (k + table.eta(t)) * s + sigma * sigma;
        let mut var = vec![initial; steps + 1];
        for j in 0..steps {
            var[j + 1] = rk4_step(rhs, j as f64 * h, var[j], h);
        }
        Self {
            horizon: table.horizon,
            var,
        }
    }

    pub fn at(&self, t: f64) -> f64 {
        interp(&self.var, self.horizon, t)
    }
}
