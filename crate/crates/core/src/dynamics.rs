//! Time stepping of the particle system: forward Euler for the score ODE
//! and Euler-Maruyama for the FBSDE baseline.
//!
//! The whole rollout is recorded on a [`Recording`] so the loss can be
//! differentiated back to the network parameters through every state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kde::KdeError;
use crate::net::{NetParams, TerminalWrapper};
use crate::problems::{MfcProblem, PopNodes, PopulationState, ProblemError};
use crate::scalar::{lit, Real};
use crate::tape::{ExprId, Recording, Shape, TapeError};

/// States beyond this magnitude count as diverged.
pub const DIVERGENCE_BOUND: f64 = 1e6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("rollout diverged at time node {node}")]
    Divergence { node: usize },
    #[error("initial batch of length {len} does not match dimension {dim}")]
    BatchShape { len: usize, dim: usize },
    #[error("invalid rollout configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error(transparent)]
    Tape(#[from] TapeError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Deterministic probability-flow rollout with a KDE score.
    #[default]
    Score,
    /// Stochastic characteristics.
    Fbsde,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Score => "score",
            Self::Fbsde => "fbsde",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutConfig<T> {
    /// Number of time intervals `N_T`.
    pub steps: usize,
    pub bandwidth: T,
    pub mode: Mode,
    /// Treat the KDE output as a constant in the backward pass.
    pub score_detach: bool,
    /// Seed of the Brownian increments (FBSDE mode).
    pub seed: u64,
}

impl<T: Real> RolloutConfig<T> {
    pub fn validate(&self) -> Result<(), DynamicsError> {
        if self.steps == 0 {
            return Err(DynamicsError::Config("at least one time step".into()));
        }
        if !(self.bandwidth > T::zero() && self.bandwidth.is_finite()) {
            return Err(DynamicsError::Config("bandwidth must be positive".into()));
        }
        Ok(())
    }
}

/// Where `phi`, its gradient and Laplacian come from.
#[derive(Clone, Copy, Debug)]
pub enum PhiSource<'a, T> {
    Network {
        params: &'a NetParams<T>,
        wrapper: &'a TerminalWrapper<T>,
    },
    /// Closed-form oracle of the problem (for consistency checks).
    Exact,
}

/// Where the score and log density come from in score mode.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ScoreSource {
    #[default]
    Kde,
    Exact,
}

/// Tape handles of one time node.
#[derive(Clone, Copy, Debug)]
pub struct NodeHandles {
    /// `N x d`
    pub x: ExprId,
    /// `N x 1`
    pub y: ExprId,
    /// `phi(t_j, x_j)`, `N x 1`
    pub phi: ExprId,
    /// `1 x d` when the problem couples to the mean.
    pub mean: Option<ExprId>,
}

/// Per-node particle values, copied out of the recording.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryBatch<T> {
    pub n: usize,
    pub dim: usize,
    pub times: Vec<T>,
    /// `[node][particle * dim + k]`
    pub x: Vec<Vec<T>>,
    pub y: Vec<Vec<T>>,
    pub phi: Vec<Vec<T>>,
    pub z: Vec<Vec<T>>,
    pub h: Vec<Vec<T>>,
}

impl<T: Real> TrajectoryBatch<T> {
    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn dt(&self) -> T {
        self.times[1] - self.times[0]
    }

    pub fn terminal_x(&self) -> &[T] {
        self.x.last().expect("at least one node")
    }

    /// One row per `(particle, node)`: `i,j,t,x..,y,z..,h`.
    pub fn to_csv(&self) -> String {
        let d = self.dim;
        let mut s = String::from("i,j,t");
        for k in 0..d {
            s.push_str(&format!(",x{k}"));
        }
        s.push_str(",y");
        for k in 0..d {
            s.push_str(&format!(",z{k}"));
        }
        s.push_str(",h\n");
        for i in 0..self.n {
            for (j, t) in self.times.iter().enumerate() {
                s.push_str(&format!("{i},{j},{t}"));
                for k in 0..d {
                    s.push_str(&format!(",{}", self.x[j][i * d + k]));
                }
                s.push_str(&format!(",{}", self.y[j][i]));
                for k in 0..d {
                    s.push_str(&format!(",{}", self.z[j][i * d + k]));
                }
                s.push_str(&format!(",{}\n", self.h[j][i]));
            }
        }
        s
    }
}

/// A recorded rollout: the tape, its per-node handles and the copied values.
#[derive(Debug)]
pub struct Rollout<T> {
    pub tape: Recording<T>,
    pub nodes: Vec<NodeHandles>,
    /// Parameter leaf (`1 x P`) when the network drives the rollout.
    pub params: Option<ExprId>,
    pub batch: TrajectoryBatch<T>,
}

pub fn population_state<T: Real>(
    x: &[T],
    dim: usize,
    bandwidth: T,
) -> Result<PopulationState<T>, KdeError> {
    PopulationState::new(x.to_vec(), dim, bandwidth)
}

/// `t_j = j dt`, with the last node pinned to the horizon.
pub fn time_grid<T: Real>(horizon: T, steps: usize) -> Vec<T> {
    let dt = horizon / lit(steps as f64);
    (0..=steps)
        .map(|j| {
            if j == steps {
                horizon
            } else {
                lit::<T>(j as f64) * dt
            }
        })
        .collect()
}

fn diverged(node: usize) -> impl Fn(TapeError) -> DynamicsError {
    move |e| match e {
        TapeError::NonFinite { .. } => DynamicsError::Divergence { node },
        other => DynamicsError::Tape(other),
    }
}

fn check_state<T: Real>(x: &[T], node: usize) -> Result<(), DynamicsError> {
    let bound = lit::<T>(DIVERGENCE_BOUND);
    if x.iter().all(|v| v.is_finite() && v.abs() <= bound) {
        Ok(())
    } else {
        Err(DynamicsError::Divergence { node })
    }
}

fn pointwise<T: Real>(x: &[T], dim: usize, cols: usize, f: impl Fn(&[T], &mut Vec<T>)) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len() / dim * cols);
    for row in x.chunks_exact(dim) {
        f(row, &mut out);
    }
    out
}

/// Rolls `x0` (row-major, `N x d`) forward over `cfg.steps` intervals.
pub fn rollout<T: Real>(
    problem: &dyn MfcProblem<T>,
    phi: PhiSource<'_, T>,
    score: ScoreSource,
    x0: &[T],
    cfg: &RolloutConfig<T>,
) -> Result<Rollout<T>, DynamicsError> {
    cfg.validate()?;
    let d = problem.dim();
    if x0.is_empty() || !x0.len().is_multiple_of(d) {
        return Err(DynamicsError::BatchShape {
            len: x0.len(),
            dim: d,
        });
    }
    let n = x0.len() / d;
    let horizon = problem.horizon();
    let times = time_grid(horizon, cfg.steps);
    let dt = horizon / lit(cfg.steps as f64);
    let ib = problem.inv_beta();
    let noise_scale = (lit::<T>(2.0) * dt * ib).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut tape = Recording::new();
    let params = match phi {
        PhiSource::Network { params, .. } => Some(tape.leaf(
            params.as_slice().to_vec(),
            Shape::new(1, params.as_slice().len()),
        )?),
        PhiSource::Exact => None,
    };

    let mut batch = TrajectoryBatch {
        n,
        dim: d,
        times: times.clone(),
        x: Vec::with_capacity(cfg.steps + 1),
        y: Vec::with_capacity(cfg.steps + 1),
        phi: Vec::with_capacity(cfg.steps + 1),
        z: Vec::with_capacity(cfg.steps + 1),
        h: Vec::with_capacity(cfg.steps + 1),
    };
    let mut nodes = Vec::with_capacity(cfg.steps + 1);

    check_state(x0, 0)?;
    let mut x = tape.constant(x0.to_vec(), Shape::new(n, d))?;
    let mut y: Option<ExprId> = None;

    for (j, &t) in times.iter().enumerate() {
        let fail = diverged(j);
        let xv = tape.value(x)?.to_vec();

        let mean = if problem.uses_mean() {
            Some(tape.mean_rows(x).map_err(&fail)?)
        } else {
            None
        };

        // density and score at the particles
        let want_score = cfg.mode == Mode::Score;
        let want_density = problem.uses_density();
        let (log_rho, score_node) = if !(want_score || want_density) {
            (None, None)
        } else {
            match score {
                ScoreSource::Kde => {
                    let mut k = tape.kde(x, cfg.bandwidth).map_err(&fail)?;
                    if cfg.score_detach {
                        k = tape.detach(k)?;
                    }
                    let lr = tape.cols(k, 0, 1)?;
                    let sc = tape.cols(k, 1, d)?;
                    (Some(lr), Some(sc))
                }
                ScoreSource::Exact => {
                    let lr = pointwise(&xv, d, 1, |r, o| o.push(problem.exact_log_density(t, r)));
                    let sc = pointwise(&xv, d, d, |r, o| o.extend(problem.exact_score(t, r)));
                    (
                        Some(tape.constant(lr, Shape::new(n, 1))?),
                        Some(tape.constant(sc, Shape::new(n, d))?),
                    )
                }
            }
        };

        // phi, z, h at the particles
        let (phi_j, z, h) = match phi {
            PhiSource::Network { params: p, wrapper } => {
                let leaf = params.expect("network rollouts record a parameter leaf");
                let jet = tape
                    .phi_jet(leaf, x, t, p.config(), wrapper)
                    .map_err(&fail)?;
                (
                    tape.cols(jet, 0, 1)?,
                    tape.cols(jet, 1, d)?,
                    tape.cols(jet, d + 1, 1)?,
                )
            }
            PhiSource::Exact => {
                let pv = pointwise(&xv, d, 1, |r, o| o.push(problem.exact_phi(t, r)));
                let zv = pointwise(&xv, d, d, |r, o| o.extend(problem.exact_grad_phi(t, r)));
                let hv = pointwise(&xv, d, 1, |r, o| o.push(problem.exact_lap_phi(t, r)));
                (
                    tape.constant(pv, Shape::new(n, 1))?,
                    tape.constant(zv, Shape::new(n, d))?,
                    tape.constant(hv, Shape::new(n, 1))?,
                )
            }
        };

        let y_j = match y {
            Some(v) => v,
            None => phi_j,
        };
        nodes.push(NodeHandles {
            x,
            y: y_j,
            phi: phi_j,
            mean,
        });
        batch.x.push(xv);
        batch.y.push(tape.value(y_j)?.to_vec());
        batch.phi.push(tape.value(phi_j)?.to_vec());
        batch.z.push(tape.value(z)?.to_vec());
        batch.h.push(tape.value(h)?.to_vec());

        if j == cfg.steps {
            break;
        }

        let pop = PopNodes {
            mean,
            log_density: log_rho,
        };
        let step = (|| -> Result<(ExprId, ExprId), DynamicsError> {
            let dph = problem.record_grad_p_hamiltonian(&mut tape, t, x, z, &pop)?;
            let ham = problem.record_hamiltonian(&mut tape, t, x, z, &pop)?;
            let f = problem.record_running_f(&mut tape, t, x, &pop)?;
            let zd = tape.row_dot(z, dph)?;
            // z . D_pH - H + f
            let common = tape.sub(zd, ham)?;
            let common = tape.add(common, f)?;
            match cfg.mode {
                Mode::Score => {
                    let sc = score_node.expect("score mode computes a score");
                    let isc = tape.scale(sc, ib)?;
                    let drift = tape.sub(dph, isc)?;
                    let dx = tape.scale(drift, dt)?;
                    let x_next = tape.add(x, dx)?;
                    let ih = tape.scale(h, ib)?;
                    let zs = tape.row_dot(z, isc)?;
                    let rate = tape.sub(common, ih)?;
                    let rate = tape.sub(rate, zs)?;
                    let dy = tape.scale(rate, dt)?;
                    let y_next = tape.add(y_j, dy)?;
                    Ok((x_next, y_next))
                }
                Mode::Fbsde => {
                    let xi: Vec<T> = (0..n * d)
                        .map(|_| {
                            let v: f64 = StandardNormal.sample(&mut rng);
                            lit::<T>(v) * noise_scale
                        })
                        .collect();
                    let dw = tape.constant(xi, Shape::new(n, d))?;
                    let dx = tape.scale(dph, dt)?;
                    let x_next = tape.add(x, dx)?;
                    let x_next = tape.add(x_next, dw)?;
                    let dy = tape.scale(common, dt)?;
                    let zdw = tape.row_dot(z, dw)?;
                    let y_next = tape.add(y_j, dy)?;
                    let y_next = tape.add(y_next, zdw)?;
                    Ok((x_next, y_next))
                }
            }
        })();
        let (x_next, y_next) = step.map_err(|e| match e {
            DynamicsError::Tape(TapeError::NonFinite { .. })
            | DynamicsError::Problem(ProblemError::Tape(TapeError::NonFinite { .. })) => {
                DynamicsError::Divergence { node: j + 1 }
            }
            other => other,
        })?;
        check_state(tape.value(x_next)?, j + 1)?;
        x = x_next;
        y = Some(y_next);
    }

    Ok(Rollout {
        tape,
        nodes,
        params,
        batch,
    })
}
