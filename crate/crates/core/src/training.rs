//! Trajectory-matching loss, soft terminal penalty, Adam, and the training
//! loop.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::dynamics::{
    rollout, DynamicsError, Mode, PhiSource, Rollout, RolloutConfig, ScoreSource, TrajectoryBatch,
};
use crate::metrics::{
    empirical_moments, gaussian_w2, rel_l2, systemic_error, CurvePoint, MetricsError, RunReport,
};
use crate::net::{init_params, NetConfig, NetError, NetParams};
use crate::problems::{MfcProblem, PopNodes, ProblemError};
use crate::scalar::{lit, to_f64, Real};
use crate::tape::{ExprId, TapeError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainingError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("terminal penalty requested for a hard terminal condition")]
    HardTerminal,
    #[error("parameter and gradient lengths differ: {0} vs {1}")]
    Length(usize, usize),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            step: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdamOutcome {
    Applied,
    /// Non-finite gradient; parameters and state untouched.
    Skipped,
}

/// Bias-corrected Adam step in place.
pub fn adam_update<T: Real>(
    params: &mut [T],
    grads: &[T],
    state: &mut AdamState<T>,
    lr: T,
    hyper: &AdamHyper,
) -> Result<AdamOutcome, TrainingError> {
    if params.len() != grads.len() || state.m.len() != params.len() {
        return Err(TrainingError::Length(params.len(), grads.len()));
    }
    if !crate::scalar::all_finite(grads) {
        return Ok(AdamOutcome::Skipped);
    }
    state.step += 1;
    let b1 = lit::<T>(hyper.beta1);
    let b2 = lit::<T>(hyper.beta2);
    let eps = lit::<T>(hyper.eps);
    let k = state.step as i32;
    let c1 = T::one() - b1.powi(k);
    let c2 = T::one() - b2.powi(k);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        *m = b1 * *m + (T::one() - b1) * *g;
        *v = b2 * *v + (T::one() - b2) * *g * *g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(AdamOutcome::Applied)
}

/// `(1/N) sum_i sum_{j>=1} (phi(t_j, x_j) - y_j)^2 dt`
pub fn path_loss<T: Real>(run: &mut Rollout<T>) -> Result<ExprId, TrainingError> {
    let n = run.batch.n;
    let dt = run.batch.dt();
    let tape = &mut run.tape;
    let mut total: Option<ExprId> = None;
    for node in run.nodes.iter().skip(1) {
        let diff = tape.sub(node.phi, node.y)?;
        let sq = tape.dot(diff, diff)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, sq)?,
            None => sq,
        });
    }
    let total = total.ok_or_else(|| TrainingError::Config("rollout has no steps".into()))?;
    Ok(tape.scale(total, dt / lit(n as f64))?)
}

/// `T (1/N) sum_i (phi(T, x_T) - g(x_T))^2`
pub fn terminal_penalty<T: Real>(
    run: &mut Rollout<T>,
    problem: &dyn MfcProblem<T>,
) -> Result<ExprId, TrainingError> {
    if problem.terminal().is_hard() {
        return Err(TrainingError::HardTerminal);
    }
    let n = run.batch.n;
    let last = *run.nodes.last().expect("rollout has nodes");
    let tape = &mut run.tape;
    let mean = match last.mean {
        Some(m) => Some(m),
        None if problem.uses_mean() => Some(tape.mean_rows(last.x)?),
        None => None,
    };
    let pop = PopNodes {
        mean,
        log_density: None,
    };
    let target = problem.record_terminal_target(tape, last.x, &pop)?;
    let diff = tape.sub(last.phi, target)?;
    let sq = tape.dot(diff, diff)?;
    Ok(tape.scale(sq, problem.horizon() / lit(n as f64))?)
}

fn record_objective<T: Real>(
    run: &mut Rollout<T>,
    problem: &dyn MfcProblem<T>,
) -> Result<ExprId, TrainingError> {
    let loss = path_loss(run)?;
    if problem.terminal().is_hard() {
        Ok(loss)
    } else {
        let pen = terminal_penalty(run, problem)?;
        Ok(run.tape.add(loss, pen)?)
    }
}

/// Objective value and its gradient with respect to the flat parameters.
pub fn loss_and_grad<T: Real>(
    problem: &dyn MfcProblem<T>,
    params: &NetParams<T>,
    x0: &[T],
    cfg: &RolloutConfig<T>,
) -> Result<(T, Vec<T>), TrainingError> {
    let wrapper = problem.terminal();
    let mut run = rollout(
        problem,
        PhiSource::Network {
            params,
            wrapper: &wrapper,
        },
        ScoreSource::Kde,
        x0,
        cfg,
    )?;
    let obj = record_objective(&mut run, problem)?;
    let value = run.tape.scalar_value(obj)?;
    let grads = run.tape.backward(obj)?;
    let leaf = run.params.expect("network rollout has a parameter leaf");
    Ok((value, grads.wrt(leaf)?.to_vec()))
}

/// Objective value only.
pub fn loss_value<T: Real>(
    problem: &dyn MfcProblem<T>,
    params: &NetParams<T>,
    x0: &[T],
    cfg: &RolloutConfig<T>,
) -> Result<T, TrainingError> {
    let wrapper = problem.terminal();
    let mut run = rollout(
        problem,
        PhiSource::Network {
            params,
            wrapper: &wrapper,
        },
        ScoreSource::Kde,
        x0,
        cfg,
    )?;
    let obj = record_objective(&mut run, problem)?;
    Ok(run.tape.scalar_value(obj)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub k_end: usize,
    pub learning_rate: f64,
    pub batch: usize,
    pub time_steps: usize,
    pub bandwidth: f64,
    pub adam: AdamHyper,
    pub seed: u64,
    pub mode: Mode,
    pub score_detach: bool,
    pub width: usize,
    pub depth: usize,
    pub validation_size: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainingError> {
        let bad = |m: &str| Err(TrainingError::Config(m.into()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if self.batch == 0 {
            return bad("batch must be at least 1");
        }
        if self.time_steps == 0 {
            return bad("time_steps must be at least 1");
        }
        if !(self.bandwidth > 0.0 && self.bandwidth.is_finite()) {
            return bad("bandwidth must be positive");
        }
        if self.validation_size < 2 {
            return bad("validation_size must be at least 2");
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || a.eps <= 0.0 {
            return bad("Adam constants out of range");
        }
        Ok(())
    }

    fn rollout_config<T: Real>(&self, seed: u64) -> RolloutConfig<T> {
        RolloutConfig {
            steps: self.time_steps,
            bandwidth: lit(self.bandwidth),
            mode: self.mode,
            score_detach: self.score_detach,
            seed,
        }
    }
}

/// Independent seed for `stream` derived from the run seed.
pub fn stream_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.next_u64()
}

const STREAM_INIT: u64 = 0;
const STREAM_VALIDATION: u64 = 1;
const STREAM_VALIDATION_NOISE: u64 = 2;
const STREAM_SYSTEMIC: u64 = 3;
const STREAM_STEPS: u64 = 16;

/// Relative errors of `(phi, grad phi, Lap phi)` pooled over all nodes.
pub fn validation_errors<T: Real>(
    problem: &dyn MfcProblem<T>,
    batch: &TrajectoryBatch<T>,
) -> Result<(f64, f64, f64), MetricsError> {
    let d = batch.dim;
    let mut ap = Vec::new();
    let mut ep = Vec::new();
    let mut az = Vec::new();
    let mut ez = Vec::new();
    let mut ah = Vec::new();
    let mut eh = Vec::new();
    for (j, &t) in batch.times.iter().enumerate() {
        for i in 0..batch.n {
            let x = &batch.x[j][i * d..(i + 1) * d];
            ap.push(to_f64(batch.phi[j][i]));
            ep.push(to_f64(problem.exact_phi(t, x)));
            az.extend(batch.z[j][i * d..(i + 1) * d].iter().map(|v| to_f64(*v)));
            ez.extend(problem.exact_grad_phi(t, x).into_iter().map(to_f64));
            ah.push(to_f64(batch.h[j][i]));
            eh.push(to_f64(problem.exact_lap_phi(t, x)));
        }
    }
    Ok((rel_l2(&ap, &ep)?, rel_l2(&az, &ez)?, rel_l2(&ah, &eh)?))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub params: NetParams<T>,
    pub adam: AdamState<T>,
    pub report: RunReport,
    /// Last validation rollout (absent if the run diverged before one).
    pub validation: Option<TrajectoryBatch<T>>,
}

fn validate_run<T: Real>(
    problem: &dyn MfcProblem<T>,
    params: &NetParams<T>,
    x0: &[T],
    cfg: &RolloutConfig<T>,
) -> Result<TrajectoryBatch<T>, DynamicsError> {
    let wrapper = problem.terminal();
    Ok(rollout(
        problem,
        PhiSource::Network {
            params,
            wrapper: &wrapper,
        },
        ScoreSource::Kde,
        x0,
        cfg,
    )?
    .batch)
}

/// Full training loop. Divergence does not error: it halts the loop and is
/// recorded in the report.
pub fn train<T: Real>(
    problem: &dyn MfcProblem<T>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>, TrainingError> {
    cfg.validate()?;
    let d = problem.dim();
    let net = NetConfig {
        dim: d,
        width: cfg.width,
        depth: cfg.depth,
        activation: Default::default(),
    };
    net.validate()?;
    let mut params = init_params::<T>(net, stream_seed(cfg.seed, STREAM_INIT))?;
    let mut adam = AdamState::new(params.as_slice().len());
    let lr = lit::<T>(cfg.learning_rate);
    let val_x0 = problem.sample_initial(
        stream_seed(cfg.seed, STREAM_VALIDATION),
        cfg.validation_size,
    );
    let val_cfg = cfg.rollout_config::<T>(stream_seed(cfg.seed, STREAM_VALIDATION_NOISE));

    let mut curve = Vec::with_capacity(cfg.k_end);
    let mut divergence = None;
    let mut validation = None;
    let mut skipped = 0;
    let mut val_failures = 0;

    for k in 1..=cfg.k_end {
        let base = STREAM_STEPS + 2 * k as u64;
        let x0 = problem.sample_initial(stream_seed(cfg.seed, base), cfg.batch);
        let rcfg = cfg.rollout_config::<T>(stream_seed(cfg.seed, base + 1));
        let (loss, grad) = match loss_and_grad(problem, &params, &x0, &rcfg) {
            Ok(v) => v,
            Err(TrainingError::Dynamics(DynamicsError::Divergence { node })) => {
                divergence = Some(format!(
                    "training rollout diverged at step {k}, node {node}"
                ));
                break;
            }
            Err(e) => return Err(e),
        };
        let outcome = adam_update(params.as_mut_slice(), &grad, &mut adam, lr, &cfg.adam)?;
        let was_skipped = outcome == AdamOutcome::Skipped;
        if was_skipped {
            skipped += 1;
        }
        // the held-out set only monitors training: a diverging validation
        // rollout leaves a gap in the error curve
        let (errs, batch) = match validate_run(problem, &params, &val_x0, &val_cfg) {
            Ok(b) => (Some(validation_errors(problem, &b)?), Some(b)),
            Err(DynamicsError::Divergence { .. }) => {
                val_failures += 1;
                (None, None)
            }
            Err(e) => return Err(e.into()),
        };
        curve.push(CurvePoint {
            step: k,
            loss: to_f64(loss),
            err_phi: errs.map(|e| e.0),
            err_grad: errs.map(|e| e.1),
            err_lap: errs.map(|e| e.2),
            skipped: was_skipped,
        });
        validation = batch;
    }

    if divergence.is_none() && validation.is_none() {
        // no steps taken, or the last validation rollout failed
        match validate_run(problem, &params, &val_x0, &val_cfg) {
            Ok(b) => validation = Some(b),
            Err(DynamicsError::Divergence { node }) => {
                divergence = Some(format!(
                    "validation rollout of the final network diverged at node {node}"
                ));
            }
            Err(e) => return Err(e.into()),
        }
    }

    let exact_t = problem.exact_moments(problem.horizon());
    let (final_errs, w2) = match (&validation, &divergence) {
        (Some(b), None) => {
            let (ep, eg, el) = validation_errors(problem, b)?;
            let xt: Vec<f64> = b.terminal_x().iter().map(|v| to_f64(*v)).collect();
            let fit = empirical_moments(&xt, d)?;
            (Some((ep, eg, el)), Some(gaussian_w2(&fit, &exact_t)?))
        }
        _ => (None, None),
    };
    let sys = systemic_error(
        &exact_t,
        cfg.validation_size,
        stream_seed(cfg.seed, STREAM_SYSTEMIC),
    )?;

    let report = RunReport {
        problem: problem.name().to_string(),
        mode: cfg.mode.as_str().to_string(),
        seed: cfg.seed,
        steps_completed: curve.len(),
        curve,
        final_err_phi: final_errs.map(|e| e.0),
        final_err_grad: final_errs.map(|e| e.1),
        final_err_lap: final_errs.map(|e| e.2),
        w2_terminal: w2,
        systemic_error: Some(sys),
        skipped_updates: skipped,
        validation_divergences: val_failures,
        divergence,
        config: serde_json::to_value(cfg).unwrap_or(Value::Null),
    };
    Ok(TrainOutcome {
        params,
        adam,
        report,
        validation,
    })
}
