//! Flat JSON run configuration with per-problem defaults.

use std::path::{Path, PathBuf};

use mfcscore::dynamics::Mode;
use mfcscore::problems::{
    EntropyProblem, LqProblem, MfcProblem, ProblemError, SystemicParams, SystemicProblem,
    TerminalReading,
};
use mfcscore::training::{AdamHyper, TrainConfig};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("config is missing the problem id")]
    MissingProblem,
    #[error("key `{key}` does not apply to problem {problem}")]
    NotApplicable {
        key: &'static str,
        problem: &'static str,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProblemId {
    Entropy1d,
    Entropy2d,
    Lq1d,
    Lq2d,
    Systemic,
}

impl ProblemId {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Entropy1d => "entropy1d",
            Self::Entropy2d => "entropy2d",
            Self::Lq1d => "lq1d",
            Self::Lq2d => "lq2d",
            Self::Systemic => "systemic",
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Entropy2d | Self::Lq2d => 2,
            _ => 1,
        }
    }

    fn family(&self) -> Family {
        match self {
            Self::Entropy1d | Self::Entropy2d => Family::Entropy,
            Self::Lq1d | Self::Lq2d => Family::Lq,
            Self::Systemic => Family::Systemic,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Family {
    Entropy,
    Lq,
    Systemic,
}

/// The file as written; every key but `problem` is optional.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    problem: Option<ProblemId>,
    horizon: Option<f64>,
    learning_rate: Option<f64>,
    bandwidth: Option<f64>,
    batch: Option<usize>,
    time_steps: Option<usize>,
    k_end: Option<usize>,
    width: Option<usize>,
    depth: Option<usize>,
    seed: Option<u64>,
    seeds: Option<usize>,
    mode: Option<Mode>,
    score_detach: Option<bool>,
    validation_size: Option<usize>,
    adam_beta1: Option<f64>,
    adam_beta2: Option<f64>,
    adam_eps: Option<f64>,
    out: Option<PathBuf>,
    plot: Option<bool>,
    gamma: Option<f64>,
    beta: Option<f64>,
    a: Option<f64>,
    q: Option<f64>,
    eps: Option<f64>,
    c: Option<f64>,
    sigma: Option<f64>,
    initial_mean: Option<f64>,
    initial_var: Option<f64>,
    terminal_reading: Option<TerminalReading>,
    riccati_steps: Option<usize>,
}

/// Fully resolved configuration; this is what reports embed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub problem: ProblemId,
    pub horizon: f64,
    pub learning_rate: f64,
    pub bandwidth: f64,
    pub batch: usize,
    pub time_steps: usize,
    pub k_end: usize,
    pub width: usize,
    pub depth: usize,
    pub seed: u64,
    /// Number of seeds for `compare`.
    pub seeds: usize,
    pub mode: Mode,
    pub score_detach: bool,
    pub validation_size: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub out: PathBuf,
    /// Write SVG figures after `train` and `compare`.
    pub plot: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub systemic: Option<SystemicParams>,
}

impl RunConfig {
    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json_str(&text)
    }

    pub fn from_json_str(text: &str) -> Result<Self, ConfigError> {
        let raw: RawConfig = serde_json::from_str(text)?;
        resolve(raw)
    }

    /// Defaults for `problem` with nothing overridden.
    pub fn defaults(problem: ProblemId) -> Self {
        resolve(RawConfig {
            problem: Some(problem),
            ..Default::default()
        })
        .expect("defaults are valid")
    }

    pub fn dim(&self) -> usize {
        self.problem.dim()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.into()));
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return bad("horizon must be positive");
        }
        if self.seeds == 0 {
            return bad("seeds must be at least 1");
        }
        if self.width == 0 || self.depth == 0 {
            return bad("width and depth must be at least 1");
        }
        if let Some(g) = self.gamma {
            let lq = self.problem.family() == Family::Lq;
            if !(g.is_finite() && (g > 0.0 || (lq && g == 0.0))) {
                return bad("gamma must be positive");
            }
        }
        if let Some(b) = self.beta {
            if !(b > 0.0 && b.is_finite()) {
                return bad("beta must be positive");
            }
        }
        self.train_config(self.mode, self.seed)
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        build_problem(self).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    pub fn train_config(&self, mode: Mode, seed: u64) -> TrainConfig {
        TrainConfig {
            k_end: self.k_end,
            learning_rate: self.learning_rate,
            batch: self.batch,
            time_steps: self.time_steps,
            bandwidth: self.bandwidth,
            adam: AdamHyper {
                beta1: self.adam_beta1,
                beta2: self.adam_beta2,
                eps: self.adam_eps,
            },
            seed,
            mode,
            score_detach: self.score_detach,
            width: self.width,
            depth: self.depth,
            validation_size: self.validation_size,
        }
    }

    /// The resolved config of one run within a sweep.
    pub fn for_run(&self, mode: Mode, seed: u64) -> Self {
        Self {
            mode,
            seed,
            ..self.clone()
        }
    }
}

struct ProblemDefaults {
    horizon: f64,
    learning_rate: f64,
    bandwidth: f64,
    batch: usize,
}

fn problem_defaults(p: ProblemId) -> ProblemDefaults {
    let row = |horizon, learning_rate, bandwidth, batch| ProblemDefaults {
        horizon,
        learning_rate,
        bandwidth,
        batch,
    };
    match p {
        ProblemId::Entropy1d => row(0.5, 0.02, 0.35, 200),
        ProblemId::Entropy2d => row(0.5, 0.1, 0.4, 1000),
        ProblemId::Lq1d => row(0.5, 0.1, 0.35, 200),
        ProblemId::Lq2d => row(0.5, 0.1, 0.4, 1000),
        ProblemId::Systemic => row(0.1, 0.02, 0.3, 400),
    }
}

fn resolve(raw: RawConfig) -> Result<RunConfig, ConfigError> {
    let problem = raw.problem.ok_or(ConfigError::MissingProblem)?;
    let family = problem.family();
    let name = problem.as_str();
    let reject = |present: bool, key: &'static str| {
        if present {
            Err(ConfigError::NotApplicable { key, problem: name })
        } else {
            Ok(())
        }
    };
    if family != Family::Lq {
        reject(raw.beta.is_some(), "beta")?;
    }
    if family == Family::Systemic {
        reject(raw.gamma.is_some(), "gamma")?;
    } else {
        reject(raw.a.is_some(), "a")?;
        reject(raw.q.is_some(), "q")?;
        reject(raw.eps.is_some(), "eps")?;
        reject(raw.c.is_some(), "c")?;
        reject(raw.sigma.is_some(), "sigma")?;
        reject(raw.initial_mean.is_some(), "initial_mean")?;
        reject(raw.initial_var.is_some(), "initial_var")?;
        reject(raw.terminal_reading.is_some(), "terminal_reading")?;
        reject(raw.riccati_steps.is_some(), "riccati_steps")?;
    }

    let row = problem_defaults(problem);
    let adam = AdamHyper::default();
    let horizon = raw.horizon.unwrap_or(row.horizon);
    let systemic = (family == Family::Systemic).then(|| {
        let d = SystemicParams::default();
        SystemicParams {
            a: raw.a.unwrap_or(d.a),
            q: raw.q.unwrap_or(d.q),
            eps: raw.eps.unwrap_or(d.eps),
            c: raw.c.unwrap_or(d.c),
            sigma: raw.sigma.unwrap_or(d.sigma),
            horizon,
            initial_mean: raw.initial_mean.unwrap_or(d.initial_mean),
            initial_var: raw.initial_var.unwrap_or(d.initial_var),
            reading: raw.terminal_reading.unwrap_or(d.reading),
            riccati_steps: raw.riccati_steps.unwrap_or(d.riccati_steps),
        }
    });
    let cfg = RunConfig {
        problem,
        horizon,
        learning_rate: raw.learning_rate.unwrap_or(row.learning_rate),
        bandwidth: raw.bandwidth.unwrap_or(row.bandwidth),
        batch: raw.batch.unwrap_or(row.batch),
        time_steps: raw.time_steps.unwrap_or(10),
        k_end: raw.k_end.unwrap_or(200),
        width: raw.width.unwrap_or(30),
        depth: raw.depth.unwrap_or(2),
        seed: raw.seed.unwrap_or(0),
        seeds: raw.seeds.unwrap_or(5),
        mode: raw.mode.unwrap_or_default(),
        score_detach: raw.score_detach.unwrap_or(false),
        validation_size: raw.validation_size.unwrap_or(1000 * problem.dim()),
        adam_beta1: raw.adam_beta1.unwrap_or(adam.beta1),
        adam_beta2: raw.adam_beta2.unwrap_or(adam.beta2),
        adam_eps: raw.adam_eps.unwrap_or(adam.eps),
        out: raw.out.unwrap_or_else(|| PathBuf::from("out")),
        plot: raw.plot.unwrap_or(false),
        gamma: match family {
            Family::Systemic => None,
            _ => Some(raw.gamma.unwrap_or(0.1)),
        },
        beta: (family == Family::Lq).then(|| raw.beta.unwrap_or(5.0)),
        systemic,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn build_problem(cfg: &RunConfig) -> Result<Box<dyn MfcProblem<f64>>, ProblemError> {
    let d = cfg.dim();
    let gamma = cfg.gamma.unwrap_or(0.1);
    Ok(match cfg.problem.family() {
        Family::Entropy => Box::new(EntropyProblem::new(d, cfg.horizon, gamma)?),
        Family::Lq => Box::new(LqProblem::new(
            d,
            cfg.horizon,
            cfg.beta.unwrap_or(5.0),
            gamma,
        )?),
        Family::Systemic => {
            let params = cfg.systemic.unwrap_or_default();
            Box::new(SystemicProblem::<f64>::new(SystemicParams {
                horizon: cfg.horizon,
                ..params
            })?)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_takes_problem_defaults() {
        let c = RunConfig::from_json_str(r#"{"problem": "lq1d"}"#).unwrap();
        assert_eq!(c.horizon, 0.5);
        assert_eq!(c.learning_rate, 0.1);
        assert_eq!(c.bandwidth, 0.35);
        assert_eq!(c.batch, 200);
        assert_eq!(c.beta, Some(5.0));
        assert_eq!(c.gamma, Some(0.1));
        assert_eq!((c.time_steps, c.k_end, c.width, c.depth), (10, 200, 30, 2));
        assert_eq!(c.validation_size, 1000);

        let s = RunConfig::defaults(ProblemId::Systemic);
        assert_eq!(
            (s.horizon, s.learning_rate, s.bandwidth, s.batch),
            (0.1, 0.02, 0.3, 400)
        );
        let sp = s.systemic.unwrap();
        assert_eq!((sp.a, sp.q, sp.eps, sp.sigma), (0.1, 0.5, 0.1, 1.0));

        let e = RunConfig::defaults(ProblemId::Entropy2d);
        assert_eq!(
            (e.learning_rate, e.bandwidth, e.batch, e.validation_size),
            (0.1, 0.4, 1000, 2000)
        );
    }

    #[test]
    fn unknown_and_foreign_keys_rejected() {
        let e = RunConfig::from_json_str(r#"{"problem": "lq1d", "lerning_rate": 0.1}"#);
        assert!(matches!(e, Err(ConfigError::Parse(_))));
        let e = RunConfig::from_json_str(r#"{"problem": "entropy1d", "beta": 5}"#);
        assert!(matches!(
            e,
            Err(ConfigError::NotApplicable { key: "beta", .. })
        ));
        let e = RunConfig::from_json_str(r#"{"problem": "systemic", "gamma": 0.1}"#);
        assert!(matches!(
            e,
            Err(ConfigError::NotApplicable { key: "gamma", .. })
        ));
        let e = RunConfig::from_json_str(r#"{"k_end": 3}"#);
        assert!(matches!(e, Err(ConfigError::MissingProblem)));
        let e = RunConfig::from_json_str(r#"{"problem": "heat1d"}"#);
        assert!(matches!(e, Err(ConfigError::Parse(_))));
    }

    #[test]
    fn invalid_values_rejected() {
        for bad in [
            r#"{"problem": "lq1d", "bandwidth": 0}"#,
            r#"{"problem": "lq1d", "beta": -1}"#,
            r#"{"problem": "entropy1d", "horizon": 0}"#,
            r#"{"problem": "systemic", "sigma": 0}"#,
            r#"{"problem": "entropy1d", "seeds": 0}"#,
        ] {
            assert!(
                matches!(RunConfig::from_json_str(bad), Err(ConfigError::Invalid(_))),
                "{bad}"
            );
        }
    }

    #[test]
    fn resolved_config_round_trips() {
        let c =
            RunConfig::from_json_str(r#"{"problem": "systemic", "c": 2.0, "seed": 4}"#).unwrap();
        let v = serde_json::to_value(&c).unwrap();
        let back: RunConfig = serde_json::from_value(v).unwrap();
        assert_eq!(back, c);
        assert_eq!(c.systemic.unwrap().c, 2.0);
    }
}
