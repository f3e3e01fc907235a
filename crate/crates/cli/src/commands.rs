//! `train` and `compare`: run the solver and write artifacts.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use mfcscore::dynamics::Mode;
use mfcscore::metrics::{CurvePoint, RunReport};
use mfcscore::training::{train, AdamState};
use serde::{Deserialize, Serialize};

use crate::config::{build_problem, RunConfig};

pub const REPORT: &str = "report.json";
pub const CURVES: &str = "curves.csv";
pub const TRAJ: &str = "traj.csv";
pub const CHECKPOINT: &str = "checkpoint.json";
pub const COMPARE_JSON: &str = "compare.json";
pub const COMPARE_CSV: &str = "compare.csv";

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Status {
    Completed,
    Diverged,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub step: usize,
    pub params: serde_json::Value,
    pub adam: AdamState<f64>,
}

fn write(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn curves_csv(curve: &[CurvePoint]) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut s = String::from("step,loss,err_phi,err_grad,err_lap,skipped\n");
    for c in curve {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            c.step,
            c.loss,
            opt(c.err_phi),
            opt(c.err_grad),
            opt(c.err_lap),
            c.skipped
        ));
    }
    s
}

/// Trains one run of `cfg` (its own mode and seed) and writes the run
/// artifacts into `dir`. A diverged run still writes whatever it produced.
pub fn run_single(cfg: &RunConfig, dir: &Path) -> anyhow::Result<RunReport> {
    let problem = build_problem(cfg)?;
    let outcome = train(problem.as_ref(), &cfg.train_config(cfg.mode, cfg.seed))?;
    let mut report = outcome.report;
    report.config = serde_json::to_value(cfg)?;

    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write(&dir.join(REPORT), &serde_json::to_string_pretty(&report)?)?;
    write(&dir.join(CURVES), &curves_csv(&report.curve))?;
    if let Some(b) = &outcome.validation {
        write(&dir.join(TRAJ), &b.to_csv())?;
    }
    let ck = Checkpoint {
        step: report.steps_completed,
        params: outcome.params.to_json(),
        adam: outcome.adam,
    };
    write(&dir.join(CHECKPOINT), &serde_json::to_string_pretty(&ck)?)?;
    Ok(report)
}

fn status(reports: &[&RunReport]) -> Status {
    if reports.iter().any(|r| r.divergence.is_some()) {
        Status::Diverged
    } else {
        Status::Completed
    }
}

pub fn cmd_train(cfg: &RunConfig) -> anyhow::Result<(RunReport, Status)> {
    let report = run_single(cfg, &cfg.out)?;
    eprintln!("{}", summary_line(&report));
    if cfg.plot {
        crate::plots::plot_dir(&cfg.out)?;
    }
    let st = status(&[&report]);
    Ok((report, st))
}

pub fn summary_line(r: &RunReport) -> String {
    let f = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
    format!(
        "{} {} seed {}: steps {} phi {} grad {} lap {} w2 {}{}",
        r.problem,
        r.mode,
        r.seed,
        r.steps_completed,
        f(r.final_err_phi),
        f(r.final_err_grad),
        f(r.final_err_lap),
        f(r.w2_terminal),
        r.divergence
            .as_ref()
            .map(|d| format!(" ({d})"))
            .unwrap_or_default()
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl Stats {
    /// Over the finite entries; `None` when there are none.
    pub fn of(values: impl IntoIterator<Item = Option<f64>>) -> Option<Self> {
        let v: Vec<f64> = values
            .into_iter()
            .flatten()
            .filter(|x| x.is_finite())
            .collect();
        if v.is_empty() {
            return None;
        }
        let n = v.len();
        let mean = v.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Self {
            n,
            mean,
            std,
            min: v.iter().copied().fold(f64::INFINITY, f64::min),
            max: v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub err_phi: Option<f64>,
    pub err_grad: Option<f64>,
    pub err_lap: Option<f64>,
    pub w2_terminal: Option<f64>,
    pub divergence: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub mode: Mode,
    pub runs: usize,
    pub diverged: usize,
    pub err_phi: Option<Stats>,
    pub err_grad: Option<Stats>,
    pub err_lap: Option<Stats>,
    pub w2_terminal: Option<Stats>,
    pub systemic_error: Option<Stats>,
    pub per_seed: Vec<SeedResult>,
}

impl CompareRow {
    pub fn new(mode: Mode, reports: &[RunReport]) -> Self {
        Self {
            mode,
            runs: reports.len(),
            diverged: reports.iter().filter(|r| r.divergence.is_some()).count(),
            err_phi: Stats::of(reports.iter().map(|r| r.final_err_phi)),
            err_grad: Stats::of(reports.iter().map(|r| r.final_err_grad)),
            err_lap: Stats::of(reports.iter().map(|r| r.final_err_lap)),
            w2_terminal: Stats::of(reports.iter().map(|r| r.w2_terminal)),
            systemic_error: Stats::of(reports.iter().map(|r| r.systemic_error)),
            per_seed: reports
                .iter()
                .map(|r| SeedResult {
                    seed: r.seed,
                    err_phi: r.final_err_phi,
                    err_grad: r.final_err_grad,
                    err_lap: r.final_err_lap,
                    w2_terminal: r.w2_terminal,
                    divergence: r.divergence.clone(),
                })
                .collect(),
        }
    }
}

/// Score against FBSDE over a common seed list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub problem: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<CompareRow>,
    /// Seeds on which both runs finished and the score run's final `phi`
    /// error is no larger than the FBSDE run's.
    pub score_not_worse: usize,
    pub config: serde_json::Value,
}

impl CompareReport {
    pub fn new(cfg: &RunConfig, score: &[RunReport], fbsde: &[RunReport]) -> anyhow::Result<Self> {
        let score_not_worse = score
            .iter()
            .zip(fbsde)
            .filter(|(s, f)| match (s.final_err_phi, f.final_err_phi) {
                (Some(a), Some(b)) => a <= b,
                _ => false,
            })
            .count();
        Ok(Self {
            problem: cfg.problem.as_str().to_string(),
            seeds: score.iter().map(|r| r.seed).collect(),
            rows: vec![
                CompareRow::new(Mode::Score, score),
                CompareRow::new(Mode::Fbsde, fbsde),
            ],
            score_not_worse,
            config: serde_json::to_value(cfg)?,
        })
    }

    pub fn to_csv(&self) -> String {
        let cell = |s: &Option<Stats>| match s {
            Some(s) => format!("{},{}", s.mean, s.std),
            None => ",".into(),
        };
        let mut out = String::from(
            "problem,mode,runs,diverged,err_phi_mean,err_phi_std,err_grad_mean,err_grad_std,\
             err_lap_mean,err_lap_std,w2_mean,w2_std,systemic_error_mean,systemic_error_std\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                self.problem,
                r.mode.as_str(),
                r.runs,
                r.diverged,
                cell(&r.err_phi),
                cell(&r.err_grad),
                cell(&r.err_lap),
                cell(&r.w2_terminal),
                cell(&r.systemic_error),
            ));
        }
        out
    }
}

pub fn run_dir(out: &Path, mode: Mode, seed: u64) -> PathBuf {
    out.join(mode.as_str()).join(format!("seed{seed}"))
}

pub fn cmd_compare(cfg: &RunConfig) -> anyhow::Result<(CompareReport, Status)> {
    let seeds: Vec<u64> = (0..cfg.seeds as u64).map(|k| cfg.seed + k).collect();
    let mut by_mode = [Vec::new(), Vec::new()];
    for (slot, mode) in [Mode::Score, Mode::Fbsde].into_iter().enumerate() {
        for &seed in &seeds {
            let run = cfg.for_run(mode, seed);
            let r = run_single(&run, &run_dir(&cfg.out, mode, seed))?;
            eprintln!("{}", summary_line(&r));
            by_mode[slot].push(r);
        }
    }
    let report = CompareReport::new(cfg, &by_mode[0], &by_mode[1])?;
    fs::create_dir_all(&cfg.out)?;
    write(
        &cfg.out.join(COMPARE_JSON),
        &serde_json::to_string_pretty(&report)?,
    )?;
    write(&cfg.out.join(COMPARE_CSV), &report.to_csv())?;
    if cfg.plot {
        crate::plots::plot_dir(&cfg.out)?;
    }
    let all: Vec<&RunReport> = by_mode.iter().flatten().collect();
    Ok((report, status(&all)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stats_skip_missing() {
        let s = Stats::of([Some(1.0), None, Some(3.0), Some(f64::NAN)]).unwrap();
        assert_eq!((s.n, s.mean, s.min, s.max), (2, 2.0, 1.0, 3.0));
        assert!((s.std - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(Stats::of([None]), None);
        assert_eq!(Stats::of([Some(0.5)]).unwrap().std, 0.0);
    }

    #[test]
    fn curves_leave_gaps_for_missing_errors() {
        let c = vec![CurvePoint {
            step: 1,
            loss: 0.5,
            err_phi: None,
            err_grad: Some(0.25),
            err_lap: None,
            skipped: false,
        }];
        assert_eq!(curves_csv(&c).lines().nth(1), Some("1,0.5,,0.25,,false"));
    }
}
