//! SVG figures from run directories written by `train` or `compare`.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use mfcscore::metrics::{empirical_moments, RunReport};
use mfcscore::problems::MfcProblem;
use mfcscore::{KdeCloud, NetParams};

use crate::commands::{Checkpoint, CHECKPOINT, REPORT, TRAJ};
use crate::config::{build_problem, RunConfig};
use crate::svg::{range, Axes, Scale, Segment, Svg, PALETTE};

/// Particle positions per time node, read back from `traj.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct Traj {
    pub dim: usize,
    pub times: Vec<f64>,
    /// `[node][particle * dim + k]`
    pub x: Vec<Vec<f64>>,
}

impl Traj {
    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().context("empty trajectory file")?;
        let dim = header.split(',').filter(|c| c.starts_with('x')).count();
        if dim == 0 {
            bail!("trajectory header has no state columns");
        }
        let mut times: Vec<f64> = Vec::new();
        let mut x: Vec<Vec<f64>> = Vec::new();
        for (n, line) in lines.enumerate() {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() < 3 + dim {
                bail!("trajectory row {} is short", n + 2);
            }
            let j: usize = f[1].parse()?;
            let t: f64 = f[2].parse()?;
            while x.len() <= j {
                x.push(Vec::new());
                times.push(f64::NAN);
            }
            times[j] = t;
            for v in &f[3..3 + dim] {
                x[j].push(v.parse()?);
            }
        }
        if x.is_empty() {
            bail!("trajectory has no rows");
        }
        Ok(Self { dim, times, x })
    }
}

pub struct RunDir {
    pub report: RunReport,
    pub config: RunConfig,
    pub params: Option<NetParams<f64>>,
    pub traj: Option<Traj>,
}

impl RunDir {
    pub fn load(dir: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(dir.join(REPORT))
            .with_context(|| format!("reading {}", dir.join(REPORT).display()))?;
        let report: RunReport = serde_json::from_str(&text)?;
        let config: RunConfig = serde_json::from_value(report.config.clone())
            .context("report does not embed a run configuration")?;
        let params = match fs::read_to_string(dir.join(CHECKPOINT)) {
            Ok(t) => {
                let ck: Checkpoint = serde_json::from_str(&t)?;
                Some(NetParams::from_json(&ck.params)?)
            }
            Err(_) => None,
        };
        let traj = match fs::read_to_string(dir.join(TRAJ)) {
            Ok(t) => Some(Traj::parse(&t)?),
            Err(_) => None,
        };
        Ok(Self {
            report,
            config,
            params,
            traj,
        })
    }
}

fn seed_dirs(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<(u64, PathBuf)> = fs::read_dir(dir)
        .into_iter()
        .flatten()
        .flatten()
        .filter_map(|e| {
            let name = e.file_name().to_string_lossy().to_string();
            let seed = name.strip_prefix("seed")?.parse().ok()?;
            e.path().join(REPORT).exists().then(|| (seed, e.path()))
        })
        .collect();
    v.sort();
    v.into_iter().map(|(_, p)| p).collect()
}

/// Runs grouped by mode: a single run at `out` and/or `out/{mode}/seed*`.
pub fn discover(out: &Path) -> anyhow::Result<Vec<(String, Vec<RunDir>)>> {
    let mut groups: Vec<(String, Vec<RunDir>)> = Vec::new();
    if out.join(REPORT).exists() {
        let r = RunDir::load(out)?;
        groups.push((r.report.mode.clone(), vec![r]));
    }
    for mode in ["score", "fbsde"] {
        let dirs = seed_dirs(&out.join(mode));
        if dirs.is_empty() {
            continue;
        }
        let runs = dirs
            .iter()
            .map(|d| RunDir::load(d))
            .collect::<anyhow::Result<Vec<_>>>()?;
        match groups.iter_mut().find(|g| g.0 == mode) {
            Some(g) => g.1.extend(runs),
            None => groups.push((mode.to_string(), runs)),
        }
    }
    if groups.is_empty() {
        bail!("no run reports found under {}", out.display());
    }
    Ok(groups)
}

/// Writes every applicable figure into `out`; returns the files written.
pub fn plot_dir(out: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let groups = discover(out)?;
    let first = &groups[0].1[0];
    let problem = build_problem(&first.config)?;
    let mut files = Vec::new();
    let mut emit = |name: &str, svg: String| -> anyhow::Result<()> {
        let p = out.join(name);
        fs::write(&p, svg).with_context(|| format!("writing {}", p.display()))?;
        files.push(p);
        Ok(())
    };
    emit("curves.svg", curves_figure(&groups))?;
    let d = problem.dim();
    let reps: Vec<(&str, &RunDir)> = groups.iter().map(|(m, r)| (m.as_str(), &r[0])).collect();
    if d == 1 {
        if let Some(s) = phi0_figure(problem.as_ref(), &reps) {
            emit("phi0.svg", s)?;
        }
        if let Some((dens, score)) = terminal_figures_1d(problem.as_ref(), &reps) {
            emit("density_T.svg", dens)?;
            emit("score_T.svg", score)?;
        }
    }
    if d == 2 {
        if let Some(s) = scatter_figure(&reps) {
            emit("scatter.svg", s)?;
        }
        if let Some(s) = contour_figure(problem.as_ref(), &reps) {
            emit("density_T.svg", s)?;
        }
    }
    if problem.name() == "lq" {
        if let Some(s) = variance_figure(problem.as_ref(), &reps) {
            emit("variance.svg", s)?;
        }
    }
    Ok(files)
}

/// `(step, mean, min, max)`
type BandPoint = (f64, f64, f64, f64);

/// Mean with min/max band across runs, per step.
fn band(
    runs: &[RunDir],
    pick: impl Fn(&mfcscore::metrics::CurvePoint) -> Option<f64>,
) -> Vec<BandPoint> {
    let len = runs.iter().map(|r| r.report.curve.len()).max().unwrap_or(0);
    (0..len)
        .filter_map(|k| {
            let v: Vec<f64> = runs
                .iter()
                .filter_map(|r| r.report.curve.get(k).and_then(&pick))
                .filter(|x| x.is_finite() && *x > 0.0)
                .collect();
            if v.is_empty() {
                return None;
            }
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            Some(((k + 1) as f64, mean, lo, hi))
        })
        .collect()
}

type Pick = fn(&mfcscore::metrics::CurvePoint) -> Option<f64>;

pub fn curves_figure(groups: &[(String, Vec<RunDir>)]) -> String {
    let panels: [(&str, Pick); 4] = [
        ("loss", |c| Some(c.loss)),
        ("rel. error phi", |c| c.err_phi),
        ("rel. error grad phi", |c| c.err_grad),
        ("rel. error Lap phi", |c| c.err_lap),
    ];
    let (w, h) = (300.0, 230.0);
    let mut svg = Svg::new(4.0 * (w + 80.0) + 20.0, h + 90.0);
    for (p, (title, pick)) in panels.iter().enumerate() {
        let series: Vec<(String, Vec<BandPoint>)> = groups
            .iter()
            .map(|(m, r)| (m.clone(), band(r, pick)))
            .collect();
        let steps = series
            .iter()
            .flat_map(|s| s.1.iter().map(|q| q.0))
            .fold(1.0, f64::max);
        let yr = range(
            series
                .iter()
                .flat_map(|s| s.1.iter().flat_map(|q| [q.2, q.3])),
            Scale::Log,
        );
        let mut ax = Axes::new(
            &mut svg,
            (70.0 + p as f64 * (w + 80.0), 30.0),
            (w, h),
            (0.0, steps),
            yr,
            Scale::Log,
            title,
            ("step", ""),
        );
        for (k, (mode, s)) in series.iter().enumerate() {
            let c = PALETTE[k % PALETTE.len()];
            let x: Vec<f64> = s.iter().map(|q| q.0).collect();
            let lo: Vec<f64> = s.iter().map(|q| q.2).collect();
            let hi: Vec<f64> = s.iter().map(|q| q.3).collect();
            ax.band(&mut svg, &x, &lo, &hi, c);
            let mean: Vec<(f64, f64)> = s.iter().map(|q| (q.0, q.1)).collect();
            ax.line(&mut svg, &mean, c, mode, false);
        }
        ax.draw_legend(&mut svg);
    }
    svg.finish()
}

fn grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64)
        .collect()
}

fn span_1d(problem: &dyn MfcProblem<f64>, t: f64, k: f64) -> (f64, f64) {
    let g = problem.exact_moments(t);
    let (m, s) = (g.mean()[0], g.cov()[(0, 0)].sqrt());
    (m - k * s, m + k * s)
}

fn phi0_figure(problem: &dyn MfcProblem<f64>, reps: &[(&str, &RunDir)]) -> Option<String> {
    let (lo, hi) = span_1d(problem, 0.0, 3.0);
    let xs = grid(lo, hi, 121);
    let wrapper = problem.terminal();
    let exact: Vec<(f64, f64)> = xs
        .iter()
        .map(|&x| (x, problem.exact_phi(0.0, &[x])))
        .collect();
    let mut curves = Vec::new();
    for (mode, r) in reps {
        let p = r.params.as_ref()?;
        let v: Vec<(f64, f64)> = xs
            .iter()
            .filter_map(|&x| {
                mfcscore::net::phi_eval(p, &wrapper, 0.0, &[x])
                    .ok()
                    .map(|y| (x, y))
            })
            .collect();
        curves.push((*mode, v));
    }
    let yr = range(
        exact
            .iter()
            .chain(curves.iter().flat_map(|c| c.1.iter()))
            .map(|p| p.1),
        Scale::Linear,
    );
    let mut svg = Svg::new(460.0, 340.0);
    let mut ax = Axes::new(
        &mut svg,
        (70.0, 30.0),
        (360.0, 250.0),
        (lo, hi),
        yr,
        Scale::Linear,
        "phi(0, x)",
        ("x", ""),
    );
    ax.line(&mut svg, &exact, "#000", "exact", true);
    for (k, (mode, v)) in curves.iter().enumerate() {
        ax.line(&mut svg, v, PALETTE[k % PALETTE.len()], mode, false);
    }
    ax.draw_legend(&mut svg);
    Some(svg.finish())
}

fn terminal_cloud(r: &RunDir, bandwidth: f64) -> Option<KdeCloud<f64>> {
    let t = r.traj.as_ref()?;
    KdeCloud::new(t.x.last()?.clone(), t.dim, bandwidth).ok()
}

fn terminal_figures_1d(
    problem: &dyn MfcProblem<f64>,
    reps: &[(&str, &RunDir)],
) -> Option<(String, String)> {
    let horizon = problem.horizon();
    let (lo, hi) = span_1d(problem, horizon, 3.5);
    let xs = grid(lo, hi, 121);
    let exact_d: Vec<(f64, f64)> = xs
        .iter()
        .map(|&x| (x, problem.exact_log_density(horizon, &[x]).exp()))
        .collect();
    let exact_s: Vec<(f64, f64)> = xs
        .iter()
        .map(|&x| (x, problem.exact_score(horizon, &[x])[0]))
        .collect();
    let mut dens = Vec::new();
    let mut score = Vec::new();
    for (mode, r) in reps {
        let Some(cloud) = terminal_cloud(r, r.config.bandwidth) else {
            continue;
        };
        let mut d = Vec::new();
        let mut s = Vec::new();
        for &x in &xs {
            if let Ok((l, g)) = cloud.log_density_and_score(&[x]) {
                d.push((x, l.exp()));
                s.push((x, g[0]));
            }
        }
        dens.push((*mode, d));
        score.push((*mode, s));
    }
    if dens.is_empty() {
        return None;
    }
    let draw = |title: &str, exact: &[(f64, f64)], est: &[(&str, Vec<(f64, f64)>)]| {
        let yr = range(
            exact
                .iter()
                .chain(est.iter().flat_map(|c| c.1.iter()))
                .map(|p| p.1),
            Scale::Linear,
        );
        let mut svg = Svg::new(460.0, 340.0);
        let mut ax = Axes::new(
            &mut svg,
            (70.0, 30.0),
            (360.0, 250.0),
            (lo, hi),
            yr,
            Scale::Linear,
            title,
            ("x", ""),
        );
        ax.line(&mut svg, exact, "#000", "exact", true);
        for (k, (mode, v)) in est.iter().enumerate() {
            ax.line(
                &mut svg,
                v,
                PALETTE[k % PALETTE.len()],
                &format!("KDE {mode}"),
                false,
            );
        }
        ax.draw_legend(&mut svg);
        svg.finish()
    };
    Some((
        draw("density at T", &exact_d, &dens),
        draw("score at T", &exact_s, &score),
    ))
}

fn variance_figure(problem: &dyn MfcProblem<f64>, reps: &[(&str, &RunDir)]) -> Option<String> {
    let d = problem.dim();
    let mut est = Vec::new();
    for (mode, r) in reps {
        let Some(t) = r.traj.as_ref() else { continue };
        for k in 0..d {
            let v: Vec<(f64, f64)> = t
                .times
                .iter()
                .zip(&t.x)
                .filter_map(|(time, x)| {
                    let g = empirical_moments(x, d).ok()?;
                    Some((*time, g.cov()[(k, k)]))
                })
                .collect();
            let label = if d == 1 {
                mode.to_string()
            } else {
                format!("{mode} x{k}")
            };
            est.push((label, v));
        }
    }
    if est.is_empty() {
        return None;
    }
    let horizon = problem.horizon();
    let ts = grid(0.0, horizon, 51);
    let exact: Vec<(f64, f64)> = ts
        .iter()
        .map(|&t| (t, problem.exact_moments(t).cov()[(0, 0)]))
        .collect();
    let yr = range(
        exact
            .iter()
            .chain(est.iter().flat_map(|c| c.1.iter()))
            .map(|p| p.1),
        Scale::Linear,
    );
    let mut svg = Svg::new(460.0, 340.0);
    let mut ax = Axes::new(
        &mut svg,
        (70.0, 30.0),
        (360.0, 250.0),
        (0.0, horizon),
        yr,
        Scale::Linear,
        "variance of x_t",
        ("t", ""),
    );
    ax.line(&mut svg, &exact, "#000", "exact", true);
    for (k, (label, v)) in est.iter().enumerate() {
        ax.line(&mut svg, v, PALETTE[k % PALETTE.len()], label, false);
    }
    ax.draw_legend(&mut svg);
    Some(svg.finish())
}

/// Particle clouds at five time nodes, one row per mode.
fn scatter_figure(reps: &[(&str, &RunDir)]) -> Option<String> {
    let rows: Vec<(&str, &Traj)> = reps
        .iter()
        .filter_map(|(m, r)| Some((*m, r.traj.as_ref()?)))
        .collect();
    if rows.is_empty() {
        return None;
    }
    let lim = rows
        .iter()
        .flat_map(|r| r.1.x.iter().flatten())
        .fold(0.0f64, |a, v| a.max(v.abs()))
        .max(1e-3)
        * 1.05;
    let cell = 180.0;
    let mut svg = Svg::new(
        5.0 * (cell + 60.0) + 20.0,
        rows.len() as f64 * (cell + 70.0) + 10.0,
    );
    for (row, (mode, traj)) in rows.iter().enumerate() {
        let n = traj.x.len() - 1;
        for (col, j) in [0, n / 4, n / 2, 3 * n / 4, n].into_iter().enumerate() {
            let title = format!("{mode}, t = {:.3}", traj.times[j]);
            let ax = Axes::new(
                &mut svg,
                (
                    60.0 + col as f64 * (cell + 60.0),
                    30.0 + row as f64 * (cell + 70.0),
                ),
                (cell, cell),
                (-lim, lim),
                (-lim, lim),
                Scale::Linear,
                &title,
                ("x0", "x1"),
            );
            let p: Vec<(f64, f64)> = traj.x[j].chunks_exact(2).map(|c| (c[0], c[1])).collect();
            ax.scatter(&mut svg, &p, PALETTE[row % PALETTE.len()]);
        }
    }
    Some(svg.finish())
}

/// Marching-squares segments of `f[iy][ix] = level`.
pub fn contour(xs: &[f64], ys: &[f64], f: &[Vec<f64>], level: f64) -> Vec<Segment> {
    let mut segs = Vec::new();
    let cross = |a: (f64, f64, f64), b: (f64, f64, f64)| -> Option<(f64, f64)> {
        let (da, db) = (a.2 - level, b.2 - level);
        if (da < 0.0) == (db < 0.0) {
            return None;
        }
        let s = da / (da - db);
        Some((a.0 + s * (b.0 - a.0), a.1 + s * (b.1 - a.1)))
    };
    for iy in 0..ys.len().saturating_sub(1) {
        for ix in 0..xs.len().saturating_sub(1) {
            let c00 = (xs[ix], ys[iy], f[iy][ix]);
            let c10 = (xs[ix + 1], ys[iy], f[iy][ix + 1]);
            let c11 = (xs[ix + 1], ys[iy + 1], f[iy + 1][ix + 1]);
            let c01 = (xs[ix], ys[iy + 1], f[iy + 1][ix]);
            let p: Vec<(f64, f64)> = [(c00, c10), (c10, c11), (c11, c01), (c01, c00)]
                .into_iter()
                .filter_map(|(a, b)| cross(a, b))
                .collect();
            for pair in p.chunks_exact(2) {
                segs.push((pair[0], pair[1]));
            }
        }
    }
    segs
}

/// Terminal density contours: exact against the KDE of each mode.
fn contour_figure(problem: &dyn MfcProblem<f64>, reps: &[(&str, &RunDir)]) -> Option<String> {
    let horizon = problem.horizon();
    let g = problem.exact_moments(horizon);
    let s = (0..2).map(|k| g.cov()[(k, k)].sqrt()).fold(0.0, f64::max);
    let (mx, my) = (g.mean()[0], g.mean()[1]);
    let xs = grid(mx - 3.0 * s, mx + 3.0 * s, 61);
    let ys = grid(my - 3.0 * s, my + 3.0 * s, 61);
    let field = |f: &dyn Fn(f64, f64) -> f64| -> Vec<Vec<f64>> {
        ys.iter()
            .map(|&y| xs.iter().map(|&x| f(x, y)).collect())
            .collect()
    };
    let exact = field(&|x, y| problem.exact_log_density(horizon, &[x, y]).exp());
    let peak = exact.iter().flatten().copied().fold(0.0, f64::max);
    let levels = [0.1, 0.3, 0.5, 0.7, 0.9].map(|l| l * peak);

    let mut panels = Vec::new();
    for (mode, r) in reps {
        let Some(cloud) = terminal_cloud(r, r.config.bandwidth) else {
            continue;
        };
        panels.push((*mode, field(&|x, y| cloud.density(&[x, y]).unwrap_or(0.0))));
    }
    if panels.is_empty() {
        return None;
    }
    let cell = 260.0;
    let mut svg = Svg::new(panels.len() as f64 * (cell + 80.0) + 20.0, cell + 90.0);
    for (k, (mode, est)) in panels.iter().enumerate() {
        let mut ax = Axes::new(
            &mut svg,
            (70.0 + k as f64 * (cell + 80.0), 30.0),
            (cell, cell),
            (xs[0], xs[xs.len() - 1]),
            (ys[0], ys[ys.len() - 1]),
            Scale::Linear,
            &format!("density at T ({mode})"),
            ("x0", "x1"),
        );
        for l in levels {
            ax.segments(&mut svg, &contour(&xs, &ys, &exact, l), "#000");
            ax.segments(
                &mut svg,
                &contour(&xs, &ys, est, l),
                PALETTE[k % PALETTE.len()],
            );
        }
        ax.add_legend("exact", "#000", false);
        ax.add_legend("KDE", PALETTE[k % PALETTE.len()], false);
        ax.draw_legend(&mut svg);
    }
    Some(svg.finish())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn circle_contour_lies_on_circle() {
        let xs = grid(-2.0, 2.0, 81);
        let f: Vec<Vec<f64>> = xs
            .iter()
            .map(|&y| xs.iter().map(|&x| x * x + y * y).collect())
            .collect();
        let segs = contour(&xs, &xs, &f, 1.0);
        assert!(segs.len() > 40);
        for (a, b) in segs {
            for p in [a, b] {
                let r = (p.0 * p.0 + p.1 * p.1).sqrt();
                assert!((r - 1.0).abs() < 2e-3, "{r}");
            }
        }
    }

    #[test]
    fn traj_round_trip() {
        let text = "i,j,t,x0,x1,y,z0,z1,h\n0,0,0,1,2,0,0,0,0\n0,1,0.5,3,4,0,0,0,0\n1,0,0,5,6,0,0,0,0\n1,1,0.5,7,8,0,0,0,0\n";
        let t = Traj::parse(text).unwrap();
        assert_eq!(t.dim, 2);
        assert_eq!(t.times, vec![0.0, 0.5]);
        assert_eq!(t.x[1], vec![3.0, 4.0, 7.0, 8.0]);
        assert!(Traj::parse("i,j,t\n").is_err());
    }
}
