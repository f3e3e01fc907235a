use mfcscore::dynamics::{rollout, Mode, PhiSource, RolloutConfig, ScoreSource, TrajectoryBatch};
use mfcscore::metrics::{empirical_moments, variance_curve};
use mfcscore::net::{init_params, NetConfig};
use mfcscore::problems::{EntropyProblem, LqProblem, MfcProblem, SystemicParams, SystemicProblem};

fn cfg(steps: usize, mode: Mode) -> RolloutConfig<f64> {
    RolloutConfig {
        steps,
        bandwidth: 0.35,
        mode,
        score_detach: false,
        seed: 11,
    }
}

fn exact_run(p: &dyn MfcProblem<f64>, x0: &[f64], steps: usize) -> TrajectoryBatch<f64> {
    rollout(
        p,
        PhiSource::Exact,
        ScoreSource::Exact,
        x0,
        &cfg(steps, Mode::Score),
    )
    .unwrap()
    .batch
}

/// Draws plus their mirror images, so the empirical mean is exactly the
/// centre of symmetry.
fn antithetic(p: &dyn MfcProblem<f64>, seed: u64, n: usize) -> Vec<f64> {
    let mut x = p.sample_initial(seed, n);
    let m = p.exact_mean();
    let mirror: Vec<f64> = x
        .chunks_exact(p.dim())
        .flat_map(|r| {
            r.iter()
                .zip(&m)
                .map(|(v, c)| 2.0 * c - v)
                .collect::<Vec<_>>()
        })
        .collect();
    x.extend(mirror);
    x
}

fn consistency_error(b: &TrajectoryBatch<f64>) -> f64 {
    b.y.iter()
        .zip(&b.phi)
        .flat_map(|(y, phi)| y.iter().zip(phi).map(|(a, c)| (a - c).abs()))
        .fold(0.0, f64::max)
}

/// Least-squares slope of `log err` against `log dt`.
fn refinement_slope(p: &dyn MfcProblem<f64>, x0: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> = [10usize, 20, 40, 80]
        .iter()
        .map(|&n| {
            let b = exact_run(p, x0, n);
            (b.dt().ln(), consistency_error(&b).ln())
        })
        .collect();
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    sxy / sxx
}

#[test]
fn entropy_exact_flow_is_stationary() {
    for d in [1, 2] {
        let p = EntropyProblem::new(d, 0.5, 0.1).unwrap();
        let x0 = p.sample_initial(3, 200);
        let b = exact_run(&p, &x0, 10);
        let mut worst = 0.0f64;
        for w in b.x.windows(2) {
            for (a, c) in w[0].iter().zip(&w[1]) {
                worst = worst.max((a - c).abs());
            }
        }
        assert!(worst <= 1e-12, "d={d}: {worst}");
        // y climbs by C dt per step
        let step = p.rate() * b.dt();
        for j in 1..b.y.len() {
            for i in 0..b.n {
                assert!((b.y[j][i] - b.y[j - 1][i] - step).abs() < 1e-12);
            }
        }
        assert!(consistency_error(&b) < 1e-12);
    }
}

#[test]
fn lq_consistency_is_first_order() {
    let p = LqProblem::new(1, 0.5, 5.0, 0.1).unwrap();
    let x0 = p.sample_initial(5, 500);
    let s = refinement_slope(&p, &x0);
    assert!((s - 1.0).abs() <= 0.2, "slope {s}");
}

#[test]
fn systemic_consistency_is_first_order() {
    let p = SystemicProblem::<f64>::new(SystemicParams::default()).unwrap();
    let x0 = antithetic(&p, 5, 250);
    let s = refinement_slope(&p, &x0);
    assert!((s - 1.0).abs() <= 0.2, "slope {s}");
}

#[test]
fn systemic_exact_flow_keeps_mean() {
    let p = SystemicProblem::<f64>::new(SystemicParams::default()).unwrap();
    let x0 = p.sample_initial(9, 4000);
    let b = exact_run(&p, &x0, 10);
    let m0 = empirical_moments(&b.x[0], 1).unwrap().mean()[0];
    for x in &b.x {
        let g = empirical_moments(x, 1).unwrap();
        let bound = 3.0 * (g.cov()[(0, 0)] / b.n as f64).sqrt();
        assert!((g.mean()[0] - m0).abs() <= bound);
    }
}

#[test]
fn lq_exact_flow_tracks_shrinking_variance() {
    let p = LqProblem::new(1, 0.5, 5.0, 0.1).unwrap();
    let x0 = p.sample_initial(2, 2000);
    let b = exact_run(&p, &x0, 10);
    let v = variance_curve(&b.x, 1).unwrap();
    for (t, vj) in b.times.iter().zip(&v) {
        let exact = p.variance(*t);
        assert!(
            (vj[0] - exact).abs() <= 0.1 * exact,
            "t={t}: {} vs {exact}",
            vj[0]
        );
    }
    assert!(v.windows(2).all(|w| w[1][0] < w[0][0]));
}

#[test]
fn fbsde_brownian_variance_law() {
    // zero drift: H = |p|^2/2 and a zero network
    let p = LqProblem::new(1, 0.5, 5.0, 0.0).unwrap();
    let mut params = init_params::<f64>(NetConfig::new(1), 1).unwrap();
    params.as_mut_slice().iter_mut().for_each(|v| *v = 0.0);
    let wrapper = mfcscore::TerminalWrapper::Soft;
    let n = 10_000;
    let x0 = vec![0.0; n];
    let b = rollout(
        &p,
        PhiSource::Network {
            params: &params,
            wrapper: &wrapper,
        },
        ScoreSource::Kde,
        &x0,
        &cfg(10, Mode::Fbsde),
    )
    .unwrap()
    .batch;
    let var = empirical_moments(b.terminal_x(), 1).unwrap().cov()[(0, 0)];
    let expect = 2.0 * 0.5 / 5.0;
    assert!((var - expect).abs() <= 0.05 * expect, "{var}");
}

#[test]
fn score_and_fbsde_means_agree() {
    let p = EntropyProblem::new(1, 0.5, 0.1).unwrap();
    let params = init_params::<f64>(NetConfig::new(1), 4).unwrap();
    let wrapper = p.terminal();
    let run = |mode, n: usize, seed| {
        let x0 = p.sample_initial(seed, n);
        rollout(
            &p,
            PhiSource::Network {
                params: &params,
                wrapper: &wrapper,
            },
            ScoreSource::Kde,
            &x0,
            &cfg(10, mode),
        )
        .unwrap()
        .batch
    };
    let s = run(Mode::Score, 3000, 21);
    let f = run(Mode::Fbsde, 10_000, 22);
    let gs = empirical_moments(s.terminal_x(), 1).unwrap();
    let gf = empirical_moments(f.terminal_x(), 1).unwrap();
    let se = (gs.cov()[(0, 0)] / s.n as f64 + gf.cov()[(0, 0)] / f.n as f64).sqrt();
    let gap = (gs.mean()[0] - gf.mean()[0]).abs();
    assert!(gap <= 3.0 * se, "gap {gap} vs {}", 3.0 * se);
}

#[test]
fn y0_is_phi_at_start_and_runs_repeat() {
    let p = LqProblem::new(2, 0.5, 5.0, 0.1).unwrap();
    let params = init_params::<f64>(NetConfig::new(2), 8).unwrap();
    let wrapper = p.terminal();
    let x0 = p.sample_initial(1, 50);
    let go = |mode| {
        rollout(
            &p,
            PhiSource::Network {
                params: &params,
                wrapper: &wrapper,
            },
            ScoreSource::Kde,
            &x0,
            &cfg(5, mode),
        )
        .unwrap()
        .batch
    };
    for mode in [Mode::Score, Mode::Fbsde] {
        let a = go(mode);
        assert_eq!(a.y[0], a.phi[0]);
        for i in 0..a.n {
            let v = mfcscore::net::phi_eval(&params, &wrapper, 0.0, &x0[2 * i..2 * i + 2]).unwrap();
            assert_eq!(a.phi[0][i], v);
        }
        let b = go(mode);
        assert_eq!(a, b);
    }
}
