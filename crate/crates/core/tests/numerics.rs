use mfcscore::dynamics::{Mode, RolloutConfig};
use mfcscore::metrics::{gaussian_w2, rel_l2, GaussianSummary};
use mfcscore::net::{init_params, phi_jet, phi_jet_vjp, NetConfig, NetParams, QuadraticCost};
use mfcscore::problems::{EntropyProblem, LqProblem, MfcProblem, SystemicParams, SystemicProblem};
use mfcscore::tape::{ExprId, Recording, Shape};
use mfcscore::training::{loss_and_grad, loss_value};
use mfcscore::{KdeCloud, TerminalWrapper};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use std::sync::Arc;

const H: f64 = 1e-6;

fn central(f: impl Fn(f64) -> f64) -> f64 {
    (f(H) - f(-H)) / (2.0 * H)
}

fn close(a: f64, b: f64, rel: f64, abs: f64) -> bool {
    (a - b).abs() <= abs + rel * a.abs().max(b.abs())
}

fn vec_in(n: usize, lo: f64, hi: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(lo..hi, n)
}

/// Scalar built from every element-wise and reducing primitive.
fn composite(tape: &mut Recording<f64>, a: ExprId, b: ExprId) -> ExprId {
    let ab = tape.mul(a, b).unwrap();
    let e = tape.exp(ab).unwrap();
    let a2 = tape.square(a).unwrap();
    let one = tape.scalar(1.0);
    let a2p = tape.add(a2, one).unwrap();
    let l = tape.log(a2p).unwrap();
    let b2 = tape.square(b).unwrap();
    let b2p = tape.add(b2, one).unwrap();
    let r = tape.sqrt(b2p).unwrap();
    let m = tape.max0sq(a).unwrap();
    let q = tape.div(m, b2p).unwrap();
    let s1 = tape.sub(e, r).unwrap();
    let s2 = tape.add(s1, l).unwrap();
    let s3 = tape.add(s2, q).unwrap();
    let n = tape.neg(b).unwrap();
    let sc = tape.scale(n, 0.3).unwrap();
    let rd = tape.row_dot(s3, sc).unwrap();
    let mr = tape.mean_rows(a).unwrap();
    let d = tape.dot(mr, mr).unwrap();
    let s = tape.sum(rd).unwrap();
    tape.add(s, d).unwrap()
}

fn eval_composite(a: &[f64], b: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let mut tape = Recording::new();
    let ai = tape.leaf(a.to_vec(), Shape::new(3, 2)).unwrap();
    let bi = tape.leaf(b.to_vec(), Shape::new(3, 2)).unwrap();
    let out = composite(&mut tape, ai, bi);
    let g = tape.backward(out).unwrap();
    (
        tape.scalar_value(out).unwrap(),
        g.wrt(ai).unwrap().to_vec(),
        g.wrt(bi).unwrap().to_vec(),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn tape_gradient_matches_fd(a in vec_in(6, -1.5, 1.5), b in vec_in(6, -1.5, 1.5)) {
        let (_, ga, gb) = eval_composite(&a, &b);
        for k in 0..6 {
            let fa = central(|h| { let mut v = a.clone(); v[k] += h; eval_composite(&v, &b).0 });
            let fb = central(|h| { let mut v = b.clone(); v[k] += h; eval_composite(&a, &v).0 });
            prop_assert!(close(ga[k], fa, 1e-5, 1e-6), "a[{}]: {} vs {}", k, ga[k], fa);
            prop_assert!(close(gb[k], fb, 1e-5, 1e-6), "b[{}]: {} vs {}", k, gb[k], fb);
        }
    }

    #[test]
    fn tape_backward_is_linear_in_the_seed(a in vec_in(6, -1.0, 1.0), b in vec_in(6, -1.0, 1.0), c in -3.0..3.0f64) {
        let mut tape = Recording::new();
        let ai = tape.leaf(a.clone(), Shape::new(3, 2)).unwrap();
        let bi = tape.leaf(b.clone(), Shape::new(3, 2)).unwrap();
        let f = composite(&mut tape, ai, bi);
        let g = tape.scale(f, c).unwrap();
        let gf = tape.backward(f).unwrap();
        let gg = tape.backward(g).unwrap();
        for (x, y) in gf.wrt(ai).unwrap().iter().zip(gg.wrt(ai).unwrap()) {
            prop_assert!(close(c * x, *y, 1e-12, 1e-12));
        }
        // a second sweep over the same recording is bit-identical
        let again = tape.backward(f).unwrap();
        prop_assert_eq!(gf.wrt(bi).unwrap(), again.wrt(bi).unwrap());
    }
}

fn net(d: usize, depth: usize, seed: u64) -> NetParams<f64> {
    let mut cfg = NetConfig::new(d);
    cfg.depth = depth;
    cfg.width = 8;
    init_params(cfg, seed).unwrap()
}

fn hard(t_end: f64) -> TerminalWrapper<f64> {
    TerminalWrapper::hard(
        t_end,
        Arc::new(QuadraticCost {
            curvature: 0.7,
            offset: 0.1,
        }),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn net_jet_matches_fd(
        seed in 0u64..1000,
        depth in 1usize..4,
        x in vec_in(2, -2.0, 2.0),
        t in 0.05..0.45f64,
        use_hard in any::<bool>(),
    ) {
        let p = net(2, depth, seed);
        let w = if use_hard { hard(0.5) } else { TerminalWrapper::Soft };
        let jet = phi_jet(&p, &w, t, &x).unwrap();
        let f = |y: &[f64]| phi_jet(&p, &w, t, y).unwrap().value;
        let mut lap = 0.0;
        for k in 0..2 {
            let g = central(|h| { let mut y = x.clone(); y[k] += h; f(&y) });
            prop_assert!(close(jet.grad[k], g, 1e-5, 1e-6), "grad {}: {} vs {}", k, jet.grad[k], g);
            let hh = 1e-4;
            let mut yp = x.clone();
            yp[k] += hh;
            let mut ym = x.clone();
            ym[k] -= hh;
            lap += (f(&yp) - 2.0 * f(&x) + f(&ym)) / (hh * hh);
        }
        // squared-ReLU second derivatives jump at kinks; loose tolerance
        prop_assert!(close(jet.laplacian, lap, 1e-3, 1e-3), "lap {} vs {}", jet.laplacian, lap);
    }

    #[test]
    fn net_vjp_matches_fd(
        seed in 0u64..1000,
        x in vec_in(2, -2.0, 2.0),
        t in 0.05..0.45f64,
        bars in vec_in(4, -1.0, 1.0),
    ) {
        let p = net(2, 2, seed);
        let w = hard(0.5);
        let contract = |q: &NetParams<f64>, y: &[f64]| {
            let j = phi_jet(q, &w, t, y).unwrap();
            bars[0] * j.value + bars[1] * j.grad[0] + bars[2] * j.grad[1] + bars[3] * j.laplacian
        };
        let (pb, xb) = phi_jet_vjp(&p, &w, t, &x, bars[0], &bars[1..3], bars[3]).unwrap();
        for k in (0..p.as_slice().len()).step_by(7) {
            let g = central(|h| { let mut q = p.clone(); q.as_mut_slice()[k] += h; contract(&q, &x) });
            prop_assert!(close(pb[k], g, 1e-4, 1e-6), "param {}: {} vs {}", k, pb[k], g);
        }
        for k in 0..2 {
            let g = central(|h| { let mut y = x.clone(); y[k] += h; contract(&p, &y) });
            prop_assert!(close(xb[k], g, 1e-4, 1e-5), "x {}: {} vs {}", k, xb[k], g);
        }
    }
}

#[test]
fn f32_network_tracks_f64() {
    let p = net(2, 2, 5);
    let p32 = NetParams::<f32>::from_flat(
        *p.config(),
        p.as_slice().iter().map(|v| *v as f32).collect(),
    )
    .unwrap();
    let j = phi_jet(&p, &TerminalWrapper::Soft, 0.2, &[0.3, -0.7]).unwrap();
    let j32 = phi_jet(&p32, &TerminalWrapper::Soft, 0.2f32, &[0.3f32, -0.7]).unwrap();
    assert!((j.value - j32.value as f64).abs() < 1e-5);
    assert!((j.laplacian - j32.laplacian as f64).abs() < 1e-4);
}

fn cloud_of(xs: Vec<f64>, d: usize, h: f64) -> KdeCloud<f64> {
    KdeCloud::new(xs, d, h).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn kde_score_is_grad_log_density(
        s in vec_in(20, -2.0, 2.0),
        x in vec_in(2, -3.0, 3.0),
        h in 0.2..1.0f64,
    ) {
        let c = cloud_of(s, 2, h);
        let score = c.score(&x).unwrap();
        for k in 0..2 {
            let g = central(|e| { let mut y = x.clone(); y[k] += e; c.log_density(&y).unwrap() });
            prop_assert!(close(score[k], g, 1e-5, 1e-6));
        }
    }

    #[test]
    fn kde_vjp_matches_fd(
        s in vec_in(12, -2.0, 2.0),
        x in vec_in(2, -2.0, 2.0),
        bars in vec_in(3, -1.0, 1.0),
        h in 0.3..1.0f64,
    ) {
        let f = |samples: &[f64], y: &[f64]| {
            let c = cloud_of(samples.to_vec(), 2, h);
            let (l, g) = c.log_density_and_score(y).unwrap();
            bars[0] * l + bars[1] * g[0] + bars[2] * g[1]
        };
        let (xb, sb) = cloud_of(s.clone(), 2, h).vjp(&x, bars[0], &bars[1..]).unwrap();
        for k in 0..2 {
            let g = central(|e| { let mut y = x.clone(); y[k] += e; f(&s, &y) });
            prop_assert!(close(xb[k], g, 1e-5, 1e-6));
        }
        for k in 0..s.len() {
            let g = central(|e| { let mut v = s.clone(); v[k] += e; f(&v, &x) });
            prop_assert!(close(sb[k], g, 1e-5, 1e-6));
        }
    }

    #[test]
    fn kde_at_samples_adjoint_matches_fd(s in vec_in(10, -2.0, 2.0), bar in vec_in(15, -1.0, 1.0)) {
        let f = |v: &[f64]| -> f64 {
            cloud_of(v.to_vec(), 2, 0.5).evaluate_at_samples().iter().zip(&bar).map(|(a, b)| a * b).sum()
        };
        let g = cloud_of(s.clone(), 2, 0.5).vjp_at_samples(&bar);
        for k in 0..s.len() {
            let fd = central(|e| { let mut v = s.clone(); v[k] += e; f(&v) });
            prop_assert!(close(g[k], fd, 1e-5, 1e-6));
        }
    }

    #[test]
    fn kde_is_translation_equivariant(s in vec_in(16, -2.0, 2.0), x in vec_in(2, -2.0, 2.0), c in vec_in(2, -5.0, 5.0)) {
        let a = cloud_of(s.clone(), 2, 0.4);
        let shifted: Vec<f64> = s.chunks(2).flat_map(|r| [r[0] + c[0], r[1] + c[1]]).collect();
        let b = cloud_of(shifted, 2, 0.4);
        let y = [x[0] + c[0], x[1] + c[1]];
        let (la, ga) = a.log_density_and_score(&x).unwrap();
        let (lb, gb) = b.log_density_and_score(&y).unwrap();
        prop_assert!(close(la, lb, 1e-10, 1e-10));
        for k in 0..2 {
            prop_assert!(close(ga[k], gb[k], 1e-9, 1e-9));
        }
    }
}

#[test]
fn kde_integrates_to_one() {
    let s = GaussianSummary::isotropic(&[0.3], 0.5)
        .unwrap()
        .sample(300, 4);
    let c = cloud_of(s, 1, 0.2);
    let n = 4000;
    let (a, b) = (-8.0, 8.0);
    let dx = (b - a) / n as f64;
    let mass: f64 = (0..=n)
        .map(|k| {
            let w = if k == 0 || k == n { 0.5 } else { 1.0 };
            w * c.density(&[a + k as f64 * dx]).unwrap()
        })
        .sum::<f64>()
        * dx;
    assert!((mass - 1.0).abs() < 1e-8, "{mass}");
}

#[test]
fn kde_score_of_large_gaussian_cloud() {
    // the smoothed density is N(0, 1 + h^2); sampling noise in the score
    // grows like 1/h^2, hence the moderate bandwidth
    let h = 0.5;
    let s = GaussianSummary::isotropic(&[0.0], 1.0)
        .unwrap()
        .sample(10_000, 7);
    let c = cloud_of(s, 1, h);
    for x in [-1.0, -0.5, 0.0, 0.5, 1.0] {
        let got = c.score(&[x]).unwrap()[0];
        let want = -x / (1.0 + h * h);
        assert!((got - want).abs() < 0.15, "x={x}: {got} vs {want}");
    }
}

fn spd(a: &[f64], shift: f64) -> DMatrix<f64> {
    let m = DMatrix::from_row_slice(2, 2, a);
    &m * m.transpose() + DMatrix::identity(2, 2) * shift
}

fn gaussian(m: &[f64], a: &[f64]) -> GaussianSummary {
    GaussianSummary::new(DVector::from_row_slice(m), spd(a, 0.1)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn w2_is_a_metric(
        m in vec_in(6, -2.0, 2.0),
        a in vec_in(12, -1.0, 1.0),
    ) {
        let g: Vec<GaussianSummary> = (0..3).map(|k| gaussian(&m[2 * k..2 * k + 2], &a[4 * k..4 * k + 4])).collect();
        let d01 = gaussian_w2(&g[0], &g[1]).unwrap();
        let d10 = gaussian_w2(&g[1], &g[0]).unwrap();
        let d12 = gaussian_w2(&g[1], &g[2]).unwrap();
        let d02 = gaussian_w2(&g[0], &g[2]).unwrap();
        prop_assert!(close(d01, d10, 1e-9, 1e-9));
        prop_assert!(d02 <= d01 + d12 + 1e-9);
        prop_assert!(gaussian_w2(&g[0], &g[0]).unwrap() < 1e-6);
    }

    #[test]
    fn w2_is_rotation_invariant(m in vec_in(4, -2.0, 2.0), a in vec_in(8, -1.0, 1.0), theta in 0.0..6.3f64) {
        let g1 = gaussian(&m[..2], &a[..4]);
        let g2 = gaussian(&m[2..], &a[4..]);
        let r = DMatrix::from_row_slice(2, 2, &[theta.cos(), -theta.sin(), theta.sin(), theta.cos()]);
        let rot = |g: &GaussianSummary| {
            GaussianSummary::new(&r * g.mean(), &r * g.cov() * r.transpose()).unwrap()
        };
        let a = gaussian_w2(&g1, &g2).unwrap();
        let b = gaussian_w2(&rot(&g1), &rot(&g2)).unwrap();
        prop_assert!(close(a, b, 1e-7, 1e-7));
    }

    #[test]
    fn w2_commuting_covariances_closed_form(m in vec_in(4, -2.0, 2.0), v in vec_in(4, 0.1, 3.0)) {
        let g1 = GaussianSummary::new(DVector::from_row_slice(&m[..2]), DMatrix::from_diagonal(&DVector::from_row_slice(&v[..2]))).unwrap();
        let g2 = GaussianSummary::new(DVector::from_row_slice(&m[2..]), DMatrix::from_diagonal(&DVector::from_row_slice(&v[2..]))).unwrap();
        let want = ((m[0] - m[2]).powi(2) + (m[1] - m[3]).powi(2)
            + (v[0].sqrt() - v[2].sqrt()).powi(2) + (v[1].sqrt() - v[3].sqrt()).powi(2)).sqrt();
        prop_assert!(close(gaussian_w2(&g1, &g2).unwrap(), want, 1e-8, 1e-8));
    }

    #[test]
    fn rel_l2_scales_and_vanishes(e in vec_in(8, 0.5, 2.0), noise in vec_in(8, -0.1, 0.1), c in 0.1..10.0f64) {
        let a: Vec<f64> = e.iter().zip(&noise).map(|(x, n)| x + n).collect();
        let r = rel_l2(&a, &e).unwrap();
        let sa: Vec<f64> = a.iter().map(|x| c * x).collect();
        let se: Vec<f64> = e.iter().map(|x| c * x).collect();
        prop_assert!(close(rel_l2(&sa, &se).unwrap(), r, 1e-12, 1e-15));
        prop_assert_eq!(rel_l2(&e, &e).unwrap(), 0.0);
    }
}

fn check_objective_gradient(p: &dyn MfcProblem<f64>, mode: Mode, net_seed: u64) {
    let d = p.dim();
    let params = init_params::<f64>(NetConfig::new(d), net_seed).unwrap();
    let x0 = p.sample_initial(17, 12);
    let cfg = RolloutConfig {
        steps: 4,
        bandwidth: 0.4,
        mode,
        score_detach: false,
        seed: 3,
    };
    let (value, grad) = loss_and_grad(p, &params, &x0, &cfg).unwrap();
    assert!((value - loss_value(p, &params, &x0, &cfg).unwrap()).abs() < 1e-12);
    let n = grad.len();
    for k in [0, 1, n / 3, n / 2, 2 * n / 3, n - 2, n - 1] {
        let fd = central(|h| {
            let mut q = params.clone();
            q.as_mut_slice()[k] += h;
            loss_value(p, &q, &x0, &cfg).unwrap()
        });
        assert!(
            close(grad[k], fd, 1e-4, 1e-7),
            "{} {:?} param {k}: {} vs {fd}",
            p.name(),
            mode,
            grad[k]
        );
    }
}

#[test]
fn objective_gradient_matches_fd() {
    let sys = SystemicProblem::new(SystemicParams::default()).unwrap();
    let problems: Vec<Box<dyn MfcProblem<f64>>> = vec![
        Box::new(EntropyProblem::new(1, 0.5, 0.1).unwrap()),
        Box::new(EntropyProblem::new(2, 0.5, 0.1).unwrap()),
        Box::new(LqProblem::new(2, 0.5, 5.0, 0.1).unwrap()),
        Box::new(sys),
    ];
    for p in &problems {
        for mode in [Mode::Score, Mode::Fbsde] {
            check_objective_gradient(p.as_ref(), mode, 2);
        }
    }
}
