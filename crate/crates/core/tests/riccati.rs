mod common;

use common::{mat, random_zero_drift, vec};
use lqgmpid::linalg::{Mat, Vector};
use lqgmpid::oracle;
use lqgmpid::protocol::{Protocol, ProtocolInterval, SpecialCase, TimeGrid};
use lqgmpid::riccati::{run_sweep, Branch, CoefficientState, Solver, SweepCache, SweepOptions, ThetaYMethod};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Coefficient right-hand sides in forward time, written out from the generator of
/// `dX = σX dt + √κ dW` with killing `½(x-ν)ᵀβ(x-ν)`.
#[derive(Clone)]
struct Coeffs {
    a: Mat,
    b: Mat,
    c: Mat,
    tx: Vector,
    ty: Vector,
}

fn rhs(s: &Coeffs, iv: &ProtocolInterval, branch: Branch) -> Coeffs {
    let (k, sg, beta) = (iv.kappa, &iv.sigma, &iv.beta);
    let g = beta * &iv.nu;
    match branch {
        Branch::Backward => Coeffs {
            a: &s.a * &s.a * k - sg.transpose() * &s.a - &s.a * sg - beta,
            b: &s.a * &s.b * k - sg.transpose() * &s.b,
            c: s.b.transpose() * &s.b * k,
            tx: &s.a * &s.tx * k - sg.transpose() * &s.tx - &g,
            ty: -(s.b.transpose() * &s.tx) * k,
        },
        Branch::Forward => Coeffs {
            a: beta - &s.a * &s.a * k - sg.transpose() * &s.a - &s.a * sg,
            b: -(&s.a * &s.b) * k - sg.transpose() * &s.b,
            c: -(s.b.transpose() * &s.b) * k,
            tx: -(&s.a * &s.tx) * k - sg.transpose() * &s.tx + &g,
            ty: s.b.transpose() * &s.tx * k,
        },
    }
}

fn axpy(s: &Coeffs, d: &Coeffs, h: f64) -> Coeffs {
    Coeffs {
        a: &s.a + &d.a * h,
        b: &s.b + &d.b * h,
        c: &s.c + &d.c * h,
        tx: &s.tx + &d.tx * h,
        ty: &s.ty + &d.ty * h,
    }
}

/// Fixed-step RK4 over `dt` (negative for the backward branch).
fn rk4(mut s: Coeffs, iv: &ProtocolInterval, branch: Branch, dt: f64, steps: usize) -> Coeffs {
    let h = dt / steps as f64;
    for _ in 0..steps {
        let k1 = rhs(&s, iv, branch);
        let k2 = rhs(&axpy(&s, &k1, 0.5 * h), iv, branch);
        let k3 = rhs(&axpy(&s, &k2, 0.5 * h), iv, branch);
        let k4 = rhs(&axpy(&s, &k3, h), iv, branch);
        s = Coeffs {
            a: &s.a + (&k1.a + &k2.a * 2.0 + &k3.a * 2.0 + &k4.a) * (h / 6.0),
            b: &s.b + (&k1.b + &k2.b * 2.0 + &k3.b * 2.0 + &k4.b) * (h / 6.0),
            c: &s.c + (&k1.c + &k2.c * 2.0 + &k3.c * 2.0 + &k4.c) * (h / 6.0),
            tx: &s.tx + (&k1.tx + &k2.tx * 2.0 + &k3.tx * 2.0 + &k4.tx) * (h / 6.0),
            ty: &s.ty + (&k1.ty + &k2.ty * 2.0 + &k3.ty * 2.0 + &k4.ty) * (h / 6.0),
        };
    }
    s
}

fn of(s: &CoefficientState) -> Coeffs {
    Coeffs {
        a: s.a.clone(),
        b: s.b.clone(),
        c: s.c.clone(),
        tx: s.theta_x.clone(),
        ty: s.theta_y.clone(),
    }
}

fn worst_gap(s: &CoefficientState, r: &Coeffs) -> f64 {
    let m = |x: &Mat, y: &Mat| (x - y).amax() / y.amax().max(1.0);
    let v = |x: &Vector, y: &Vector| (x - y).amax() / y.amax().max(1.0);
    m(&s.a, &r.a)
        .max(m(&s.b, &r.b))
        .max(m(&s.c, &r.c))
        .max(v(&s.theta_x, &r.tx))
        .max(v(&s.theta_y, &r.ty))
}

/// Interval-by-interval RK4 from each cached state to the next; the first interval starts
/// from the cached delta state and needs a finer step.
fn interval_gaps(cache: &SweepCache) -> f64 {
    let p = &cache.protocol;
    let k = p.len();
    let mut worst = 0.0f64;
    for i in 0..k {
        let iv = &p.intervals[i];
        let dt = cache.times[i + 1] - cache.times[i];
        let steps = if (cache.branch == Branch::Forward && i == 0) || (cache.branch == Branch::Backward && i == k - 1) {
            20000
        } else {
            2000
        };
        let (from, to, signed) = match cache.branch {
            Branch::Forward => (i, i + 1, dt),
            Branch::Backward => (i + 1, i, -dt),
        };
        let r = rk4(of(&cache.states[from]), iv, cache.branch, signed, steps);
        worst = worst.max(worst_gap(&cache.states[to], &r));
    }
    worst
}

fn random_general(rng: &mut ChaCha8Rng, d: usize, k: usize) -> Protocol {
    let mut p = random_zero_drift(rng, d, k);
    for iv in &mut p.intervals {
        iv.sigma = Mat::from_fn(d, d, |_, _| rng.random_range(-0.5..0.5));
    }
    p
}

#[test]
fn heat_kernel_is_exact() {
    let d = 3;
    let kappa = 0.7;
    let iv = ProtocolInterval::new(Mat::zeros(d, d), Vector::zeros(d), Mat::zeros(d, d), kappa);
    let p = Protocol::new(TimeGrid::uniform(4, 1.0), vec![iv; 4]);
    let opts = SweepOptions::with_epsilon(1e-3);
    let bw = run_sweep(&p, Branch::Backward, &opts).unwrap();
    let fw = run_sweep(&p, Branch::Forward, &opts).unwrap();
    for t in [0.001, 0.1, 0.25, 0.6, 0.93] {
        let s = bw.evaluate_at(t).unwrap();
        let want = Mat::identity(d, d) / (kappa * (1.0 - t));
        assert!((&s.a - &want).amax() < 1e-9 * want.amax(), "backward A at {t}");
        assert!((&s.b - &want).amax() < 1e-9 * want.amax());
        assert!(s.theta_x.amax() == 0.0 && s.theta_y.amax() == 0.0);
    }
    for t in [0.07, 0.25, 0.5, 0.999] {
        let s = fw.evaluate_at(t).unwrap();
        let want = Mat::identity(d, d) / (kappa * t);
        assert!((&s.a - &want).amax() < 1e-9 * want.amax(), "forward A at {t}");
        assert!((&s.c - &want).amax() < 1e-9 * want.amax());
    }
}

#[test]
fn isotropic_stationary_stiffness() {
    // far from the terminal delta the backward A relaxes to √(β/κ)
    let (b, kappa) = (9.0, 1.0);
    let iv = ProtocolInterval::new(mat(1, &[b]), vec(&[0.4]), mat(1, &[0.0]), kappa);
    let p = Protocol::new(TimeGrid::uniform(1, 12.0), vec![iv]);
    let bw = run_sweep(&p, Branch::Backward, &SweepOptions::default()).unwrap();
    let s = bw.evaluate_at(0.5).unwrap();
    let w = (b / kappa).sqrt();
    assert!((s.a[(0, 0)] - w).abs() < 1e-10);
    // stationary θx solves κAθ = βν
    assert!((s.theta_x[0] - b * 0.4 / (kappa * w)).abs() < 1e-9, "θx = {}", s.theta_x[0]);
}

#[test]
fn sweeps_match_independent_rk4_per_interval() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let opts = SweepOptions::default();
    let mut worst = 0.0f64;
    for (d, k) in [(1, 3), (2, 8), (3, 3), (4, 1)] {
        for p in [random_zero_drift(&mut rng, d, k), random_general(&mut rng, d, k)] {
            for branch in [Branch::Backward, Branch::Forward] {
                worst = worst.max(interval_gaps(&run_sweep(&p, branch, &opts).unwrap()));
            }
        }
    }
    assert!(worst < 1e-6, "worst relative gap {worst:.3e}");
}

#[test]
fn special_case_solvers_agree_with_the_general_exponential() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let d = 3;
    let mut scalar = random_zero_drift(&mut rng, d, 4);
    for iv in &mut scalar.intervals {
        iv.beta = Mat::from_diagonal(&Vector::from_fn(d, |_, _| rng.random_range(0.2..5.0)));
        iv.sigma = Mat::identity(d, d) * rng.random_range(-0.6..0.6);
    }
    let zero = random_zero_drift(&mut rng, d, 4);
    let mut iso = zero.clone();
    for iv in &mut iso.intervals {
        iv.beta = Mat::identity(d, d) * rng.random_range(0.5..4.0);
    }
    for p in [scalar, zero, iso] {
        let auto = SweepOptions::default();
        let general = SweepOptions {
            solver: Solver::General,
            ..Default::default()
        };
        for branch in [Branch::Backward, Branch::Forward] {
            let a = run_sweep(&p, branch, &auto).unwrap();
            let g = run_sweep(&p, branch, &general).unwrap();
            assert_ne!(a.cases, vec![SpecialCase::General; 4]);
            for (sa, sg) in a.states.iter().zip(&g.states) {
                assert!(worst_gap(sa, &of(sg)) < 1e-9);
            }
        }
    }
}

#[test]
fn quadrature_theta_y_matches_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let p = random_general(&mut rng, 2, 5);
    let quad = SweepOptions {
        theta_y: ThetaYMethod::Quadrature,
        ..Default::default()
    };
    for branch in [Branch::Backward, Branch::Forward] {
        let a = run_sweep(&p, branch, &SweepOptions::default()).unwrap();
        let q = run_sweep(&p, branch, &quad).unwrap();
        for (sa, sq) in a.states.iter().zip(&q.states) {
            assert!((&sa.theta_y - &sq.theta_y).amax() < 1e-9 * sa.theta_y.amax().max(1.0));
        }
    }
}

#[test]
fn coefficients_are_continuous_across_breakpoints() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let p = random_general(&mut rng, 2, 6);
    for branch in [Branch::Backward, Branch::Forward] {
        let c = run_sweep(&p, branch, &SweepOptions::default()).unwrap();
        for &t in &c.times[1..c.times.len() - 1] {
            let (l, r) = (c.evaluate_at(t - 1e-9).unwrap(), c.evaluate_at(t + 1e-9).unwrap());
            let at = c.evaluate_at(t).unwrap();
            assert!(worst_gap(&l, &of(&at)) < 1e-6 && worst_gap(&r, &of(&at)) < 1e-6);
        }
    }
}

#[test]
fn out_of_band_queries_and_bad_epsilon_fail() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let p = random_zero_drift(&mut rng, 2, 4);
    let c = run_sweep(&p, Branch::Forward, &SweepOptions::default()).unwrap();
    assert!(c.evaluate_at(0.0).is_err());
    assert!(c.evaluate_at(1.0).is_err());
    assert!(run_sweep(&p, Branch::Forward, &SweepOptions::with_epsilon(0.2)).is_err());
    assert!(run_sweep(&p, Branch::Forward, &SweepOptions::with_epsilon(0.0)).is_err());
}

#[test]
fn oracle_suite_passes() {
    for check in oracle::run_suite("riccati", 0).unwrap() {
        assert!(check.passed, "{check}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn quadratic_coefficients_stay_symmetric_positive(seed in 0u64..10_000, d in 1usize..4, k in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = if seed % 2 == 0 { random_zero_drift(&mut rng, d, k) } else { random_general(&mut rng, d, k) };
        for branch in [Branch::Backward, Branch::Forward] {
            let c = run_sweep(&p, branch, &SweepOptions::default()).unwrap();
            for s in &c.states {
                for m in [&s.a, &s.c] {
                    prop_assert!((m - m.transpose()).amax() <= 1e-9 * m.amax());
                    prop_assert!(m.clone().cholesky().is_some());
                }
            }
        }
    }

    #[test]
    fn linear_coefficients_are_linear_in_the_guide(seed in 0u64..10_000, scale in -2.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_general(&mut rng, 2, 3);
        let scaled = p.map_nu(|_, nu| nu * scale);
        let base = run_sweep(&p, Branch::Backward, &SweepOptions::default()).unwrap();
        let sc = run_sweep(&scaled, Branch::Backward, &SweepOptions::default()).unwrap();
        for (a, b) in base.states.iter().zip(&sc.states) {
            prop_assert!((&a.a - &b.a).amax() <= 1e-12 * a.a.amax());
            prop_assert!((&a.theta_x * scale - &b.theta_x).amax() <= 1e-9 * a.theta_x.amax().max(1.0));
        }
    }
}
