//! Independent reference computations behind `lqgmpid validate`.
//!
//! Every check compares a production path against a slower, structurally different
//! computation: RK4 integration of the coefficient ODEs, a plain Taylor series for the
//! matrix exponential, central differences of `log ψ`, and from-scratch resweeps of
//! translated problems.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::bridge::{BridgeContext, GaussianMixture};
use crate::linalg::{expm, Mat, Vector};
use crate::objective::{CorridorProblem, CorridorSource, LossConfig};
use crate::protocol::{
    ProtocolInterval, CorridorGeometry, CorridorParams, Protocol, SpecialCase, TimeGrid,
};
use crate::riccati::{band_times, run_sweep, Branch, CoefficientState, Solver, SweepOptions};
use crate::shift::{build_propagators, ShiftedSlice, SourceFrame};
use crate::Result;

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub suite: &'static str,
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl Check {
    fn new(suite: &'static str, name: impl Into<String>, value: f64, tolerance: f64) -> Self {
        Check {
            suite,
            name: name.into(),
            value,
            tolerance,
            passed: value.is_finite() && value <= tolerance,
        }
    }
}

impl std::fmt::Display for Check {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let tag = if self.passed { "ok  " } else { "FAIL" };
        write!(f, "{tag} {}/{}: {:.3e} (tol {:.1e})", self.suite, self.name, self.value, self.tolerance)
    }
}

/// Taylor series of `exp(M)` with 200 terms after scaling by a power of two.
pub fn series_expm(m: &Mat) -> Mat {
    let norm = m.abs().row_sum().max();
    let mut s = 0u32;
    while norm / 2f64.powi(s as i32) > 0.5 {
        s += 1;
    }
    let a = m / 2f64.powi(s as i32);
    let n = m.nrows();
    let mut term = Mat::identity(n, n);
    let mut sum = term.clone();
    for k in 1..200 {
        term = &term * &a / k as f64;
        sum += &term;
    }
    for _ in 0..s {
        sum = &sum * &sum;
    }
    sum
}

/// Right-hand side of the coefficient ODEs in forward time `t`, packed as
/// `[A, B, C, θx, θy, ζ]` (column-major blocks).
fn coefficient_rhs(branch: Branch, iv: &ProtocolInterval, y: &[f64]) -> Vec<f64> {
    let d = iv.dim();
    let dd = d * d;
    let a = Mat::from_column_slice(d, d, &y[..dd]);
    let b = Mat::from_column_slice(d, d, &y[dd..2 * dd]);
    let tx = Vector::from_column_slice(&y[3 * dd..3 * dd + d]);
    let (k, s, beta) = (iv.kappa, &iv.sigma, &iv.beta);
    let g = iv.drive();
    let guide = 0.5 * iv.nu.dot(&g);
    let st = s.transpose();
    let (da, db, dc, dtx, dty, dz) = match branch {
        Branch::Backward => (
            &a * &a * k - (&st * &a + &a * s) - beta,
            &a * &b * k - &st * &b,
            b.transpose() * &b * k,
            (&a * k - &st) * &tx - &g,
            -(b.transpose() * &tx) * k,
            0.5 * k * a.trace() + guide - 0.5 * k * tx.norm_squared(),
        ),
        Branch::Forward => (
            beta - (&st * &a + &a * s) - &a * &a * k,
            -(&a * k + &st) * &b,
            -(b.transpose() * &b) * k,
            -(&st + &a * k) * &tx + &g,
            (b.transpose() * &tx) * k,
            -s.trace() - 0.5 * k * a.trace() + 0.5 * k * tx.norm_squared() - guide,
        ),
    };
    let mut out = Vec::with_capacity(y.len());
    out.extend_from_slice(da.as_slice());
    out.extend_from_slice(db.as_slice());
    out.extend_from_slice(dc.as_slice());
    out.extend_from_slice(dtx.as_slice());
    out.extend_from_slice(dty.as_slice());
    out.push(dz);
    out
}

fn rk4_step(branch: Branch, iv: &ProtocolInterval, y: &[f64], h: f64) -> Vec<f64> {
    let axpy = |y: &[f64], k: &[f64], c: f64| -> Vec<f64> { y.iter().zip(k).map(|(a, b)| a + c * b).collect() };
    let k1 = coefficient_rhs(branch, iv, y);
    let k2 = coefficient_rhs(branch, iv, &axpy(y, &k1, 0.5 * h));
    let k3 = coefficient_rhs(branch, iv, &axpy(y, &k2, 0.5 * h));
    let k4 = coefficient_rhs(branch, iv, &axpy(y, &k3, h));
    (0..y.len())
        .map(|i| y[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect()
}

/// Step-doubling adaptive RK4 from `t0` to `t1` (either direction).
fn rk4_adaptive(branch: Branch, iv: &ProtocolInterval, y0: Vec<f64>, t0: f64, t1: f64, tol: f64) -> Vec<f64> {
    let dir = (t1 - t0).signum();
    let mut t = t0;
    let mut y = y0;
    let mut h: f64 = 1e-6;
    while (t1 - t) * dir > 1e-15 {
        h = h.min((t1 - t).abs());
        let full = rk4_step(branch, iv, &y, dir * h);
        let half = rk4_step(branch, iv, &y, 0.5 * dir * h);
        let two = rk4_step(branch, iv, &half, 0.5 * dir * h);
        let err = full
            .iter()
            .zip(&two)
            .map(|(a, b)| (a - b).abs() / (1.0 + b.abs()))
            .fold(0.0, f64::max);
        if err <= tol {
            t += dir * h;
            y = two.iter().zip(&full).map(|(a, b)| a + (a - b) / 15.0).collect();
            h *= (0.9 * (tol / err.max(1e-300)).powf(0.2)).min(4.0);
        } else {
            h *= (0.9 * (tol / err).powf(0.2)).max(0.1);
        }
    }
    y
}

fn pack(s: &CoefficientState) -> Vec<f64> {
    let mut v = Vec::new();
    v.extend_from_slice(s.a.as_slice());
    v.extend_from_slice(s.b.as_slice());
    v.extend_from_slice(s.c.as_slice());
    v.extend_from_slice(s.theta_x.as_slice());
    v.extend_from_slice(s.theta_y.as_slice());
    v.push(s.zeta);
    v
}

/// RK4 sweep of one branch; returns the packed states at the band breakpoints.
pub fn rk4_sweep(protocol: &Protocol, branch: Branch, epsilon: f64, tol: f64) -> Vec<Vec<f64>> {
    let times = band_times(protocol, epsilon);
    let k = protocol.len();
    let d = protocol.dim;
    let mut out = vec![Vec::new(); k + 1];
    match branch {
        Branch::Forward => {
            let mut y = pack(&CoefficientState::delta(branch, times[0], d, protocol.intervals[0].kappa, epsilon));
            out[0] = y.clone();
            for i in 0..k {
                y = rk4_adaptive(branch, &protocol.intervals[i], y, times[i], times[i + 1], tol);
                out[i + 1] = y.clone();
            }
        }
        Branch::Backward => {
            let mut y = pack(&CoefficientState::delta(branch, times[k], d, protocol.intervals[k - 1].kappa, epsilon));
            out[k] = y.clone();
            for i in (0..k).rev() {
                y = rk4_adaptive(branch, &protocol.intervals[i], y, times[i + 1], times[i], tol);
                out[i] = y.clone();
            }
        }
    }
    out
}

/// Largest relative mismatch between two packed states, group by group
/// (`‖Δ‖∞ / max(‖ref‖∞, 1)` for each of A, B, C, θx, θy, ζ).
pub fn packed_rel_err(got: &[f64], want: &[f64], d: usize) -> f64 {
    let dd = d * d;
    let groups = [0..dd, dd..2 * dd, 2 * dd..3 * dd, 3 * dd..3 * dd + d, 3 * dd + d..3 * dd + 2 * d, 3 * dd + 2 * d..3 * dd + 2 * d + 1];
    groups
        .iter()
        .map(|r| {
            let diff = r.clone().map(|i| (got[i] - want[i]).abs()).fold(0.0, f64::max);
            let scale = r.clone().map(|i| want[i].abs()).fold(1.0, f64::max);
            diff / scale
        })
        .fold(0.0, f64::max)
}

fn random_spd(rng: &mut impl Rng, d: usize, lo: f64, hi: f64) -> Mat {
    let m = Mat::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
    let q = m.qr().q();
    let ev = Vector::from_fn(d, |_, _| rng.random_range(lo..hi));
    crate::linalg::symmetrize(&(&q * Mat::from_diagonal(&ev) * q.transpose()))
}

/// A random protocol mixing the four interval classes.
pub fn random_protocol(rng: &mut impl Rng, d: usize, k: usize) -> Protocol {
    let mut cuts: Vec<f64> = (0..k - 1).map(|_| rng.random_range(0.1..0.9)).collect();
    cuts.sort_by(f64::total_cmp);
    let mut bp = vec![0.0];
    for c in cuts {
        let last = *bp.last().unwrap();
        bp.push(c.max(last + 0.03));
    }
    bp.push(1.0f64.max(bp.last().unwrap() + 0.03));
    let horizon = *bp.last().unwrap();
    let bp: Vec<f64> = bp.iter().map(|t| t / horizon).collect();
    let intervals = (0..k)
        .map(|_| {
            let kappa = rng.random_range(0.5..1.5);
            let nu = Vector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
            let class = rng.random_range(0..4);
            let (beta, sigma) = match class {
                0 => (Mat::identity(d, d) * rng.random_range(0.5..5.0), Mat::zeros(d, d)),
                1 => (random_spd(rng, d, 0.2, 6.0), Mat::zeros(d, d)),
                2 => {
                    let diag = Vector::from_fn(d, |_, _| rng.random_range(0.2..6.0));
                    (Mat::from_diagonal(&diag), Mat::identity(d, d) * rng.random_range(-0.5..0.5))
                }
                _ => (
                    random_spd(rng, d, 0.2, 6.0),
                    Mat::from_fn(d, d, |_, _| rng.random_range(-0.4..0.4)),
                ),
            };
            ProtocolInterval::new(beta, nu, sigma, kappa)
        })
        .collect();
    Protocol::new(TimeGrid::new(bp), intervals)
}

pub fn random_mixture(rng: &mut impl Rng, d: usize, k: usize) -> GaussianMixture {
    let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.5..1.5)).collect();
    let total: f64 = raw.iter().sum();
    let means = (0..k)
        .map(|_| Vector::from_fn(d, |_, _| rng.random_range(-1.5..1.5)))
        .collect();
    let covs = (0..k).map(|_| random_spd(rng, d, 0.05, 0.3)).collect();
    GaussianMixture::new(raw.iter().map(|w| w / total).collect(), means, covs).expect("valid random mixture")
}

fn riccati_suite(seed: u64, out: &mut Vec<Check>) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = Mat::from_fn(6, 6, |_, _| rng.random_range(-1.0..1.0));
    m *= 10.0 / crate::linalg::norm1(&m);
    let e = expm(&m)?;
    let r = series_expm(&m);
    out.push(Check::new("riccati", "expm vs series, ‖M‖₁ = 10", crate::linalg::rel_err(&e, &r), 1e-11));

    let eps = 1e-3;
    let mut worst = 0.0f64;
    for i in 0..20 {
        let d = [1, 2, 3, 4][i % 4];
        let k = [1, 3, 8][i % 3];
        let p = random_protocol(&mut rng, d, k);
        for branch in [Branch::Backward, Branch::Forward] {
            let cache = run_sweep(&p, branch, &SweepOptions::with_epsilon(eps))?;
            let reference = rk4_sweep(&p, branch, eps, 1e-13);
            for (s, r) in cache.states.iter().zip(&reference) {
                worst = worst.max(packed_rel_err(&pack(s), r, d));
            }
        }
    }
    out.push(Check::new("riccati", "sweeps vs adaptive RK4, 20 random protocols", worst, 1e-6));

    // Special-case chain.
    let d = 3;
    let kappa = 0.8;
    let diag = Mat::from_diagonal(&Vector::from_vec(vec![1.5, 3.0, 5.0]));
    let nu = Vector::from_vec(vec![0.4, -0.7, 1.1]);
    let chain = |beta: Mat, c: f64, forced: SpecialCase, general_quad: bool| -> Result<Vec<Vec<f64>>> {
        let iv = ProtocolInterval::new(beta, nu.clone(), Mat::identity(d, d) * c, kappa);
        let p = Protocol::new(TimeGrid::uniform(3, 1.0), vec![iv; 3]);
        let mut opts = SweepOptions::with_epsilon(eps);
        opts.solver = if general_quad { Solver::General } else { Solver::Force(forced) };
        if general_quad {
            opts.theta_y = crate::riccati::ThetaYMethod::Quadrature;
        }
        let mut v = Vec::new();
        for branch in [Branch::Backward, Branch::Forward] {
            v.extend(run_sweep(&p, branch, &opts)?.states.iter().map(pack));
        }
        Ok(v)
    };
    let cmp = |a: &[Vec<f64>], b: &[Vec<f64>]| a.iter().zip(b).map(|(x, y)| packed_rel_err(x, y, d)).fold(0.0, f64::max);
    let c = 0.3;
    let general = chain(diag.clone(), c, SpecialCase::General, true)?;
    let scalar = chain(diag.clone(), c, SpecialCase::ScalarDrift { c }, false)?;
    out.push(Check::new("riccati", "general σ = cI vs scalar drift", cmp(&general, &scalar), 1e-9));
    let scalar0 = chain(diag.clone(), 0.0, SpecialCase::ScalarDrift { c: 0.0 }, false)?;
    let zero = chain(diag, 0.0, SpecialCase::ZeroDrift, false)?;
    out.push(Check::new("riccati", "scalar drift c = 0 vs zero drift", cmp(&scalar0, &zero), 1e-9));
    let b = 2.5;
    let zero_iso = chain(Mat::identity(d, d) * b, 0.0, SpecialCase::ZeroDrift, false)?;
    let iso = chain(Mat::identity(d, d) * b, 0.0, SpecialCase::Isotropic { b }, false)?;
    out.push(Check::new("riccati", "zero drift β = bI vs isotropic", cmp(&zero_iso, &iso), 1e-9));
    Ok(())
}

fn bridge_suite(seed: u64, out: &mut Vec<Check>) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..5 {
        let p = random_protocol(&mut rng, 2, 4);
        let tgt = random_mixture(&mut rng, 2, 3);
        let x0 = Vector::from_fn(2, |_, _| rng.random_range(-0.5..0.5));
        let ctx = BridgeContext::new(&p, tgt, x0, &SweepOptions::fast(1e-3))?;
        for _ in 0..20 {
            let t = rng.random_range(0.02..0.98);
            let s = ctx.slice(t)?;
            let x = Vector::from_fn(2, |_, _| rng.random_range(-1.5..1.5));
            let u = s.score(&x);
            let h = 1e-5;
            let fd = Vector::from_fn(2, |i, _| {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[i] += h;
                xm[i] -= h;
                s.kappa * (s.log_psi(&xp) - s.log_psi(&xm)) / (2.0 * h)
            });
            worst = worst.max((&u - &fd).norm() / u.norm().max(1.0));
        }
    }
    out.push(Check::new("bridge", "score vs κ∇log ψ central differences, 100 points", worst, 1e-5));

    let geom = CorridorGeometry::default();
    let tgt = crate::experiment::corridor_target();
    let prob = CorridorProblem::new(
        geom,
        tgt.clone(),
        CorridorSource::Point(Vector::zeros(2)),
        10,
        LossConfig::default(),
        SweepOptions::fast(1e-3),
    );
    let ctx = prob.context(&crate::protocol::baseline_protocol(10, 3.0, 3.0))?;
    let m = ctx.marginal(ctx.band().1)?;
    let (me, ce) = crate::bridge::terminal_errors(&m, &tgt);
    out.push(Check::new("bridge", "E1 baseline terminal mean error", me, 5e-3));
    out.push(Check::new("bridge", "E1 baseline terminal covariance error", ce, 5e-3));
    Ok(())
}

/// Shift suite; `corrupt` perturbs one propagator column to exercise the failure path.
pub fn shift_checks(seed: u64, corrupt: Option<usize>) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut worst_col = 0usize;
    for i in 0..10 {
        let d = [1, 2, 3][i % 3];
        let mut p = random_protocol(&mut rng, d, 4);
        for iv in p.intervals.iter_mut() {
            iv.sigma = Mat::zeros(d, d);
        }
        let tgt = random_mixture(&mut rng, d, 2);
        let ctx = BridgeContext::new(&p, tgt.clone(), Vector::zeros(d), &SweepOptions::fast(1e-3))?;
        let mut props = build_propagators(&ctx)?;
        if let Some(j) = corrupt {
            let j = j.min(d - 1);
            for m in props.backward.theta_x.iter_mut() {
                let mut col = m.column_mut(j);
                col *= 1.01;
                col.add_scalar_mut(1e-3);
            }
        }
        let z = Vector::from_fn(d, |_, _| rng.random_range(-0.8..0.8));
        let shifted = p.map_nu(|_, nu| nu - &z);
        let means: Vec<Vector> = tgt.means.iter().map(|m| m - &z).collect();
        let tgt_s = GaussianMixture::new(tgt.weights.clone(), means, tgt.covariances.clone())?;
        let fresh = BridgeContext::new(&shifted, tgt_s, Vector::zeros(d), &SweepOptions::fast(1e-3))?;
        for (idx, &t) in ctx.backward.times.iter().enumerate() {
            let ss = ShiftedSlice::new(&ctx, &props, t, SourceFrame::Shifted)?;
            let lin = ss.shifted_inputs(&z);
            let fb = &fresh.backward.states[idx];
            let ff = &fresh.forward.states[idx];
            let scale = |v: &Vector| v.amax().max(1.0);
            let per_col = |got: &Vector, want: &Vector| -> (f64, usize) {
                let diff = got - want;
                let j = diff.iamax();
                (diff.amax() / scale(want), j)
            };
            for (got, want) in [
                (&lin.thx_minus, &fb.theta_x),
                (&lin.thy_minus, &fb.theta_y),
                (&lin.thx_plus, &ff.theta_x),
            ] {
                let (e, j) = per_col(got, want);
                if e > worst {
                    worst = e;
                    worst_col = j;
                }
            }
        }
    }
    out.push(Check::new(
        "shift",
        format!("shifted θ vs full resweep, 10 random pairs (worst coordinate {worst_col})"),
        worst,
        1e-10,
    ));
    Ok(out)
}

fn gradient_suite(seed: u64, out: &mut Vec<Check>) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prob = CorridorProblem::new(
        CorridorGeometry::default(),
        crate::experiment::corridor_target(),
        CorridorSource::Point(Vector::zeros(2)),
        10,
        LossConfig::default(),
        SweepOptions::fast(1e-3),
    );
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let w = prob.warm_start();
        let params = CorridorParams {
            rho: w.rho.iter().map(|_| rng.random_range(-0.4..0.4)).collect(),
            c: w.c.iter().map(|c| c + rng.random_range(-1.0..1.0)).collect(),
        };
        let g = prob.gradient(&params)?;
        let x = params.to_vec();
        let h = 1e-5;
        for i in 0..x.len() {
            let f = |delta: f64| -> Result<f64> {
                let mut v = x.clone();
                v[i] += delta;
                Ok(prob.total_loss(&CorridorParams::from_slice(&v))?.total)
            };
            let fd = (f(h)? - f(-h)?) / (2.0 * h);
            worst = worst.max((g[i] - fd).abs() / fd.abs().max(1e-2));
        }
    }
    out.push(Check::new("gradient", "Richardson gradient vs central differences at 1e-5, 20 points", worst, 1e-4));
    Ok(())
}

pub const SUITES: [&str; 4] = ["riccati", "bridge", "shift", "gradient"];

pub fn run_suite(name: &str, seed: u64) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    match name {
        "riccati" => riccati_suite(seed, &mut out)?,
        "bridge" => bridge_suite(seed, &mut out)?,
        "shift" => out = shift_checks(seed, None)?,
        "gradient" => gradient_suite(seed, &mut out)?,
        "all" => {
            for s in SUITES {
                out.extend(run_suite(s, seed)?);
            }
        }
        other => return Err(crate::Error::Config(format!("unknown validation suite {other:?}"))),
    }
    Ok(out)
}
