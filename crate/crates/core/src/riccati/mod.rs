//! Backward and forward Green-function coefficient sweeps.
//!
//! Each branch carries `(A, B, C, θx, θy, ζ)` so that
//! `log G(x|y) = -½xᵀAx + xᵀBy - ½yᵀCy + θxᵀx + θyᵀy + ζ`. On every interval the
//! quadratic coefficients follow a matrix Riccati equation that linearises through the
//! 2d×2d Hamiltonian system; the linear coefficients ride along as extra augmented columns.

mod blocks;

pub use blocks::{blocks, hamiltonian, resolve_case, HamiltonianBlocks};

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::linalg::{gauss_legendre, norm1, symmetrize, Mat, Vector};
use crate::protocol::{Protocol, ProtocolInterval, SpecialCase};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Branch {
    Backward,
    Forward,
}

/// Block-formula policy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Solver {
    /// Use the most specific closed form the interval admits.
    Auto,
    /// Always use the augmented matrix exponential.
    General,
    /// Use the given closed form regardless of the interval's own class (the caller vouches
    /// that its preconditions hold).
    Force(SpecialCase),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ThetaYMethod {
    /// From the augmented transition blocks.
    Closed,
    /// Adaptive Gauss–Legendre quadrature of κ BᵀΘx over the elapsed time.
    Quadrature,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepOptions {
    pub epsilon: f64,
    pub solver: Solver,
    pub theta_y: ThetaYMethod,
    pub track_zeta: bool,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions {
            epsilon: 1e-3,
            solver: Solver::Auto,
            theta_y: ThetaYMethod::Closed,
            track_zeta: true,
        }
    }
}

impl SweepOptions {
    pub fn with_epsilon(epsilon: f64) -> Self {
        SweepOptions {
            epsilon,
            ..Default::default()
        }
    }

    /// Skip the normaliser; nothing downstream of the bridge depends on it.
    pub fn fast(epsilon: f64) -> Self {
        SweepOptions {
            epsilon,
            track_zeta: false,
            ..Default::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoefficientState {
    pub branch: Branch,
    pub t: f64,
    pub a: Mat,
    pub b: Mat,
    pub c: Mat,
    pub theta_x: Vector,
    pub theta_y: Vector,
    pub zeta: f64,
}

impl CoefficientState {
    /// Heat-kernel asymptotic `A = B = C = I/(κε)`, zero linear terms.
    pub fn delta(branch: Branch, t: f64, d: usize, kappa: f64, epsilon: f64) -> Self {
        let i = Mat::identity(d, d) / (kappa * epsilon);
        CoefficientState {
            branch,
            t,
            a: i.clone(),
            b: i.clone(),
            c: i,
            theta_x: Vector::zeros(d),
            theta_y: Vector::zeros(d),
            zeta: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.theta_x.len()
    }
}

/// Coefficients after elapsed time τ from a reference state, for a block of drive columns.
pub(crate) struct Propagated {
    pub a: Mat,
    pub b: Mat,
    pub c: Mat,
    pub theta_x: Mat,
    pub theta_y: Mat,
    pub log_det_x: f64,
}

/// Apply the transition blocks to a reference state.
///
/// With `X = Φ11 + Φ12 A₀`, `Y = Φ21 + Φ22 A₀`: `A = Y X⁻¹`, `B = X⁻ᵀ B₀`,
/// `C = C₀ - B₀ᵀ X⁻¹ Φ12 B₀`, `θx = X⁻ᵀ θx₀ + A f₁ - f₂`,
/// `θy = θy₀ + B₀ᵀ X⁻¹ (Φ12 θx₀ - f₁)`.
pub(crate) fn propagate(
    a0: &Mat,
    b0: &Mat,
    c0: &Mat,
    thx0: &Mat,
    thy0: &Mat,
    blk: &HamiltonianBlocks,
) -> Result<Propagated> {
    let x = &blk.phi11 + &blk.phi12 * a0;
    let y = &blk.phi21 + &blk.phi22 * a0;
    let lu = x.clone().lu();
    let u = lu.u();
    let diag = u.diagonal();
    let (lo, hi) = diag
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), v| (lo.min(v.abs()), hi.max(v.abs())));
    if !(lo > hi * 1e-14) || !lo.is_finite() {
        return Err(Error::Singular("transition block X"));
    }
    let log_det_x = diag.iter().map(|v| v.abs().ln()).sum();
    let xt_lu = x.transpose().lu();
    let solve_t = |rhs: &Mat| xt_lu.solve(rhs).ok_or(Error::Singular("transition block Xᵀ"));
    let solve = |rhs: &Mat| lu.solve(rhs).ok_or(Error::Singular("transition block X"));

    let a = symmetrize(&solve_t(&y.transpose())?.transpose());
    let b = solve_t(b0)?;
    let xinv_phi12 = solve(&blk.phi12)?;
    let c = symmetrize(&(c0 - b0.transpose() * &xinv_phi12 * b0));
    let theta_x = solve_t(thx0)? + &a * &blk.drive1 - &blk.drive2;
    let theta_y = thy0 + b0.transpose() * solve(&(&blk.phi12 * thx0 - &blk.drive1))?;
    Ok(Propagated {
        a,
        b,
        c,
        theta_x,
        theta_y,
        log_det_x,
    })
}

fn column(v: &Vector) -> Mat {
    Mat::from_column_slice(v.len(), 1, v.as_slice())
}

fn gl_rule(n: usize) -> &'static (Vec<f64>, Vec<f64>) {
    static GL8: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    static GL16: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    match n {
        8 => GL8.get_or_init(|| gauss_legendre(8)),
        _ => GL16.get_or_init(|| gauss_legendre(16)),
    }
}

/// Adaptive composite Gauss–Legendre: compare 8- and 16-node rules, bisect on disagreement.
fn integrate<F>(f: &F, lo: f64, hi: f64, depth: usize) -> Result<Vec<f64>>
where
    F: Fn(f64) -> Result<Vec<f64>>,
{
    let half = 0.5 * (hi - lo);
    let mid = 0.5 * (hi + lo);
    let rule = |n: usize| -> Result<Vec<f64>> {
        let (x, w) = gl_rule(n);
        let mut acc: Option<Vec<f64>> = None;
        for (xi, wi) in x.iter().zip(w) {
            let v = f(mid + half * xi)?;
            match acc.as_mut() {
                None => acc = Some(v.iter().map(|e| e * wi * half).collect()),
                Some(a) => a.iter_mut().zip(&v).for_each(|(a, e)| *a += e * wi * half),
            }
        }
        Ok(acc.unwrap_or_default())
    };
    let coarse = rule(8)?;
    let fine = rule(16)?;
    let scale = fine.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let gap = coarse
        .iter()
        .zip(&fine)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    if gap <= 1e-9 * scale || depth >= 8 || hi - lo < 1e-12 {
        return Ok(fine);
    }
    let mut left = integrate(f, lo, mid, depth + 1)?;
    let right = integrate(f, mid, hi, depth + 1)?;
    left.iter_mut().zip(&right).for_each(|(a, b)| *a += b);
    Ok(left)
}

fn propagate_state(
    state: &CoefficientState,
    iv: &ProtocolInterval,
    tau: f64,
    case: SpecialCase,
) -> Result<Propagated> {
    let g = column(&iv.drive());
    let blk = blocks(iv, state.branch, tau, &g, case)?;
    propagate(
        &state.a,
        &state.b,
        &state.c,
        &column(&state.theta_x),
        &column(&state.theta_y),
        &blk,
    )
}

/// Advance a coefficient state by elapsed time `tau` inside one interval, away from the
/// boundary the branch was initialised at.
pub fn interval_update(
    state: &CoefficientState,
    iv: &ProtocolInterval,
    tau: f64,
    opts: &SweepOptions,
) -> Result<CoefficientState> {
    let n = substeps(iv, state.branch, tau);
    if n == 1 {
        return update_once(state, iv, tau, opts);
    }
    let h = tau / n as f64;
    let mut s = state.clone();
    for _ in 0..n {
        s = update_once(&s, iv, h, opts)?;
    }
    Ok(s)
}

/// Largest `‖H‖₁ τ` taken in one transition step. The blocks grow like `exp(‖H‖τ)`, and
/// the Riccati quotient loses that many digits to cancellation.
const MAX_STEP_GROWTH: f64 = 8.0;

/// Equal pieces needed to keep each step within [`MAX_STEP_GROWTH`].
pub(crate) fn substeps(iv: &ProtocolInterval, branch: Branch, tau: f64) -> usize {
    let g = norm1(&hamiltonian(iv, branch)) * tau;
    if g <= MAX_STEP_GROWTH {
        1
    } else {
        (g / MAX_STEP_GROWTH).ceil() as usize
    }
}

fn update_once(
    state: &CoefficientState,
    iv: &ProtocolInterval,
    tau: f64,
    opts: &SweepOptions,
) -> Result<CoefficientState> {
    let case = resolve_case(iv, opts.solver);
    let d = state.dim();
    let p = propagate_state(state, iv, tau, case)?;
    let mut theta_y: Vector = p.theta_y.column(0).into_owned();
    let mut zeta = state.zeta;

    let want_quad = opts.theta_y == ThetaYMethod::Quadrature;
    if (want_quad || opts.track_zeta) && tau > 0.0 {
        let integrand = |u: f64| -> Result<Vec<f64>> {
            let q = propagate_state(state, iv, u, case)?;
            let tx = q.theta_x.column(0);
            let mut out: Vec<f64> = if want_quad {
                (q.b.transpose() * tx).iter().map(|v| v * iv.kappa).collect()
            } else {
                Vec::new()
            };
            out.push(tx.norm_squared());
            Ok(out)
        };
        let vals = integrate(&integrand, 0.0, tau, 0)?;
        if want_quad {
            theta_y = &state.theta_y + Vector::from_column_slice(&vals[..d]);
        }
        if opts.track_zeta {
            let tr_sigma = iv.sigma.trace();
            let guide = 0.5 * iv.nu.dot(&(&iv.beta * &iv.nu));
            let theta_sq = vals[vals.len() - 1];
            // ∫κ tr A over the step equals log|X| ± τ tr σ; with the ±tr σ source of the
            // forward normaliser both branches reduce to the same expression.
            zeta += -0.5 * (p.log_det_x + tau * tr_sigma) - tau * guide + 0.5 * iv.kappa * theta_sq;
        }
    }
    let t = match state.branch {
        Branch::Backward => state.t - tau,
        Branch::Forward => state.t + tau,
    };
    Ok(CoefficientState {
        branch: state.branch,
        t,
        a: p.a,
        b: p.b,
        c: p.c,
        theta_x: p.theta_x.column(0).into_owned(),
        theta_y,
        zeta,
    })
}

/// Breakpoint states of one branch over the working band `[ε, T-ε]`.
#[derive(Clone, Debug, Serialize)]
pub struct SweepCache {
    pub branch: Branch,
    pub options: SweepOptions,
    pub protocol: Protocol,
    /// Times `[ε, t_1, …, t_{K-1}, T-ε]`.
    pub times: Vec<f64>,
    /// State at each entry of `times`.
    pub states: Vec<CoefficientState>,
    pub cases: Vec<SpecialCase>,
}

pub fn band_times(protocol: &Protocol, epsilon: f64) -> Vec<f64> {
    let mut times = protocol.grid.breakpoints().to_vec();
    let k = times.len() - 1;
    times[0] = epsilon;
    times[k] = protocol.grid.horizon() - epsilon;
    times
}

pub fn check_epsilon(protocol: &Protocol, epsilon: f64) -> Result<()> {
    let min_len = protocol
        .grid
        .breakpoints()
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(f64::INFINITY, f64::min);
    if !(epsilon > 0.0 && epsilon < 0.5 * min_len) {
        return Err(Error::Config(format!(
            "epsilon {epsilon} must lie in (0, {})",
            0.5 * min_len
        )));
    }
    Ok(())
}

pub fn run_sweep(protocol: &Protocol, branch: Branch, opts: &SweepOptions) -> Result<SweepCache> {
    protocol.ensure_valid()?;
    check_epsilon(protocol, opts.epsilon)?;
    let times = band_times(protocol, opts.epsilon);
    let k = protocol.len();
    let d = protocol.dim;
    let mut states: Vec<CoefficientState> = Vec::with_capacity(k + 1);
    let cases = protocol
        .intervals
        .iter()
        .map(|iv| resolve_case(iv, opts.solver))
        .collect();
    match branch {
        Branch::Forward => {
            let mut s = CoefficientState::delta(branch, times[0], d, protocol.intervals[0].kappa, opts.epsilon);
            states.push(s.clone());
            for i in 0..k {
                s = interval_update(&s, &protocol.intervals[i], times[i + 1] - times[i], opts)
                    .map_err(|e| e.at_interval(i))?;
                s.t = times[i + 1];
                states.push(s.clone());
            }
        }
        Branch::Backward => {
            let mut s = CoefficientState::delta(branch, times[k], d, protocol.intervals[k - 1].kappa, opts.epsilon);
            states.push(s.clone());
            for i in (0..k).rev() {
                s = interval_update(&s, &protocol.intervals[i], times[i + 1] - times[i], opts)
                    .map_err(|e| e.at_interval(i))?;
                s.t = times[i];
                states.push(s.clone());
            }
            states.reverse();
        }
    }
    Ok(SweepCache {
        branch,
        options: *opts,
        protocol: protocol.clone(),
        times,
        states,
        cases,
    })
}

impl SweepCache {
    pub fn epsilon(&self) -> f64 {
        self.options.epsilon
    }

    pub fn band(&self) -> (f64, f64) {
        (self.times[0], *self.times.last().unwrap())
    }

    /// State at the band edge opposite the initialisation (forward: `T-ε`, backward: `ε`).
    pub fn terminal(&self) -> &CoefficientState {
        match self.branch {
            Branch::Forward => self.states.last().unwrap(),
            Branch::Backward => &self.states[0],
        }
    }

    pub fn interval_of(&self, t: f64) -> usize {
        self.protocol.grid.locate(t)
    }

    pub fn evaluate_at(&self, t: f64) -> Result<CoefficientState> {
        let (lo, hi) = self.band();
        let tol = 1e-12;
        if !(t >= lo - tol && t <= hi + tol) {
            return Err(Error::OutOfBand { t, lo, hi });
        }
        let t = t.clamp(lo, hi);
        if let Some(i) = self.times.iter().position(|&s| s == t) {
            return Ok(self.states[i].clone());
        }
        let k = self.interval_of(t);
        let iv = &self.protocol.intervals[k];
        let mut s = match self.branch {
            Branch::Forward => interval_update(&self.states[k], iv, t - self.times[k], &self.options)?,
            Branch::Backward => {
                interval_update(&self.states[k + 1], iv, self.times[k + 1] - t, &self.options)?
            }
        };
        s.t = t;
        Ok(s)
    }
}

/// Both sweeps of one protocol.
#[derive(Clone, Debug)]
pub struct Sweeps {
    pub backward: SweepCache,
    pub forward: SweepCache,
}

pub fn run_sweeps(protocol: &Protocol, opts: &SweepOptions) -> Result<Sweeps> {
    Ok(Sweeps {
        backward: run_sweep(protocol, Branch::Backward, opts)?,
        forward: run_sweep(protocol, Branch::Forward, opts)?,
    })
}

