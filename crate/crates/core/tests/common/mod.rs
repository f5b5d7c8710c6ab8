//! Reference computations shared by the integration tests. None of them goes through the
//! coefficient sweeps.
#![allow(dead_code)]

use lqgmpid::bridge::GaussianMixture;
use lqgmpid::linalg::{Mat, Vector};
use lqgmpid::protocol::{Protocol, ProtocolInterval, TimeGrid};
use rand::Rng;

pub fn mat(rows: usize, data: &[f64]) -> Mat {
    Mat::from_row_slice(rows, data.len() / rows, data)
}

pub fn vec(data: &[f64]) -> Vector {
    Vector::from_column_slice(data)
}

pub fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-12)
}

pub fn random_spd(rng: &mut impl Rng, d: usize, lo: f64, hi: f64) -> Mat {
    let g = Mat::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
    let q = g.qr().q();
    let e = Vector::from_fn(d, |_, _| rng.random_range(lo..hi));
    &q * Mat::from_diagonal(&e) * q.transpose()
}

pub fn random_vec(rng: &mut impl Rng, d: usize, scale: f64) -> Vector {
    Vector::from_fn(d, |_, _| rng.random_range(-scale..scale))
}

/// Zero-drift protocol with random SPD stiffness and guides on a uniform grid.
pub fn random_zero_drift(rng: &mut impl Rng, d: usize, k: usize) -> Protocol {
    let intervals = (0..k)
        .map(|_| {
            ProtocolInterval::new(
                random_spd(rng, d, 0.2, 4.0),
                random_vec(rng, d, 1.0),
                Mat::zeros(d, d),
                rng.random_range(0.5..1.5),
            )
        })
        .collect();
    Protocol::new(TimeGrid::uniform(k, 1.0), intervals)
}

pub fn random_mixture(rng: &mut impl Rng, d: usize, k: usize) -> GaussianMixture {
    let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.3..1.0)).collect();
    let s: f64 = raw.iter().sum();
    GaussianMixture::new(
        raw.iter().map(|w| w / s).collect(),
        (0..k).map(|_| random_vec(rng, d, 1.5)).collect(),
        (0..k).map(|_| random_spd(rng, d, 0.05, 0.3)).collect(),
    )
    .unwrap()
}

/// Free Brownian bridge (β = 0, σ = 0) from a point: per component,
/// mean `x₀ + t (m_k - x₀)` and covariance `κ t(1-t) I + t² Σ_k`; weights unchanged.
pub fn brownian_bridge_component(x0: &Vector, mean: &Vector, cov: &Mat, kappa: f64, t: f64) -> (Vector, Mat) {
    let d = x0.len();
    (
        x0 + (mean - x0) * t,
        Mat::identity(d, d) * (kappa * t * (1.0 - t)) + cov * (t * t),
    )
}

/// One-dimensional Feynman–Kac grid solution of the bridge problem from a point source.
///
/// Forward density `φ` and backward potential `ψ` are propagated on a uniform grid with a
/// Strang split of the exact OU transition (drift `σx`, diffusion `κ`) and the killing
/// factor `exp(-½β(x-ν)² dt)`; the bridge marginal is `φψ` with `ψ_T = p_tar / φ_T`.
pub struct GridBridge {
    pub x: Vec<f64>,
    pub dt: f64,
    /// `φ_n ψ_n` normalized, at times `n dt`, n = 1..=steps-1.
    pub marginals: Vec<Vec<f64>>,
    pub log_psi: Vec<Vec<f64>>,
}

fn interval_at(p: &Protocol, t: f64) -> &ProtocolInterval {
    &p.intervals[p.grid.locate(t)]
}

/// Banded transition matrix column-normalized, entry `[i][j]` = density of `x_j -> x_i`.
fn transition(x: &[f64], dx: f64, iv: &ProtocolInterval, dt: f64, half_band: usize) -> Vec<Vec<(usize, f64)>> {
    let (sig, kap) = (iv.sigma[(0, 0)], iv.kappa);
    let growth = (sig * dt).exp();
    let var = if sig.abs() < 1e-12 {
        kap * dt
    } else {
        kap * ((2.0 * sig * dt).exp() - 1.0) / (2.0 * sig)
    };
    let n = x.len();
    (0..n)
        .map(|j| {
            let m = x[j] * growth;
            let c = ((m - x[0]) / dx).round() as isize;
            let lo = (c - half_band as isize).max(0) as usize;
            let hi = ((c + half_band as isize) as usize).min(n - 1);
            let mut col: Vec<(usize, f64)> = (lo..=hi)
                .map(|i| (i, (-(x[i] - m).powi(2) / (2.0 * var)).exp()))
                .collect();
            let s: f64 = col.iter().map(|e| e.1).sum();
            for e in &mut col {
                e.1 /= s;
            }
            col
        })
        .collect()
}

pub fn grid_bridge_1d(p: &Protocol, target: &GaussianMixture, x0: f64, half_width: f64, n: usize, steps: usize) -> GridBridge {
    assert_eq!(p.dim, 1);
    let dx = 2.0 * half_width / (n - 1) as f64;
    let x: Vec<f64> = (0..n).map(|i| -half_width + i as f64 * dx).collect();
    let dt = 1.0 / steps as f64;
    let kill = |iv: &ProtocolInterval, xi: f64| (-0.25 * iv.beta[(0, 0)] * (xi - iv.nu[0]).powi(2) * dt).exp();

    // step n covers [n dt, (n+1) dt]; protocol evaluated at its midpoint
    // one transition matrix per protocol interval, indexed by step
    let per_interval: Vec<Vec<Vec<(usize, f64)>>> = p
        .intervals
        .iter()
        .map(|iv| {
            let half_band = (8.0 * (iv.kappa * dt).sqrt() / dx).ceil() as usize + 2;
            transition(&x, dx, iv, dt, half_band)
        })
        .collect();
    let mats: Vec<&Vec<Vec<(usize, f64)>>> = (0..steps)
        .map(|s| &per_interval[p.grid.locate((s as f64 + 0.5) * dt)])
        .collect();
    let kills: Vec<Vec<f64>> = (0..steps)
        .map(|s| {
            let iv = interval_at(p, (s as f64 + 0.5) * dt);
            x.iter().map(|&xi| kill(iv, xi)).collect()
        })
        .collect();

    // forward: log-scaled densities to avoid underflow
    let mut phi: Vec<Vec<f64>> = Vec::with_capacity(steps + 1);
    let mut log_scale_phi = vec![0.0; steps + 1];
    {
        let iv = interval_at(p, 0.5 * dt);
        let var = iv.kappa * dt;
        let mut f: Vec<f64> = x
            .iter()
            .map(|&xi| (-(xi - x0).powi(2) / (2.0 * var)).exp() * kill(iv, xi))
            .collect();
        let s: f64 = f.iter().sum();
        f.iter_mut().for_each(|v| *v /= s);
        phi.push(vec![0.0; n]);
        phi.push(f);
        log_scale_phi[1] = s.ln();
    }
    for s in 1..steps {
        let prev = &phi[s];
        let mut next = vec![0.0; n];
        for j in 0..n {
            let w = prev[j] * kills[s][j];
            if w == 0.0 {
                continue;
            }
            for &(i, k) in &mats[s][j] {
                next[i] += k * w;
            }
        }
        for i in 0..n {
            next[i] *= kills[s][i];
        }
        let sum: f64 = next.iter().sum();
        next.iter_mut().for_each(|v| *v /= sum);
        log_scale_phi[s + 1] = log_scale_phi[s] + sum.ln();
        phi.push(next);
    }

    // backward from ψ_T = p_tar / φ_T (constant factors drop out after normalization)
    let mut psi = vec![vec![0.0; n]; steps + 1];
    psi[steps] = x
        .iter()
        .zip(&phi[steps])
        .map(|(&xi, &f)| if f > 1e-300 { target.log_density(&vec(&[xi])).exp() / f } else { 0.0 })
        .collect();
    let mut log_scale_psi = vec![0.0; steps + 1];
    for s in (1..steps).rev() {
        let up = &psi[s + 1];
        let mut cur = vec![0.0; n];
        for j in 0..n {
            let mut acc = 0.0;
            for &(i, k) in &mats[s][j] {
                acc += k * up[i] * kills[s][i];
            }
            cur[j] = acc * kills[s][j];
        }
        let m = cur.iter().cloned().fold(0.0, f64::max);
        cur.iter_mut().for_each(|v| *v /= m);
        log_scale_psi[s] = log_scale_psi[s + 1] + m.ln();
        psi[s] = cur;
    }

    let mut marginals = Vec::with_capacity(steps);
    let mut log_psi = Vec::with_capacity(steps);
    for s in 0..steps {
        if s == 0 {
            marginals.push(vec![0.0; n]);
            log_psi.push(vec![f64::NEG_INFINITY; n]);
            continue;
        }
        let mut m: Vec<f64> = phi[s].iter().zip(&psi[s]).map(|(a, b)| a * b).collect();
        let z: f64 = m.iter().sum::<f64>() * dx;
        m.iter_mut().for_each(|v| *v /= z);
        marginals.push(m);
        log_psi.push(psi[s].iter().map(|v| v.ln()).collect());
    }
    GridBridge { x, dt, marginals, log_psi }
}

impl GridBridge {
    pub fn step_of(&self, t: f64) -> usize {
        (t / self.dt).round() as usize
    }

    pub fn moments(&self, t: f64) -> (f64, f64) {
        let m = &self.marginals[self.step_of(t)];
        let dx = self.x[1] - self.x[0];
        let mean: f64 = self.x.iter().zip(m).map(|(x, p)| x * p).sum::<f64>() * dx;
        let var: f64 = self.x.iter().zip(m).map(|(x, p)| (x - mean).powi(2) * p).sum::<f64>() * dx;
        (mean, var)
    }

    /// `∂x log ψ` at grid point nearest `x` by central differences.
    pub fn grad_log_psi(&self, t: f64, x: f64) -> f64 {
        let lp = &self.log_psi[self.step_of(t)];
        let dx = self.x[1] - self.x[0];
        let i = ((x - self.x[0]) / dx).round() as usize;
        (lp[i + 1] - lp[i - 1]) / (2.0 * dx)
    }

    pub fn grid_point(&self, x: f64) -> f64 {
        let dx = self.x[1] - self.x[0];
        self.x[((x - self.x[0]) / dx).round() as usize]
    }
}

/// `E[exp(-½(X-c)ᵀA(X-c))]` for `X ~ N(mean, cov)` in 2D by tensor Gauss–Hermite-free
/// brute-force quadrature on a wide grid.
pub fn kernel_expectation_quadrature(mean: &Vector, cov: &Mat, center: &Vector, a: &Mat, n: usize) -> f64 {
    let chol = cov.clone().cholesky().unwrap().l();
    let prec = cov.clone().try_inverse().unwrap();
    let det = cov.determinant();
    let span = 7.0;
    let h = 2.0 * span / n as f64;
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            let u = vec(&[-span + (i as f64 + 0.5) * h, -span + (j as f64 + 0.5) * h]);
            let x = mean + &chol * &u;
            let dxm = &x - mean;
            let dxc = &x - center;
            let dens = (-0.5 * dxm.dot(&(&prec * &dxm))).exp() / (2.0 * std::f64::consts::PI * det.sqrt());
            acc += dens * (-0.5 * dxc.dot(&(a * &dxc))).exp();
        }
    }
    // change of variables x = mean + L u has Jacobian det L = sqrt(det Σ)
    acc * h * h * det.sqrt()
}

/// Central difference of a scalar function of a parameter vector.
pub fn central_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut p = x.to_vec();
            let mut m = x.to_vec();
            p[i] += h;
            m[i] -= h;
            (f(&p) - f(&m)) / (2.0 * h)
        })
        .collect()
}
