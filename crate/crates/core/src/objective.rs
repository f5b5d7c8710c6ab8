//! Density-level corridor objective, regularizers, gradients and plain gradient descent.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bridge::{BridgeContext, GaussianMixture, MarginalMixture};
use crate::linalg::{Mat, Vector};
use crate::protocol::{build_corridor_protocol, CorridorGeometry, CorridorParams, Protocol, StiffnessBand};
use crate::riccati::SweepOptions;
use crate::sampler::{sample_marginal, sim_times, trapezoid};
use crate::shift::{build_propagators, shifted_marginal, SourceFrame};
use crate::{Error, Result};

/// `E[exp(-½(X-m)ᵀA(X-m))]` for `X ~ N(mean, cov)`.
pub fn gauss_kernel_expectation(mean: &Vector, cov: &Mat, center: &Vector, a: &Mat) -> f64 {
    let d = mean.len();
    let m = Mat::identity(d, d) + cov * a;
    let lu = m.clone().lu();
    let det = lu.determinant();
    assert!(det > 0.0, "I + ΣA must have positive determinant");
    let delta = mean - center;
    // A (I + ΣA)⁻¹ = (I + AΣ)⁻¹ A; use the solve on the right-hand form.
    let w = lu.solve(&delta).expect("I + ΣA is invertible for PSD inputs");
    det.powf(-0.5) * (-0.5 * delta.dot(&(a * w))).exp()
}

pub fn mixture_kernel_expectation(m: &MarginalMixture, center: &Vector, a: &Mat) -> f64 {
    let covs = m.covariances();
    m.weights
        .iter()
        .zip(m.means.iter().zip(&covs))
        .map(|(w, (mu, c))| w * gauss_kernel_expectation(mu, c, center, a))
        .sum()
}

/// Kernel centres and matrices at the active interval midpoints.
#[derive(Clone, Debug)]
pub struct CorridorKernel {
    pub times: Vec<f64>,
    pub centers: Vec<Vector>,
    pub matrices: Vec<Mat>,
}

impl CorridorKernel {
    pub fn new(geom: &CorridorGeometry, intervals: usize, t_cut: f64) -> Self {
        let s: Vec<f64> = (0..intervals)
            .map(|k| (k as f64 + 0.5) / intervals as f64)
            .filter(|&s| s <= t_cut + 1e-12)
            .collect();
        CorridorKernel {
            centers: s.iter().map(|&s| geom.midline(s)).collect(),
            matrices: s.iter().map(|&s| geom.kernel_matrix(s)).collect(),
            times: s,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub corridor_weight: f64,
    pub rho_weight: f64,
    pub beta_weight: f64,
    pub second_diff_weight: f64,
    pub barrier_weight: f64,
    pub barrier_scale: f64,
    pub barrier_threshold: f64,
    pub learning_rate: f64,
    pub iterations: usize,
    pub t_cut: f64,
    pub beta_init: f64,
    /// Base step of the Richardson-extrapolated central differences.
    pub gradient_step: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            corridor_weight: 10.0,
            rho_weight: 0.10,
            beta_weight: 0.05,
            second_diff_weight: 0.5,
            barrier_weight: 0.3,
            barrier_scale: 15.0,
            barrier_threshold: 0.55,
            learning_rate: 3e-2,
            iterations: 300,
            t_cut: 0.80,
            beta_init: 15.0,
            gradient_step: 1e-3,
        }
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn mean_sq_diff(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    v.windows(2).map(|w| (w[1] - w[0]).powi(2)).sum::<f64>() / (v.len() - 1) as f64
}

/// Smoothness/barrier penalty on ρ and smoothness/anchor penalty on c.
pub fn regularizers(params: &CorridorParams, c_anchor: f64, cfg: &LossConfig) -> (f64, f64) {
    let rho = &params.rho;
    let k = rho.len();
    let second = if k >= 3 {
        rho.windows(3).map(|w| (w[2] - 2.0 * w[1] + w[0]).powi(2)).sum::<f64>() / (k - 2) as f64
    } else {
        0.0
    };
    let barrier = rho
        .iter()
        .map(|r| softplus(cfg.barrier_scale * (r.abs() - cfg.barrier_threshold)) / cfg.barrier_scale)
        .sum::<f64>()
        / k as f64;
    let l_rho = mean_sq_diff(rho) + cfg.second_diff_weight * second + cfg.barrier_weight * barrier;
    let anchor = params.c.iter().map(|c| (c - c_anchor).powi(2)).sum::<f64>() / params.c.len() as f64;
    let l_beta = mean_sq_diff(&params.c) + anchor;
    (l_rho, l_beta)
}

#[derive(Clone, Debug)]
pub enum CorridorSource {
    Point(Vector),
    /// Frozen source draws, each handled through its own bridge.
    Particles { points: Vec<Vector>, frame: SourceFrame },
}

/// A corridor protocol-learning problem: geometry, target, source and losses.
#[derive(Clone, Debug)]
pub struct CorridorProblem {
    pub geometry: CorridorGeometry,
    pub band: StiffnessBand,
    pub target: GaussianMixture,
    pub source: CorridorSource,
    pub loss: LossConfig,
    pub sweep: SweepOptions,
    pub intervals: usize,
    /// Fixed drift matrices per interval (zero when absent).
    pub sigma: Option<Vec<Mat>>,
    pub kernel: CorridorKernel,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub corridor: f64,
    pub rho: f64,
    pub beta: f64,
    pub total: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub corridor_loss: f64,
    pub total_loss: f64,
    pub gradient_norm: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OptimizationTrace {
    pub rows: Vec<TraceRow>,
    pub best_iteration: usize,
    pub params: Vec<CorridorParams>,
}

impl CorridorProblem {
    pub fn new(
        geometry: CorridorGeometry,
        target: GaussianMixture,
        source: CorridorSource,
        intervals: usize,
        loss: LossConfig,
        sweep: SweepOptions,
    ) -> Self {
        let kernel = CorridorKernel::new(&geometry, intervals, loss.t_cut);
        CorridorProblem {
            geometry,
            band: StiffnessBand::default(),
            target,
            source,
            loss,
            sweep,
            intervals,
            sigma: None,
            kernel,
        }
    }

    pub fn c_anchor(&self) -> f64 {
        crate::protocol::warm_start_c(&self.band, self.loss.beta_init)
    }

    pub fn warm_start(&self) -> CorridorParams {
        CorridorParams::warm_start(self.intervals, &self.band, self.loss.beta_init)
    }

    pub fn protocol(&self, params: &CorridorParams) -> Result<Protocol> {
        let mut p = build_corridor_protocol(&self.geometry, params, &self.band)?;
        self.apply_sigma(&mut p)?;
        Ok(p)
    }

    pub fn apply_sigma(&self, p: &mut Protocol) -> Result<()> {
        if let Some(sig) = &self.sigma {
            if sig.len() != p.len() {
                return Err(Error::Dimension(format!("{} drift matrices for {} intervals", sig.len(), p.len())));
            }
            for (iv, s) in p.intervals.iter_mut().zip(sig) {
                iv.sigma = s.clone();
            }
        }
        Ok(())
    }

    pub fn context(&self, protocol: &Protocol) -> Result<BridgeContext> {
        let x0 = match &self.source {
            CorridorSource::Point(x) => x.clone(),
            CorridorSource::Particles { .. } => Vector::zeros(protocol.dim),
        };
        BridgeContext::new(protocol, self.target.clone(), x0, &self.sweep)
    }

    /// Marginal at `t`: the delta-source mixture, or the flattened per-particle mixture.
    pub fn marginal(&self, ctx: &BridgeContext, t: f64) -> Result<MarginalMixture> {
        let (lo, hi) = ctx.band();
        let t = t.clamp(lo, hi);
        match &self.source {
            CorridorSource::Point(_) => ctx.marginal(t),
            CorridorSource::Particles { points, frame } => {
                let props = build_propagators(ctx)?;
                shifted_marginal(ctx, &props, points, t, *frame)
            }
        }
    }

    /// Mean over the active set of `1 - E[K_k]` under the protocol's marginal.
    pub fn corridor_loss_of(&self, protocol: &Protocol) -> Result<f64> {
        let ctx = self.context(protocol)?;
        let (lo, hi) = ctx.band();
        let kern = &self.kernel;
        let props = match &self.source {
            CorridorSource::Particles { .. } => Some(build_propagators(&ctx)?),
            CorridorSource::Point(_) => None,
        };
        let mut acc = 0.0;
        for i in 0..kern.times.len() {
            let t = kern.times[i].clamp(lo, hi);
            let m = match (&self.source, &props) {
                (CorridorSource::Particles { points, frame }, Some(pr)) => shifted_marginal(&ctx, pr, points, t, *frame)?,
                _ => ctx.marginal(t)?,
            };
            acc += 1.0 - mixture_kernel_expectation(&m, &kern.centers[i], &kern.matrices[i]);
        }
        Ok(acc / kern.times.len() as f64)
    }

    pub fn corridor_loss(&self, params: &CorridorParams) -> Result<f64> {
        self.corridor_loss_of(&self.protocol(params)?)
    }

    pub fn total_loss(&self, params: &CorridorParams) -> Result<LossBreakdown> {
        let corridor = self.corridor_loss(params)?;
        let (rho, beta) = regularizers(params, self.c_anchor(), &self.loss);
        let l = &self.loss;
        let total = l.corridor_weight * corridor + l.rho_weight * rho + l.beta_weight * beta;
        if !total.is_finite() {
            return Err(Error::NonFinite("total loss"));
        }
        Ok(LossBreakdown {
            corridor,
            rho,
            beta,
            total,
        })
    }

    fn total_at(&self, v: &[f64]) -> Result<f64> {
        self.total_loss(&CorridorParams::from_slice(v)).map(|b| b.total)
    }

    /// Gradient over `(ρ_1..ρ_K, c_1..c_K)` by Richardson-extrapolated central differences
    /// (steps h and h/2), one parameter per worker.
    pub fn gradient(&self, params: &CorridorParams) -> Result<Vec<f64>> {
        let x = params.to_vec();
        let h = self.loss.gradient_step;
        (0..x.len())
            .into_par_iter()
            .map(|i| {
                let at = |delta: f64| {
                    let mut v = x.clone();
                    v[i] += delta;
                    self.total_at(&v)
                };
                let d1 = (at(h)? - at(-h)?) / (2.0 * h);
                let d2 = (at(0.5 * h)? - at(-0.5 * h)?) / h;
                Ok((4.0 * d2 - d1) / 3.0)
            })
            .collect()
    }

    /// Plain gradient descent; returns the best iterate by total loss.
    pub fn optimize(&self, init: &CorridorParams) -> Result<(CorridorParams, OptimizationTrace)> {
        let mut x = init.to_vec();
        let mut rows = Vec::new();
        let mut snaps = Vec::new();
        let mut best = (f64::INFINITY, 0usize);
        for it in 0..=self.loss.iterations {
            let p = CorridorParams::from_slice(&x);
            let lb = self.total_loss(&p)?;
            let g = if it < self.loss.iterations { self.gradient(&p)? } else { vec![0.0; x.len()] };
            let gn = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            rows.push(TraceRow {
                iteration: it,
                corridor_loss: lb.corridor,
                total_loss: lb.total,
                gradient_norm: gn,
            });
            if lb.total < best.0 {
                best = (lb.total, it);
            }
            snaps.push(p);
            for (xi, gi) in x.iter_mut().zip(&g) {
                *xi -= self.loss.learning_rate * gi;
            }
        }
        let best_params = snaps[best.1].clone();
        Ok((
            best_params,
            OptimizationTrace {
                rows,
                best_iteration: best.1,
                params: snaps,
            },
        ))
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct PathKinetic {
    pub path: f64,
    pub kinetic: f64,
    pub kinetic_stderr: f64,
}

/// `J_path` from exact mixture moments and `J_kin = ∫E‖u*‖²/(2κ)dt` by Monte Carlo over the
/// marginal, both trapezoidal over a uniform band grid (delta source).
pub fn path_kinetic_costs(ctx: &BridgeContext, nodes: usize, samples: usize, seed: u64) -> Result<PathKinetic> {
    let times = sim_times(ctx.band(), nodes.max(2) - 1);
    let protocol = ctx.protocol();
    let vals: Vec<(f64, f64, f64)> = times
        .par_iter()
        .enumerate()
        .map(|(i, &t)| -> Result<(f64, f64, f64)> {
            let s = ctx.slice(t)?;
            let m = s.marginal();
            let nu = &protocol.intervals[protocol.grid.locate(t)].nu;
            let covs = m.covariances();
            let path: f64 = (0..m.weights.len())
                .map(|k| m.weights[k] * (covs[k].trace() + (&m.means[k] - nu).norm_squared()))
                .sum();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let draws = sample_marginal(&m, samples, &mut rng)?;
            let vals: Vec<f64> = draws.iter().map(|(_, x)| s.score(x).norm_squared() / (2.0 * s.kappa)).collect();
            let mean = vals.iter().sum::<f64>() / samples as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (samples as f64 - 1.0).max(1.0);
            Ok((path, mean, var / samples as f64))
        })
        .collect::<Result<_>>()?;
    let p: Vec<f64> = vals.iter().map(|v| v.0).collect();
    let k: Vec<f64> = vals.iter().map(|v| v.1).collect();
    // Independent nodes: variance of the trapezoid is Σ w_i² var_i.
    let mut w = vec![0.0; times.len()];
    for i in 0..times.len() - 1 {
        let h = times[i + 1] - times[i];
        w[i] += 0.5 * h;
        w[i + 1] += 0.5 * h;
    }
    let var: f64 = w.iter().zip(&vals).map(|(wi, v)| wi * wi * v.2).sum();
    Ok(PathKinetic {
        path: trapezoid(&times, &p),
        kinetic: trapezoid(&times, &k),
        kinetic_stderr: var.sqrt(),
    })
}
