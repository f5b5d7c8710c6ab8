//! Euler–Maruyama simulation under the closed-form score and the empirical diagnostics.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bridge::{BridgeContext, GaussianMixture, MarginalMixture, TimeSlice};
use crate::linalg::{Mat, Spd, Vector};
use crate::protocol::Protocol;
use crate::shift::{ShiftPropagators, ShiftedSlice, SourceFrame};
use crate::{Error, Result};

const BLOW_UP: f64 = 1e6;

/// Drift used in the Euler step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DriftModel {
    /// Base linear drift plus control: `σx + u*`.
    Full,
    /// Control only: `u*`.
    ControlOnly,
}

#[derive(Clone, Debug)]
pub enum Source<'a> {
    /// Every particle starts at the context's source point.
    Delta,
    /// Particle n starts at `sources[n]`.
    Mixture {
        sources: &'a [Vector],
        props: &'a ShiftPropagators,
        frame: SourceFrame,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SimConfig {
    pub particles: usize,
    pub steps: usize,
    pub seed: u64,
    pub drift: DriftModel,
    /// Times at which the whole cloud is kept.
    pub snapshots: Vec<f64>,
    /// Keep every state of every particle.
    pub keep_paths: bool,
}

impl SimConfig {
    pub fn new(particles: usize, steps: usize, seed: u64) -> Self {
        SimConfig {
            particles,
            steps,
            seed,
            drift: DriftModel::Full,
            snapshots: Vec::new(),
            keep_paths: false,
        }
    }
}

/// Per-step ensemble moments, coordinate-wise.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepStats {
    pub t: f64,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// Mean squared distance to the active guide centre.
    pub guide_sq: f64,
}

impl StepStats {
    pub fn block_trace(&self, r: Range<usize>) -> f64 {
        self.var[r].iter().sum()
    }
}

#[derive(Clone, Debug)]
pub struct TrajectoryEnsemble {
    pub times: Vec<f64>,
    pub seed: u64,
    pub offsets: Vec<Vector>,
    pub initial: Vec<Vector>,
    pub terminal: Vec<Vector>,
    pub snapshots: Vec<(f64, Vec<Vector>)>,
    pub stats: Vec<StepStats>,
    /// `paths[n][i]` when `keep_paths` was set.
    pub paths: Option<Vec<Vec<Vector>>>,
}

impl TrajectoryEnsemble {
    pub fn particles(&self) -> usize {
        self.terminal.len()
    }

    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn terminal_mean(&self) -> Vector {
        mean_of(&self.terminal)
    }
}

pub fn mean_of(xs: &[Vector]) -> Vector {
    let mut m = Vector::zeros(xs[0].len());
    for x in xs {
        m += x;
    }
    m / xs.len() as f64
}

pub fn sim_times(band: (f64, f64), steps: usize) -> Vec<f64> {
    let (lo, hi) = band;
    (0..=steps).map(|i| lo + (hi - lo) * i as f64 / steps as f64).collect()
}

fn guide_at(protocol: &Protocol, t: f64) -> &Vector {
    &protocol.intervals[protocol.grid.locate(t)].nu
}

fn step_stats(t: f64, xs: &[Vector], nu: &Vector) -> StepStats {
    let d = nu.len();
    let n = xs.len() as f64;
    let mut mean = vec![0.0; d];
    let mut sq = vec![0.0; d];
    let mut g = 0.0;
    for x in xs {
        for i in 0..d {
            mean[i] += x[i];
            sq[i] += x[i] * x[i];
        }
        g += (x - nu).norm_squared();
    }
    let var = (0..d)
        .map(|i| {
            let m = mean[i] / n;
            (sq[i] / n - m * m).max(0.0) * n / (n - 1.0).max(1.0)
        })
        .collect();
    StepStats {
        t,
        mean: mean.iter().map(|m| m / n).collect(),
        var,
        guide_sq: g / n,
    }
}

enum StepField {
    Delta(TimeSlice),
    Mixture(ShiftedSlice),
}

/// Simulate `B` particles with `N` explicit Euler–Maruyama steps on `[ε, T-ε]`.
///
/// Particle n draws its noise from the ChaCha stream `n` of the seed, so changing `B` does
/// not perturb the noise of the other particles.
pub fn simulate(ctx: &BridgeContext, source: &Source<'_>, cfg: &SimConfig) -> Result<TrajectoryEnsemble> {
    if cfg.steps < 2 || cfg.particles == 0 {
        return Err(Error::Config("need at least 2 steps and 1 particle".into()));
    }
    let protocol = ctx.protocol();
    let d = protocol.dim;
    let times = sim_times(ctx.band(), cfg.steps);
    let b = cfg.particles;
    let offsets: Vec<Vector> = match source {
        Source::Delta => vec![Vector::zeros(d); b],
        Source::Mixture { sources, .. } => {
            if sources.len() != b {
                return Err(Error::Config(format!("{} source points for {b} particles", sources.len())));
            }
            sources.to_vec()
        }
    };
    // Working-frame states: shifted frame uses x̃ = x - z, all other cases physical.
    let shifted = matches!(source, Source::Mixture { frame: SourceFrame::Shifted, .. });
    let start: Vec<Vector> = match source {
        Source::Delta => vec![ctx.source.clone(); b],
        Source::Mixture { sources, frame, .. } => match frame {
            SourceFrame::Shifted => vec![Vector::zeros(d); b],
            SourceFrame::Direct => sources.to_vec(),
        },
    };
    let physical = |n: usize, x: &Vector| if shifted { x + &offsets[n] } else { x.clone() };

    let mut rngs: Vec<ChaCha8Rng> = (0..b)
        .map(|n| {
            let mut r = ChaCha8Rng::seed_from_u64(cfg.seed);
            r.set_stream(n as u64);
            r
        })
        .collect();
    let mut xs = start;
    let initial: Vec<Vector> = (0..b).map(|n| physical(n, &xs[n])).collect();
    let mut stats = vec![step_stats(times[0], &initial, guide_at(protocol, times[0]))];
    let mut snapshots: Vec<(f64, Vec<Vector>)> = Vec::new();
    let snap_idx: Vec<usize> = cfg
        .snapshots
        .iter()
        .map(|&s| nearest_index(&times, s))
        .collect();
    for (&s, &i) in cfg.snapshots.iter().zip(&snap_idx) {
        if i == 0 {
            snapshots.push((s, initial.clone()));
        }
    }
    let mut paths: Option<Vec<Vec<Vector>>> = cfg.keep_paths.then(|| initial.iter().map(|x| vec![x.clone()]).collect());

    for i in 0..cfg.steps {
        let t = times[i];
        let dt = times[i + 1] - t;
        let k = protocol.grid.locate(t);
        let sigma = &protocol.intervals[k].sigma;
        let noise_scale = (protocol.intervals[k].kappa * dt).sqrt();
        let field = match source {
            Source::Delta => StepField::Delta(ctx.slice(t)?),
            Source::Mixture { props, frame, .. } => StepField::Mixture(ShiftedSlice::new(ctx, props, t, *frame)?),
        };
        let drift = cfg.drift;
        xs.par_iter_mut()
            .zip(rngs.par_iter_mut())
            .enumerate()
            .for_each(|(n, (x, rng))| {
                let mut u = match &field {
                    StepField::Delta(s) => s.score(x),
                    StepField::Mixture(ss) => {
                        let terms = ss.particle(ctx, &offsets[n]);
                        ss.score(&terms, x)
                    }
                };
                if drift == DriftModel::Full {
                    let phys = if shifted { &*x + &offsets[n] } else { x.clone() };
                    u += sigma * phys;
                }
                let xi = Vector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
                *x += u * dt + xi * noise_scale;
            });
        if let Some((n, _)) = xs
            .iter()
            .enumerate()
            .find(|(_, x)| x.iter().any(|v| !v.is_finite() || v.abs() > BLOW_UP))
        {
            let _ = n;
            return Err(Error::BlowUp { step: i + 1 });
        }
        let phys: Vec<Vector> = (0..b).map(|n| physical(n, &xs[n])).collect();
        stats.push(step_stats(times[i + 1], &phys, guide_at(protocol, times[i + 1].min(ctx.band().1))));
        for (&s, &j) in cfg.snapshots.iter().zip(&snap_idx) {
            if j == i + 1 {
                snapshots.push((s, phys.clone()));
            }
        }
        if let Some(p) = paths.as_mut() {
            for (n, x) in phys.iter().enumerate() {
                p[n].push(x.clone());
            }
        }
    }
    let terminal: Vec<Vector> = (0..b).map(|n| physical(n, &xs[n])).collect();
    Ok(TrajectoryEnsemble {
        times,
        seed: cfg.seed,
        offsets,
        initial,
        terminal,
        snapshots,
        stats,
        paths,
    })
}

pub fn nearest_index(times: &[f64], t: f64) -> usize {
    let mut best = 0;
    for (i, s) in times.iter().enumerate() {
        if (s - t).abs() < (times[best] - t).abs() {
            best = i;
        }
    }
    best
}

/// Hard-assign each sample to its most responsible target component; return the counts.
pub fn mode_counts(samples: &[Vector], target: &GaussianMixture) -> Vec<usize> {
    let mut counts = vec![0usize; target.len()];
    for x in samples {
        let r = target.responsibilities(x);
        let k = r
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, v)| if *v > best.1 { (i, *v) } else { best })
            .0;
        counts[k] += 1;
    }
    counts
}

/// `½ Σ_k |π̂_k - π_k|` over hard assignments.
pub fn tv_mode_error(samples: &[Vector], target: &GaussianMixture) -> f64 {
    let counts = mode_counts(samples, target);
    let n = samples.len() as f64;
    0.5 * counts
        .iter()
        .zip(&target.weights)
        .map(|(c, w)| (*c as f64 / n - w).abs())
        .sum::<f64>()
}

/// Largest relative deviation of the empirical mode frequencies from the target weights,
/// `max_k |π̂_k - π_k| / π_k`.
pub fn mode_imbalance(samples: &[Vector], target: &GaussianMixture) -> f64 {
    let counts = mode_counts(samples, target);
    let n = samples.len() as f64;
    counts
        .iter()
        .zip(&target.weights)
        .map(|(c, w)| (*c as f64 / n - w).abs() / w)
        .fold(0.0, f64::max)
}

pub fn trapezoid(t: &[f64], y: &[f64]) -> f64 {
    t.windows(2)
        .zip(y.windows(2))
        .map(|(tw, yw)| 0.5 * (tw[1] - tw[0]) * (yw[0] + yw[1]))
        .sum()
}

/// `∫ E‖X_t - ν_t‖² dt` by the trapezoidal rule over the simulation grid.
pub fn guide_cost(ens: &TrajectoryEnsemble) -> f64 {
    let y: Vec<f64> = ens.stats.iter().map(|s| s.guide_sq).collect();
    trapezoid(&ens.times, &y)
}

/// First grid time at which `series` reaches half of its final value.
pub fn branching_time(times: &[f64], series: &[f64]) -> Option<f64> {
    let last = *series.last()?;
    times.iter().zip(series).find(|(_, v)| **v >= 0.5 * last).map(|(t, _)| *t)
}

/// Empirical block-trace series over the simulation grid.
pub fn empirical_block_traces(ens: &TrajectoryEnsemble, blocks: &[Range<usize>]) -> Vec<Vec<f64>> {
    blocks
        .iter()
        .map(|r| ens.stats.iter().map(|s| s.block_trace(r.clone())).collect())
        .collect()
}

/// Trace of the marginal covariance over a coordinate block.
pub fn analytic_block_trace(m: &MarginalMixture, r: Range<usize>) -> f64 {
    let c = m.covariance();
    r.map(|i| c[(i, i)]).sum()
}

/// Draw samples from a marginal mixture.
pub fn sample_marginal(m: &MarginalMixture, n: usize, rng: &mut impl Rng) -> Result<Vec<(usize, Vector)>> {
    let d = m.means[0].len();
    let chols: Vec<Mat> = m
        .precisions
        .iter()
        .map(|p| Spd::new(p, "marginal precision").map(|f| f.l()))
        .collect::<Result<_>>()?;
    let cum: Vec<f64> = m
        .weights
        .iter()
        .scan(0.0, |acc, w| {
            *acc += w;
            Some(*acc)
        })
        .collect();
    let total = *cum.last().unwrap();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let u: f64 = rng.random::<f64>() * total;
        let k = cum.partition_point(|c| *c < u).min(cum.len() - 1);
        let xi = Vector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        // Π = L Lᵀ, so L⁻ᵀ ξ has covariance Π⁻¹.
        let y = chols[k]
            .transpose()
            .solve_upper_triangular(&xi)
            .ok_or(Error::Singular("marginal precision factor"))?;
        out.push((k, &m.means[k] + y));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ControlDiagnostics {
    pub control_effort: f64,
    pub stiffness_integral: f64,
}

/// `∫ E‖u*‖² dt` and `∫ E‖∇u*‖²_F dt` by Monte Carlo over the closed-form marginal on a
/// uniform band grid.
pub fn control_diagnostics(
    ctx: &BridgeContext,
    source: &Source<'_>,
    nodes: usize,
    samples: usize,
    seed: u64,
) -> Result<ControlDiagnostics> {
    let times = sim_times(ctx.band(), nodes.max(2) - 1);
    let vals: Vec<(f64, f64)> = times
        .par_iter()
        .enumerate()
        .map(|(i, &t)| -> Result<(f64, f64)> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let mut effort = 0.0;
            let mut stiff = 0.0;
            match source {
                Source::Delta => {
                    let s = ctx.slice(t)?;
                    for (_, x) in sample_marginal(&s.marginal(), samples, &mut rng)? {
                        effort += s.score(&x).norm_squared();
                        stiff += s.score_jacobian(&x).norm_squared();
                    }
                }
                Source::Mixture { sources, props, frame } => {
                    let ss = ShiftedSlice::new(ctx, props, t, *frame)?;
                    let terms: Vec<_> = sources.iter().map(|z| ss.particle(ctx, z)).collect();
                    for _ in 0..samples {
                        let n = rng.random_range(0..sources.len());
                        let (means, w) = ss.particle_marginal(&terms[n]);
                        let m = MarginalMixture {
                            t,
                            weights: w,
                            means,
                            precisions: ss.slice.precisions(),
                        };
                        let (_, x) = sample_marginal(&m, 1, &mut rng)?.pop().unwrap();
                        let xw = &x - &terms[n].offset;
                        effort += ss.score(&terms[n], &xw).norm_squared();
                        stiff += ss.slice.score_jacobian_with(&terms[n].linear, &xw).norm_squared();
                    }
                }
            }
            Ok((effort / samples as f64, stiff / samples as f64))
        })
        .collect::<Result<_>>()?;
    let e: Vec<f64> = vals.iter().map(|v| v.0).collect();
    let s: Vec<f64> = vals.iter().map(|v| v.1).collect();
    Ok(ControlDiagnostics {
        control_effort: trapezoid(&times, &e),
        stiffness_integral: trapezoid(&times, &s),
    })
}
