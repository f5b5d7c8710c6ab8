//! E1 (delta source) and E2 (Gaussian-mixture source) corridor experiments.

use serde::{Deserialize, Serialize};

use super::{
    clip, cloud_header, cloud_rows, draw_mixture, empirical_terminal, header_refs, marginal_samples,
    EmpiricalTerminal, MERGE_TIMES, SNAPSHOT_TIMES,
};
use crate::bridge::{terminal_errors, BridgeContext, MarginalMixture};
use crate::config::{ExperimentConfig, ExperimentId};
use crate::linalg::Vector;
use crate::objective::{path_kinetic_costs, CorridorProblem, CorridorSource};
use crate::output::{num, RunManifest, RunWriter};
use crate::protocol::{baseline_protocol, CorridorParams, Protocol};
use crate::riccati::SweepOptions;
use crate::sampler::{control_diagnostics, sim_times, simulate, trapezoid, SimConfig, Source};
use crate::shift::{build_propagators, ShiftPropagators, ShiftedSlice};
use crate::Result;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProtocolReport {
    pub label: String,
    pub corridor_loss: f64,
    /// Component-matched terminal errors of the closed-form marginal at `T - ε`
    /// (mean over source particles for a mixture source).
    pub terminal_mean_error: f64,
    pub terminal_cov_error: f64,
    /// Worst particle, for a mixture source; equal to the above otherwise.
    pub terminal_mean_error_max: f64,
    pub terminal_cov_error_max: f64,
    /// Terminal marginal weight per target component.
    pub analytic_terminal_weights: Vec<f64>,
    /// Sum of all component weights of the assembled marginal at mid-horizon.
    pub marginal_weight_sum: f64,
    pub marginal_components: usize,
    pub j_path: f64,
    pub j_kin: f64,
    /// Monte-Carlo standard error of `j_kin`; absent for a mixture source.
    pub j_kin_stderr: Option<f64>,
    pub em: EmpiricalTerminal,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WeakOrder {
    pub steps: (usize, usize),
    pub particles: usize,
    pub seeds: usize,
    pub coarse_errors: Vec<f64>,
    pub fine_errors: Vec<f64>,
    pub coarse_mean: f64,
    pub fine_mean: f64,
    pub ratio: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CorridorSummary {
    pub experiment: String,
    pub baseline: ProtocolReport,
    pub warm_start: ProtocolReport,
    pub optimized: Option<ProtocolReport>,
    /// Relative corridor-loss reduction of the optimized protocol against the baseline.
    pub reduction: Option<f64>,
    pub best_iteration: Option<usize>,
    pub iterations: usize,
    pub optimized_params: Option<CorridorParams>,
    pub source_seed: Option<u64>,
    pub weak_order: Option<WeakOrder>,
}

/// Frozen source draws for the mixture-source experiments.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FrozenSources {
    pub seed: u64,
    pub points: Vec<Vec<f64>>,
}

pub(crate) fn corridor_problem(cfg: &ExperimentConfig, mixture_source: bool) -> Result<CorridorProblem> {
    let target = cfg.corridor_target()?;
    let source = if mixture_source {
        let points = draw_mixture(&cfg.source_mixture()?, cfg.source.particles, cfg.source.seed)?;
        CorridorSource::Particles {
            points,
            frame: cfg.source.frame,
        }
    } else {
        CorridorSource::Point(Vector::zeros(2))
    };
    let mut p = CorridorProblem::new(
        cfg.corridor.geometry.clone(),
        target,
        source,
        cfg.corridor.intervals,
        cfg.loss.clone(),
        SweepOptions::fast(cfg.epsilon),
    );
    p.band = cfg.corridor.band;
    Ok(p)
}

pub(crate) fn baseline(cfg: &ExperimentConfig) -> Protocol {
    baseline_protocol(
        cfg.corridor.intervals,
        cfg.corridor.geometry.length,
        cfg.corridor.baseline_stiffness,
    )
}

/// Everything needed to query one protocol of a corridor problem.
pub(crate) struct Evaluated {
    pub ctx: BridgeContext,
    pub props: Option<ShiftPropagators>,
}

impl Evaluated {
    pub fn new(prob: &CorridorProblem, protocol: &Protocol) -> Result<Self> {
        let ctx = prob.context(protocol)?;
        let props = match prob.source {
            CorridorSource::Particles { .. } => Some(build_propagators(&ctx)?),
            CorridorSource::Point(_) => None,
        };
        Ok(Evaluated { ctx, props })
    }

    pub fn marginal(&self, prob: &CorridorProblem, t: f64) -> Result<MarginalMixture> {
        let t = clip(t, self.ctx.band());
        match (&prob.source, &self.props) {
            (CorridorSource::Particles { points, frame }, Some(p)) => {
                crate::shift::shifted_marginal(&self.ctx, p, points, t, *frame)
            }
            _ => self.ctx.marginal(t),
        }
    }

    pub fn sim_source<'a>(&'a self, prob: &CorridorProblem, fresh: &'a [Vector]) -> Source<'a> {
        match (&prob.source, &self.props) {
            (CorridorSource::Particles { frame, .. }, Some(p)) => Source::Mixture {
                sources: fresh,
                props: p,
                frame: *frame,
            },
            _ => Source::Delta,
        }
    }

    pub fn objective_source<'a>(&'a self, prob: &'a CorridorProblem) -> Source<'a> {
        match (&prob.source, &self.props) {
            (CorridorSource::Particles { points, frame }, Some(p)) => Source::Mixture {
                sources: points,
                props: p,
                frame: *frame,
            },
            _ => Source::Delta,
        }
    }
}

/// Terminal accuracy of the closed-form marginal: per-particle for mixture sources.
pub(crate) fn analytic_terminal(
    prob: &CorridorProblem,
    ev: &Evaluated,
) -> Result<((f64, f64), (f64, f64), Vec<f64>)> {
    let target = &prob.target;
    let t = ev.ctx.band().1;
    match (&prob.source, &ev.props) {
        (CorridorSource::Particles { points, frame }, Some(p)) => {
            let ss = ShiftedSlice::new(&ev.ctx, p, t, *frame)?;
            let precisions = ss.slice.precisions();
            let mut sum = (0.0, 0.0);
            let mut worst = (0.0f64, 0.0f64);
            let mut weights = vec![0.0; target.len()];
            for z in points {
                let (means, w) = ss.particle_marginal(&ss.particle(&ev.ctx, z));
                for (k, wk) in w.iter().enumerate() {
                    weights[k] += wk / points.len() as f64;
                }
                let m = MarginalMixture {
                    t,
                    weights: w,
                    means,
                    precisions: precisions.clone(),
                };
                let (me, ce) = terminal_errors(&m, target);
                sum.0 += me / points.len() as f64;
                sum.1 += ce / points.len() as f64;
                worst = (worst.0.max(me), worst.1.max(ce));
            }
            Ok((sum, worst, weights))
        }
        _ => {
            let m = ev.ctx.marginal(t)?;
            let e = terminal_errors(&m, target);
            Ok((e, e, m.weights.clone()))
        }
    }
}

fn path_cost(prob: &CorridorProblem, ev: &Evaluated, nodes: usize) -> Result<f64> {
    let times = sim_times(ev.ctx.band(), nodes - 1);
    let protocol = ev.ctx.protocol();
    let mut vals = Vec::with_capacity(times.len());
    for &t in &times {
        let m = ev.marginal(prob, t)?;
        let nu = &protocol.intervals[protocol.grid.locate(t)].nu;
        let covs = m.covariances();
        vals.push(
            (0..m.weights.len())
                .map(|k| m.weights[k] * (covs[k].trace() + (&m.means[k] - nu).norm_squared()))
                .sum(),
        );
    }
    Ok(trapezoid(&times, &vals))
}

#[allow(clippy::too_many_arguments)]
fn report(
    cfg: &ExperimentConfig,
    prob: &CorridorProblem,
    label: &str,
    protocol: &Protocol,
    fresh: &[Vector],
    writer: &mut RunWriter,
    marginal_docs: &mut Vec<(String, f64, MarginalMixture)>,
    snapshots: &mut Vec<Vec<String>>,
    em_rows: &mut Vec<Vec<String>>,
) -> Result<ProtocolReport> {
    let corridor_loss = prob.corridor_loss_of(protocol)?;
    let ev = writer.timed("precompute", || Evaluated::new(prob, protocol))?;
    let ((me, ce), (me_max, ce_max), weights) = analytic_terminal(prob, &ev)?;
    let mid = ev.marginal(prob, 0.5)?;

    let nodes = 101;
    let (j_path, j_kin, j_kin_stderr) = match &prob.source {
        CorridorSource::Point(_) => {
            let pk = path_kinetic_costs(&ev.ctx, nodes, cfg.kinetic_samples, cfg.seed)?;
            (pk.path, pk.kinetic, Some(pk.kinetic_stderr))
        }
        CorridorSource::Particles { .. } => {
            let path = path_cost(prob, &ev, nodes)?;
            let cd = control_diagnostics(&ev.ctx, &ev.objective_source(prob), nodes, cfg.kinetic_samples, cfg.seed)?;
            (path, 0.5 * cd.control_effort, None)
        }
    };

    let mut times: Vec<f64> = SNAPSHOT_TIMES.to_vec();
    if cfg.experiment == ExperimentId::E2 {
        times.extend(MERGE_TIMES.iter().filter(|t| !SNAPSHOT_TIMES.contains(t)));
        times.sort_by(f64::total_cmp);
    }
    let mut margs = Vec::with_capacity(times.len());
    for &t in &times {
        margs.push((t, ev.marginal(prob, t)?));
    }
    for (t, xs) in marginal_samples(&margs, cfg.snapshot_samples, cfg.seed)? {
        snapshots.extend(cloud_rows(label, t, &xs));
    }
    marginal_docs.extend(margs.into_iter().map(|(t, m)| (label.to_string(), t, m)));

    let mut sim = SimConfig::new(cfg.sampler.particles, cfg.sampler.steps, cfg.seed);
    sim.snapshots = SNAPSHOT_TIMES.to_vec();
    let source = ev.sim_source(prob, fresh);
    let ens = writer.timed("sample", || simulate(&ev.ctx, &source, &sim))?;
    let keep = cfg.snapshot_samples.min(ens.particles());
    em_rows.extend(cloud_rows(label, 0.0, &ens.initial[..keep]));
    for (t, xs) in ens.snapshots.iter().filter(|(t, _)| *t > 0.0) {
        em_rows.extend(cloud_rows(label, *t, &xs[..keep]));
    }
    let em = empirical_terminal(&ens.terminal, &prob.target);

    Ok(ProtocolReport {
        label: label.to_string(),
        corridor_loss,
        terminal_mean_error: me,
        terminal_cov_error: ce,
        terminal_mean_error_max: me_max,
        terminal_cov_error_max: ce_max,
        analytic_terminal_weights: weights,
        marginal_weight_sum: mid.weights.iter().sum(),
        marginal_components: mid.weights.len(),
        j_path,
        j_kin,
        j_kin_stderr,
        em,
    })
}

/// EM terminal-mean error against the exact law at `T - ε`, at `N` and `2N` steps.
fn weak_order(cfg: &ExperimentConfig, ctx: &BridgeContext) -> Result<WeakOrder> {
    let w = &cfg.weak_order;
    let exact = ctx.marginal(ctx.band().1)?.mean();
    let err = |steps: usize, seed: u64| -> Result<f64> {
        let ens = simulate(ctx, &Source::Delta, &SimConfig::new(w.particles, steps, seed))?;
        Ok((ens.terminal_mean() - &exact).norm())
    };
    let mut coarse = Vec::new();
    let mut fine = Vec::new();
    for s in 0..w.seeds as u64 {
        coarse.push(err(w.coarse_steps, cfg.seed + 1000 + s)?);
        fine.push(err(2 * w.coarse_steps, cfg.seed + 1000 + s)?);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (cm, fm) = (mean(&coarse), mean(&fine));
    Ok(WeakOrder {
        steps: (w.coarse_steps, 2 * w.coarse_steps),
        particles: w.particles,
        seeds: w.seeds,
        coarse_errors: coarse,
        fine_errors: fine,
        coarse_mean: cm,
        fine_mean: fm,
        ratio: cm / fm,
    })
}

fn params_rows(prob: &CorridorProblem, params: &CorridorParams) -> Result<Vec<Vec<String>>> {
    let p = prob.protocol(params)?;
    let k = params.rho.len();
    Ok((0..k)
        .map(|i| {
            let s = (i as f64 + 0.5) / k as f64;
            let nu = &p.intervals[i].nu;
            vec![
                i.to_string(),
                num(s),
                num(params.rho[i]),
                num(params.c[i]),
                num(prob.band.transverse(params.c[i])),
                num(nu[0]),
                num(nu[1]),
            ]
        })
        .collect())
}

/// E1 or E2, depending on `cfg.experiment`.
pub fn run_corridor(cfg: &ExperimentConfig, mut writer: RunWriter) -> Result<(RunManifest, CorridorSummary)> {
    let mixture = cfg.experiment == ExperimentId::E2;
    let prob = corridor_problem(cfg, mixture)?;
    let fresh = draw_mixture(&cfg.source_mixture()?, cfg.sampler.particles, cfg.seed.wrapping_add(1))?;
    if let CorridorSource::Particles { points, .. } = &prob.source {
        writer.write_json(
            "sources.json",
            &FrozenSources {
                seed: cfg.source.seed,
                points: points.iter().map(|p| p.iter().copied().collect()).collect(),
            },
        )?;
    }

    let base = baseline(cfg);
    let warm = prob.warm_start();
    let mut docs = Vec::new();
    let mut snaps = Vec::new();
    let mut em_rows = Vec::new();
    let baseline_rep = report(cfg, &prob, "baseline", &base, &fresh, &mut writer, &mut docs, &mut snaps, &mut em_rows)?;
    let warm_protocol = prob.protocol(&warm)?;
    let warm_rep = report(cfg, &prob, "warm_start", &warm_protocol, &fresh, &mut writer, &mut docs, &mut snaps, &mut em_rows)?;
    writer.write_json("protocols/baseline.json", &base.to_doc())?;
    writer.write_json("protocols/warm_start.json", &warm_protocol.to_doc())?;

    let mut optimized = None;
    let mut best_iteration = None;
    let mut optimized_params = None;
    if cfg.corridor.optimize {
        let (best, trace) = writer.timed("optimize", || prob.optimize(&warm))?;
        let rows: Vec<Vec<String>> = trace
            .rows
            .iter()
            .map(|r| {
                vec![
                    r.iteration.to_string(),
                    num(r.corridor_loss),
                    num(r.total_loss),
                    num(r.gradient_norm),
                ]
            })
            .collect();
        writer.write_csv(
            "traces/optimization.csv",
            &["iteration", "corridor_loss", "total_loss", "gradient_norm"],
            &rows,
        )?;
        let p = prob.protocol(&best)?;
        writer.write_json("protocols/optimized.json", &p.to_doc())?;
        writer.write_json("params/optimized.json", &best)?;
        writer.write_csv(
            "traces/params.csv",
            &["k", "s", "rho", "c", "beta_perp", "nu_x", "nu_y"],
            &params_rows(&prob, &best)?,
        )?;
        optimized = Some(report(cfg, &prob, "optimized", &p, &fresh, &mut writer, &mut docs, &mut snaps, &mut em_rows)?);
        best_iteration = Some(trace.best_iteration);
        optimized_params = Some(best);
    }

    let weak = if !mixture && cfg.weak_order.seeds > 0 {
        let ctx = prob.context(&base)?;
        Some(weak_order(cfg, &ctx)?)
    } else {
        None
    };

    let header = cloud_header(2);
    writer.write_csv("snapshots/marginal_samples.csv", &header_refs(&header), &snaps)?;
    writer.write_csv("snapshots/em_particles.csv", &header_refs(&header), &em_rows)?;
    let marginal_json: Vec<serde_json::Value> = docs
        .iter()
        .map(|(label, t, m)| serde_json::json!({"protocol": label, "time": t, "marginal": m.to_doc()}))
        .collect();
    writer.write_json("snapshots/marginals.json", &marginal_json)?;
    let geom = &prob.geometry;
    let midline: Vec<Vec<String>> = (0..=200)
        .map(|i| {
            let s = i as f64 / 200.0;
            let m = geom.midline(s);
            vec![num(s), num(m[0]), num(m[1])]
        })
        .collect();
    writer.write_csv("traces/midline.csv", &["s", "m_x", "m_y"], &midline)?;

    let reduction = optimized
        .as_ref()
        .map(|o| 1.0 - o.corridor_loss / baseline_rep.corridor_loss);
    let summary = CorridorSummary {
        experiment: cfg.experiment.name().into(),
        baseline: baseline_rep,
        warm_start: warm_rep,
        optimized,
        reduction,
        best_iteration,
        iterations: cfg.loss.iterations,
        optimized_params,
        source_seed: mixture.then_some(cfg.source.seed),
        weak_order: weak,
    };
    writer.write_json("summary.json", &summary)?;
    let manifest = writer.finish(cfg)?;
    Ok((manifest, summary))
}
