//! E3: the mixture-source corridor run under three fixed drift-matrix schedules.

use serde::{Deserialize, Serialize};

use super::corridor::{analytic_terminal, corridor_problem, Evaluated};
use super::{cloud_header, cloud_rows, draw_mixture, header_refs, SNAPSHOT_TIMES};
use crate::config::ExperimentConfig;
use crate::objective::CorridorSource;
use crate::output::{num, RunManifest, RunWriter};
use crate::protocol::build_sigma_schedule;
use crate::sampler::{control_diagnostics, mode_counts, mode_imbalance, simulate, tv_mode_error, DriftModel, SimConfig, Source};
use crate::shift::SourceFrame;
use crate::Result;

/// One EM mode-count run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EmPipeline {
    pub drift: DriftModel,
    pub frame: SourceFrame,
    pub counts: Vec<usize>,
    pub weights: Vec<f64>,
    /// `max_k |π̂_k - π_k| / π_k`.
    pub imbalance: f64,
    pub tv: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct E3Case {
    pub label: String,
    pub sign: f64,
    pub corridor_loss: f64,
    pub control_effort: f64,
    pub stiffness_integral: f64,
    pub analytic_weights: Vec<f64>,
    pub terminal_mean_error: f64,
    pub best_iteration: Option<usize>,
    /// The configured pipeline first, then the comparison pipeline if enabled.
    pub pipelines: Vec<EmPipeline>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct E3Summary {
    pub particles: usize,
    pub steps: usize,
    pub cases: Vec<E3Case>,
}

impl E3Summary {
    pub fn case(&self, label: &str) -> Option<&E3Case> {
        self.cases.iter().find(|c| c.label == label)
    }
}

pub const CASES: [(&str, f64); 3] = [("plus", 1.0), ("reference", 0.0), ("minus", -1.0)];

pub fn run_e3(cfg: &ExperimentConfig, mut writer: RunWriter) -> Result<(RunManifest, E3Summary)> {
    let e3 = &cfg.e3;
    let k = cfg.corridor.intervals;
    let fresh = draw_mixture(&cfg.source_mixture()?, e3.particles, cfg.seed.wrapping_add(1))?;

    let mut schedule_rows = Vec::new();
    for (label, sign) in CASES {
        for (i, s) in build_sigma_schedule(sign, &e3.schedule, k).iter().enumerate() {
            schedule_rows.push(vec![
                label.to_string(),
                i.to_string(),
                num((i as f64 + 0.5) / k as f64),
                num(s[(0, 0)]),
                num(s[(0, 1)]),
                num(s[(1, 1)]),
            ]);
        }
    }
    writer.write_csv("traces/sigma_schedule.csv", &["case", "k", "s", "a1", "b", "a2"], &schedule_rows)?;

    let mut pipelines = vec![(e3.drift, e3.frame)];
    if e3.compare_pipelines && (e3.drift, e3.frame) != (DriftModel::Full, SourceFrame::Direct) {
        pipelines.push((DriftModel::Full, SourceFrame::Direct));
    }

    let mut cases = Vec::new();
    let mut em_rows = Vec::new();
    for (label, sign) in CASES {
        let mut prob = corridor_problem(cfg, true)?;
        prob.sigma = (sign != 0.0).then(|| build_sigma_schedule(sign, &e3.schedule, k));
        let warm = prob.warm_start();
        let (params, best_iteration) = if cfg.corridor.optimize {
            let (best, trace) = writer.timed(&format!("optimize_{label}"), || prob.optimize(&warm))?;
            let rows: Vec<Vec<String>> = trace
                .rows
                .iter()
                .map(|r| vec![r.iteration.to_string(), num(r.corridor_loss), num(r.total_loss), num(r.gradient_norm)])
                .collect();
            writer.write_csv(
                &format!("traces/{label}_optimization.csv"),
                &["iteration", "corridor_loss", "total_loss", "gradient_norm"],
                &rows,
            )?;
            (best, Some(trace.best_iteration))
        } else {
            (warm, None)
        };
        let protocol = prob.protocol(&params)?;
        writer.write_json(&format!("protocols/{label}.json"), &protocol.to_doc())?;
        writer.write_json(&format!("params/{label}.json"), &params)?;

        let corridor_loss = prob.corridor_loss_of(&protocol)?;
        let ev = Evaluated::new(&prob, &protocol)?;
        let diag = control_diagnostics(&ev.ctx, &ev.objective_source(&prob), e3.effort_nodes, e3.effort_samples, cfg.seed)?;
        let ((mean_err, _), _, analytic_weights) = analytic_terminal(&prob, &ev)?;
        let props = ev.props.as_ref().expect("mixture source builds propagators");

        let mut runs = Vec::new();
        for (pi, &(drift, frame)) in pipelines.iter().enumerate() {
            let mut sim = SimConfig::new(e3.particles, e3.steps, cfg.seed);
            sim.drift = drift;
            if pi == 0 {
                sim.snapshots = SNAPSHOT_TIMES.to_vec();
            }
            let source = Source::Mixture { sources: &fresh, props, frame };
            let ens = writer.timed("sample", || simulate(&ev.ctx, &source, &sim))?;
            if pi == 0 {
                em_rows.extend(cloud_rows(label, 0.0, &ens.initial));
                for (t, xs) in ens.snapshots.iter().filter(|(t, _)| *t > 0.0) {
                    em_rows.extend(cloud_rows(label, *t, xs));
                }
            }
            let counts = mode_counts(&ens.terminal, &prob.target);
            runs.push(EmPipeline {
                drift,
                frame,
                weights: counts.iter().map(|c| *c as f64 / e3.particles as f64).collect(),
                counts,
                imbalance: mode_imbalance(&ens.terminal, &prob.target),
                tv: tv_mode_error(&ens.terminal, &prob.target),
            });
        }
        debug_assert!(matches!(prob.source, CorridorSource::Particles { .. }));
        cases.push(E3Case {
            label: label.into(),
            sign,
            corridor_loss,
            control_effort: diag.control_effort,
            stiffness_integral: diag.stiffness_integral,
            analytic_weights,
            terminal_mean_error: mean_err,
            best_iteration,
            pipelines: runs,
        });
    }
    let header = cloud_header(2);
    writer.write_csv("snapshots/em_particles.csv", &header_refs(&header), &em_rows)?;
    let summary = E3Summary {
        particles: e3.particles,
        steps: e3.steps,
        cases,
    };
    writer.write_json("summary.json", &summary)?;
    let manifest = writer.finish(cfg)?;
    Ok((manifest, summary))
}
