//! A user-supplied protocol, target and point source.

use serde::{Deserialize, Serialize};

use super::{clip, cloud_header, cloud_rows, empirical_terminal, header_refs, marginal_samples, EmpiricalTerminal, SNAPSHOT_TIMES};
use crate::bridge::{terminal_errors, BridgeContext};
use crate::config::ExperimentConfig;
use crate::output::{RunManifest, RunWriter};
use crate::riccati::SweepOptions;
use crate::sampler::{guide_cost, simulate, tv_mode_error, SimConfig, Source};
use crate::Result;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CustomSummary {
    pub dim: usize,
    pub terminal_mean_error: f64,
    pub terminal_cov_error: f64,
    pub tv: f64,
    pub guide_cost: f64,
    pub em: EmpiricalTerminal,
}

pub fn run_custom(cfg: &ExperimentConfig, mut writer: RunWriter) -> Result<RunManifest> {
    let (protocol, target, source) = cfg.custom_problem()?;
    protocol.ensure_valid()?;
    let opts = SweepOptions::with_epsilon(cfg.epsilon);
    let ctx = writer.timed("precompute", || BridgeContext::new(&protocol, target.clone(), source, &opts))?;
    let band = ctx.band();
    let (me, ce) = terminal_errors(&ctx.marginal(band.1)?, &target);

    let mut margs = Vec::new();
    for &t in &SNAPSHOT_TIMES {
        margs.push((t, ctx.marginal(clip(t, band))?));
    }
    let mut rows = Vec::new();
    for (t, xs) in marginal_samples(&margs, cfg.snapshot_samples, cfg.seed)? {
        rows.extend(cloud_rows("custom", t, &xs));
    }

    let mut sim = SimConfig::new(cfg.sampler.particles, cfg.sampler.steps, cfg.seed);
    sim.snapshots = SNAPSHOT_TIMES.to_vec();
    let ens = writer.timed("sample", || simulate(&ctx, &Source::Delta, &sim))?;
    let mut em_rows = Vec::new();
    for (t, xs) in &ens.snapshots {
        em_rows.extend(cloud_rows("custom", *t, xs));
    }
    let header = cloud_header(protocol.dim);
    writer.write_csv("snapshots/marginal_samples.csv", &header_refs(&header), &rows)?;
    writer.write_csv("snapshots/em_particles.csv", &header_refs(&header), &em_rows)?;

    let summary = CustomSummary {
        dim: protocol.dim,
        terminal_mean_error: me,
        terminal_cov_error: ce,
        tv: tv_mode_error(&ens.terminal, &target),
        guide_cost: guide_cost(&ens),
        em: empirical_terminal(&ens.terminal, &target),
    };
    writer.write_json("summary.json", &summary)?;
    writer.finish(cfg)
}
