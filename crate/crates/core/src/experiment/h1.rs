//! H1: dimension and mode-count sweeps over trunk/branch/local block protocols.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::ops::Range;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{cloud_header, cloud_rows, header_refs, SNAPSHOT_TIMES};
use crate::bridge::{BridgeContext, GaussianMixture, MarginalMixture};
use crate::config::{ExperimentConfig, HierarchyTarget};
use crate::linalg::{Mat, Vector};
use crate::output::{num, RunManifest, RunWriter};
use crate::protocol::{build_hierarchical_protocol, trunk_endpoint, BlockSplit, Protocol, Variant};
use crate::riccati::SweepOptions;
use crate::sampler::{
    analytic_block_trace, branching_time, empirical_block_traces, guide_cost, nearest_index, sim_times, simulate,
    tv_mode_error, SimConfig, Source,
};
use crate::{Error, Result};

/// Branch and local codebook sizes `(B, L)` with `B·L = M`.
pub fn codebook_sizes(modes: usize) -> Result<(usize, usize)> {
    let b = if modes <= 4 { 2 } else { 4 };
    if modes < 2 || !modes.is_multiple_of(b) {
        return Err(Error::Config(format!("unsupported mode count {modes}")));
    }
    Ok((b, modes / b))
}

/// Equal-weight product codebook: trunk endpoint ⊕ branch direction ⊕ local offset.
pub fn build_hierarchical_target(split: &BlockSplit, modes: usize, c: &HierarchyTarget) -> Result<GaussianMixture> {
    let (nb, nl) = codebook_sizes(modes)?;
    if nl > 1 && nl > 2 * split.local {
        return Err(Error::Config(format!(
            "{nl} local offsets do not fit a {}-dimensional local block",
            split.local
        )));
    }
    let d = split.dim();
    let trunk = trunk_endpoint(split, c.trunk_travel);
    let (b0, l0) = (split.branch_range().start, split.local_range().start);
    let mut var = Vector::zeros(d);
    for (range, v) in split.ranges().into_iter().zip([c.trunk_variance, c.branch_variance, c.local_variance]) {
        for i in range {
            var[i] = v;
        }
    }
    let cov = Mat::from_diagonal(&var);
    let mut means = Vec::with_capacity(modes);
    for j in 0..nb {
        let angle = PI / 4.0 + 2.0 * PI * j as f64 / nb as f64;
        for l in 0..nl {
            let mut m = trunk.clone();
            if split.branch >= 2 {
                m[b0] += c.branch_radius * angle.cos();
                m[b0 + 1] += c.branch_radius * angle.sin();
            } else {
                m[b0] += c.branch_radius * angle.cos().signum();
            }
            if nl > 1 {
                let sign = if l % 2 == 0 { 1.0 } else { -1.0 };
                m[l0 + l / 2] += sign * c.local_radius;
            }
            means.push(m);
        }
    }
    GaussianMixture::uniform(means, vec![cov; modes])
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct H1Row {
    pub dim: usize,
    pub modes: usize,
    pub variant: Variant,
    pub split: BlockSplit,
    pub seed: u64,
    pub tv: f64,
    pub guide_cost: f64,
    /// From the empirical branch-block trace.
    pub branching_time: Option<f64>,
    /// From the closed-form branch-block trace on the same grid.
    pub analytic_branching_time: Option<f64>,
    /// Trunk, branch, local block traces of the closed-form terminal marginal.
    pub terminal_traces: [f64; 3],
    pub empirical_terminal_traces: [f64; 3],
    /// Within-mode variance per coordinate of each block at the terminal time: closed form,
    /// and from the ensemble grouped by most responsible target mode.
    pub terminal_block_variances: [f64; 3],
    pub empirical_block_variances: [f64; 3],
    /// Largest relative gap between empirical and closed-form block traces on the comparison grid.
    pub trace_gap: f64,
}

impl H1Row {
    /// Terminal block-variance ordering trunk < branch < local.
    pub fn ordered(&self) -> bool {
        let t = self.terminal_block_variances;
        t[0] < t[1] && t[1] < t[2]
    }

    fn tag(&self) -> String {
        scenario_tag(self.dim, self.modes, self.variant)
    }
}

fn scenario_tag(d: usize, m: usize, v: Variant) -> String {
    format!("d{d}_m{m}_{}", v.name())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct H1Summary {
    pub particles: usize,
    pub steps: usize,
    pub target: HierarchyTarget,
    pub rows: Vec<H1Row>,
}

impl H1Summary {
    pub fn row(&self, dim: usize, modes: usize, variant: Variant) -> Option<&H1Row> {
        self.rows
            .iter()
            .find(|r| r.dim == dim && r.modes == modes && r.variant == variant)
    }
}

struct Scenario {
    dim: usize,
    modes: usize,
    variant: Variant,
    split: BlockSplit,
    protocol: Protocol,
    target: GaussianMixture,
}

fn scenarios(cfg: &ExperimentConfig) -> Result<Vec<Scenario>> {
    let h = &cfg.h1;
    let mut keys = BTreeSet::new();
    for &d in &h.dims {
        keys.insert((d, h.sweep_modes));
    }
    for &m in &h.modes {
        keys.insert((h.sweep_dim, m));
    }
    let mut out = Vec::new();
    for (dim, modes) in keys {
        let split = BlockSplit::for_dim(dim);
        let target = build_hierarchical_target(&split, modes, &h.target)?;
        for variant in Variant::all() {
            let protocol = build_hierarchical_protocol(
                dim,
                &split,
                variant,
                &h.stiffness,
                h.t_star,
                h.intervals,
                h.target.trunk_travel,
            )?;
            out.push(Scenario {
                dim,
                modes,
                variant,
                split,
                protocol,
                target: target.clone(),
            });
        }
    }
    Ok(out)
}

/// Best-of-`repeats` wall time of both sweeps.
fn precompute_ms(s: &Scenario, opts: &SweepOptions, repeats: usize) -> Result<f64> {
    let x0 = Vector::zeros(s.dim);
    let mut best = f64::INFINITY;
    for _ in 0..repeats {
        let start = Instant::now();
        let ctx = BridgeContext::new(&s.protocol, s.target.clone(), x0.clone(), opts)?;
        std::hint::black_box(&ctx);
        best = best.min(start.elapsed().as_secs_f64() * 1e3);
    }
    Ok(best)
}

struct ScenarioOutput {
    row: H1Row,
    trace_rows: Vec<Vec<String>>,
    cloud: Vec<Vec<String>>,
}

fn run_scenario(cfg: &ExperimentConfig, s: &Scenario, opts: &SweepOptions, snapshots: bool) -> Result<ScenarioOutput> {
    let h = &cfg.h1;
    let ctx = BridgeContext::new(&s.protocol, s.target.clone(), Vector::zeros(s.dim), opts)?;
    let seed = cfg.seed.wrapping_add(1000 * s.dim as u64 + s.modes as u64);
    let mut sim = SimConfig::new(h.particles, h.steps, seed);
    if snapshots {
        sim.snapshots = SNAPSHOT_TIMES.to_vec();
    }
    let ens = simulate(&ctx, &Source::Delta, &sim)?;
    let blocks = s.split.ranges();
    let emp = empirical_block_traces(&ens, &blocks);

    let band = ctx.band();
    let mut ana: Vec<Vec<f64>> = (0..3).map(|_| Vec::with_capacity(ens.times.len())).collect();
    let mut ana_times = Vec::new();
    for (i, &t) in ens.times.iter().enumerate() {
        if i % 6 != 0 && i + 1 != ens.times.len() {
            continue;
        }
        let m = ctx.marginal(t)?;
        for (b, r) in blocks.iter().enumerate() {
            ana[b].push(analytic_block_trace(&m, r.clone()));
        }
        ana_times.push(t);
    }

    let mut gap = 0.0f64;
    let lo = 0.05f64.max(band.0);
    let hi = 0.95f64.min(band.1);
    for t in sim_times((lo, hi), h.analytic_times.max(2) - 1) {
        let j = nearest_index(&ens.times, t);
        let m = ctx.marginal(ens.times[j])?;
        for (b, r) in blocks.iter().enumerate() {
            let a = analytic_block_trace(&m, r.clone());
            gap = gap.max((emp[b][j] - a).abs() / a);
        }
    }

    let terminal = ctx.marginal(band.1)?;
    let tt = |b: usize| analytic_block_trace(&terminal, blocks[b].clone());
    let last = ens.times.len() - 1;
    let row = H1Row {
        dim: s.dim,
        modes: s.modes,
        variant: s.variant,
        split: s.split,
        seed,
        tv: tv_mode_error(&ens.terminal, &s.target),
        guide_cost: guide_cost(&ens),
        branching_time: branching_time(&ens.times, &emp[1]),
        analytic_branching_time: branching_time(&ana_times, &ana[1]),
        terminal_traces: [tt(0), tt(1), tt(2)],
        terminal_block_variances: within_mode_analytic(&terminal, &blocks),
        empirical_block_variances: within_mode_empirical(&ens.terminal, &s.target, &blocks),
        empirical_terminal_traces: [emp[0][last], emp[1][last], emp[2][last]],
        trace_gap: gap,
    };

    let mut k = 0;
    let trace_rows = ens
        .times
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let mut r = vec![num(t), num(emp[0][i]), num(emp[1][i]), num(emp[2][i])];
            if k < ana_times.len() && ana_times[k] == t {
                r.extend((0..3).map(|b| num(ana[b][k])));
                k += 1;
            } else {
                r.extend(std::iter::repeat_n(String::new(), 3));
            }
            r
        })
        .collect();

    let mut cloud = Vec::new();
    if snapshots {
        let tag = row.tag();
        cloud.extend(cloud_rows(&tag, 0.0, &ens.initial));
        for (t, xs) in ens.snapshots.iter().filter(|(t, _)| *t > 0.0) {
            cloud.extend(cloud_rows(&tag, *t, xs));
        }
    }
    Ok(ScenarioOutput { row, trace_rows, cloud })
}

fn within_mode_analytic(m: &MarginalMixture, blocks: &[Range<usize>; 3]) -> [f64; 3] {
    let covs = m.covariances();
    let total: f64 = m.weights.iter().sum();
    let mut out = [0.0; 3];
    for (b, r) in blocks.iter().enumerate() {
        let acc: f64 = covs
            .iter()
            .zip(&m.weights)
            .map(|(c, w)| w * r.clone().map(|i| c[(i, i)]).sum::<f64>())
            .sum();
        out[b] = acc / (total * r.len().max(1) as f64);
    }
    out
}

fn within_mode_empirical(xs: &[Vector], target: &GaussianMixture, blocks: &[Range<usize>; 3]) -> [f64; 3] {
    let mut groups: Vec<Vec<&Vector>> = vec![Vec::new(); target.len()];
    for x in xs {
        let r = target.responsibilities(x);
        let k = (0..r.len()).fold(0, |best, j| if r[j] > r[best] { j } else { best });
        groups[k].push(x);
    }
    let mut out = [0.0; 3];
    for (b, r) in blocks.iter().enumerate() {
        let mut acc = 0.0;
        let mut n = 0usize;
        for g in groups.iter().filter(|g| g.len() > 1) {
            for i in r.clone() {
                let mean = g.iter().map(|x| x[i]).sum::<f64>() / g.len() as f64;
                acc += g.iter().map(|x| (x[i] - mean).powi(2)).sum::<f64>();
            }
            n += g.len() - 1;
        }
        out[b] = acc / (n.max(1) * r.len().max(1)) as f64;
    }
    out
}

pub fn run_h1(cfg: &ExperimentConfig, mut writer: RunWriter) -> Result<(RunManifest, H1Summary)> {
    let h = &cfg.h1;
    let opts = SweepOptions::fast(cfg.epsilon);
    let list = scenarios(cfg)?;

    // Sweep timings are taken one scenario at a time, before the pool starts.
    for s in &list {
        let ms = precompute_ms(s, &opts, 5)?;
        writer.record_ms(format!("precompute_{}", scenario_tag(s.dim, s.modes, s.variant)), ms);
    }

    let start = Instant::now();
    let outputs: Vec<ScenarioOutput> = list
        .par_iter()
        .map(|s| run_scenario(cfg, s, &opts, s.dim == h.sweep_dim && s.modes == h.sweep_modes))
        .collect::<Result<_>>()?;
    writer.record_ms("scenarios", start.elapsed().as_secs_f64() * 1e3);

    let mut table = Vec::new();
    let mut rows = Vec::new();
    let mut clouds: Vec<(usize, Vec<Vec<String>>)> = Vec::new();
    for out in outputs {
        let r = &out.row;
        let opt = |v: Option<f64>| v.map(num).unwrap_or_default();
        table.push(vec![
            r.dim.to_string(),
            r.modes.to_string(),
            r.variant.name().to_string(),
            num(r.tv),
            num(r.guide_cost),
            opt(r.branching_time),
            opt(r.analytic_branching_time),
            num(r.terminal_traces[0]),
            num(r.terminal_traces[1]),
            num(r.terminal_traces[2]),
            num(r.terminal_block_variances[0]),
            num(r.terminal_block_variances[1]),
            num(r.terminal_block_variances[2]),
            num(r.trace_gap),
        ]);
        writer.write_csv(
            &format!("traces/h1_{}.csv", r.tag()),
            &["t", "emp_trunk", "emp_branch", "emp_local", "ana_trunk", "ana_branch", "ana_local"],
            &out.trace_rows,
        )?;
        if !out.cloud.is_empty() {
            clouds.push((r.dim, out.cloud));
        }
        rows.push(out.row);
    }
    writer.write_csv(
        "h1_table.csv",
        &[
            "d",
            "M",
            "protocol",
            "tv",
            "guide_cost",
            "branching_time",
            "analytic_branching_time",
            "trunk_trace",
            "branch_trace",
            "local_trace",
            "trunk_variance",
            "branch_variance",
            "local_variance",
            "trace_gap",
        ],
        &table,
    )?;
    if let Some((d, _)) = clouds.first() {
        let header = cloud_header(*d);
        let all: Vec<Vec<String>> = clouds.into_iter().flat_map(|(_, c)| c).collect();
        writer.write_csv("snapshots/h1_particles.csv", &header_refs(&header), &all)?;
    }

    let summary = H1Summary {
        particles: h.particles,
        steps: h.steps,
        target: h.target,
        rows,
    };
    writer.write_json("summary.json", &summary)?;
    let manifest = writer.finish(cfg)?;
    Ok((manifest, summary))
}
