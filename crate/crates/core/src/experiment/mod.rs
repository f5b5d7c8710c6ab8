//! Experiment drivers: each writes one run directory and returns its manifest.

mod corridor;
mod custom;
mod e3;
mod h1;

pub use corridor::{run_corridor, CorridorSummary, ProtocolReport};
pub use e3::{run_e3, E3Case, E3Summary, EmPipeline};
pub use h1::{build_hierarchical_target, codebook_sizes, run_h1, H1Row, H1Summary};

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::bridge::{GaussianMixture, MarginalMixture};
use crate::config::{ExperimentConfig, ExperimentId};
use crate::linalg::{Spd, Vector};
use crate::output::{num, RunManifest, RunWriter};
use crate::sampler::{mode_counts, sample_marginal};
use crate::Result;

/// The nine figure times.
pub const SNAPSHOT_TIMES: [f64; 9] = [0.0, 0.12, 0.25, 0.38, 0.50, 0.62, 0.75, 0.88, 1.0];

/// Early times of the entrance-merging panels.
pub const MERGE_TIMES: [f64; 7] = [0.0, 0.04, 0.08, 0.12, 0.16, 0.20, 0.25];

/// The E1/E2 bimodal target with its default constants.
pub fn corridor_target() -> GaussianMixture {
    ExperimentConfig::default().corridor_target().expect("default target is valid")
}

pub fn run(cfg: &ExperimentConfig, out: &Path) -> Result<RunManifest> {
    cfg.check()?;
    let writer = RunWriter::create(out)?;
    match cfg.experiment {
        ExperimentId::E1 | ExperimentId::E2 => run_corridor(cfg, writer).map(|(m, _)| m),
        ExperimentId::H1 => run_h1(cfg, writer).map(|(m, _)| m),
        ExperimentId::E3 => run_e3(cfg, writer).map(|(m, _)| m),
        ExperimentId::Custom => custom::run_custom(cfg, writer),
    }
}

/// `n` independent draws from a mixture.
pub fn draw_mixture(mix: &GaussianMixture, n: usize, seed: u64) -> Result<Vec<Vector>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chols: Vec<_> = mix
        .covariances
        .iter()
        .map(|c| Spd::new(c, "mixture covariance").map(|f| f.l()))
        .collect::<Result<_>>()?;
    let d = mix.dim();
    Ok((0..n)
        .map(|_| {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut k = mix.len() - 1;
            for (i, w) in mix.weights.iter().enumerate() {
                acc += w;
                if u < acc {
                    k = i;
                    break;
                }
            }
            let xi = Vector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
            &mix.means[k] + &chols[k] * xi
        })
        .collect())
}

/// Clip a figure time into the working band.
pub fn clip(t: f64, band: (f64, f64)) -> f64 {
    t.clamp(band.0, band.1)
}

/// Terminal mode frequencies and component-matched errors of an ensemble.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct EmpiricalTerminal {
    pub counts: Vec<usize>,
    pub weights: Vec<f64>,
    pub mean_error: f64,
    pub cov_error: f64,
}

pub fn empirical_terminal(samples: &[Vector], target: &GaussianMixture) -> EmpiricalTerminal {
    let counts = mode_counts(samples, target);
    let n = samples.len() as f64;
    let d = target.dim();
    let mut mean_error = 0.0f64;
    let mut cov_error = 0.0f64;
    for k in 0..target.len() {
        let group: Vec<&Vector> = samples
            .iter()
            .filter(|x| {
                let r = target.responsibilities(x);
                (0..r.len()).all(|j| r[j] <= r[k])
            })
            .collect();
        if group.len() < 2 {
            continue;
        }
        let m = group.iter().fold(Vector::zeros(d), |acc, x| acc + *x) / group.len() as f64;
        let mut c = crate::linalg::Mat::zeros(d, d);
        for x in &group {
            let dx = *x - &m;
            c += &dx * dx.transpose();
        }
        c /= (group.len() - 1) as f64;
        mean_error = mean_error.max((&m - &target.means[k]).norm());
        cov_error = cov_error.max(crate::linalg::max_abs(&(&c - &target.covariances[k])));
    }
    EmpiricalTerminal {
        weights: counts.iter().map(|c| *c as f64 / n).collect(),
        counts,
        mean_error,
        cov_error,
    }
}

/// Rows `(label, t, index, x_0..)` for a point cloud.
pub fn cloud_rows(label: &str, t: f64, xs: &[Vector]) -> Vec<Vec<String>> {
    xs.iter()
        .enumerate()
        .map(|(i, x)| {
            let mut r = vec![label.to_string(), num(t), i.to_string()];
            r.extend(x.iter().map(|v| num(*v)));
            r
        })
        .collect()
}

pub fn cloud_header(d: usize) -> Vec<String> {
    let mut h = vec!["protocol".to_string(), "t".into(), "index".into()];
    h.extend((0..d).map(|i| format!("x_{i}")));
    h
}

/// Samples from a marginal at each time (row blocks in time order).
pub fn marginal_samples(
    marginals: &[(f64, MarginalMixture)],
    n: usize,
    seed: u64,
) -> Result<Vec<(f64, Vec<Vector>)>> {
    let mut out = Vec::with_capacity(marginals.len());
    for (i, (t, m)) in marginals.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let xs = sample_marginal(m, n, &mut rng)?.into_iter().map(|(_, x)| x).collect();
        out.push((*t, xs));
    }
    Ok(out)
}

pub(crate) fn header_refs(h: &[String]) -> Vec<&str> {
    h.iter().map(|s| s.as_str()).collect()
}
