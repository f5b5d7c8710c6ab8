//! JSON experiment configuration.
//!
//! Every section has defaults, so a config file only needs the fields it changes:
//! `{"experiment": "e1"}` is a complete E1 configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bridge::{GaussianMixture, MixtureDoc};
use crate::linalg::Vector;
use crate::objective::LossConfig;
use crate::protocol::{
    CorridorGeometry, HierarchyStiffness, Protocol, ProtocolDoc, SigmaSchedule, StiffnessBand,
};
use crate::sampler::DriftModel;
use crate::shift::SourceFrame;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExperimentId {
    E1,
    E2,
    H1,
    E3,
    Custom,
}

impl ExperimentId {
    pub fn name(&self) -> &'static str {
        match self {
            ExperimentId::E1 => "e1",
            ExperimentId::E2 => "e2",
            ExperimentId::H1 => "h1",
            ExperimentId::E3 => "e3",
            ExperimentId::Custom => "custom",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerSettings {
    pub particles: usize,
    pub steps: usize,
}

impl Default for SamplerSettings {
    fn default() -> Self {
        SamplerSettings {
            particles: 4000,
            steps: 600,
        }
    }
}

/// EM step-halving check on the E1 baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WeakOrderSettings {
    pub particles: usize,
    pub coarse_steps: usize,
    /// Zero disables the check.
    pub seeds: usize,
}

impl Default for WeakOrderSettings {
    fn default() -> Self {
        WeakOrderSettings {
            particles: 20000,
            coarse_steps: 150,
            seeds: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorridorSettings {
    pub geometry: CorridorGeometry,
    pub band: StiffnessBand,
    pub intervals: usize,
    pub baseline_stiffness: f64,
    pub target: MixtureDoc,
    /// Skip the optimiser (baseline-only runs).
    pub optimize: bool,
}

impl Default for CorridorSettings {
    fn default() -> Self {
        CorridorSettings {
            geometry: CorridorGeometry::default(),
            band: StiffnessBand::default(),
            intervals: 10,
            baseline_stiffness: 3.0,
            target: bimodal(3.0, 0.5, 0.06),
            optimize: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SourceSettings {
    pub mixture: MixtureDoc,
    /// Frozen draws entering the objective.
    pub particles: usize,
    pub seed: u64,
    pub frame: SourceFrame,
}

impl Default for SourceSettings {
    fn default() -> Self {
        SourceSettings {
            mixture: bimodal(-0.3, 0.5, 0.12 * 0.12),
            particles: 60,
            seed: 42,
            frame: SourceFrame::Shifted,
        }
    }
}

/// Hierarchical target constants (block variances and codebook radii).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HierarchyTarget {
    pub trunk_variance: f64,
    pub branch_variance: f64,
    pub local_variance: f64,
    pub branch_radius: f64,
    pub local_radius: f64,
    pub trunk_travel: f64,
}

impl Default for HierarchyTarget {
    fn default() -> Self {
        HierarchyTarget {
            trunk_variance: 0.01,
            branch_variance: 0.04,
            local_variance: 0.09,
            branch_radius: 1.5,
            local_radius: 0.5,
            trunk_travel: 3.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct H1Settings {
    pub dims: Vec<usize>,
    pub modes: Vec<usize>,
    /// Mode count of the dimension sweep and dimension of the mode sweep.
    pub sweep_modes: usize,
    pub sweep_dim: usize,
    pub intervals: usize,
    pub t_star: f64,
    pub stiffness: HierarchyStiffness,
    pub target: HierarchyTarget,
    pub particles: usize,
    pub steps: usize,
    /// Closed-form times for the analytic subspace-variance traces.
    pub analytic_times: usize,
    /// Dimension used by `sweep` when no custom protocol is given.
    pub timing_dim: usize,
}

impl Default for H1Settings {
    fn default() -> Self {
        H1Settings {
            dims: vec![4, 8, 16, 32],
            modes: vec![2, 4, 8, 16],
            sweep_modes: 8,
            sweep_dim: 16,
            intervals: 12,
            t_star: 0.5,
            stiffness: HierarchyStiffness::default(),
            target: HierarchyTarget::default(),
            particles: 1024,
            steps: 600,
            analytic_times: 21,
            timing_dim: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct E3Settings {
    pub schedule: SigmaSchedule,
    /// Drift used by the EM mode-count runs.
    pub drift: DriftModel,
    /// Frame used by the EM mode-count runs.
    pub frame: SourceFrame,
    pub particles: usize,
    pub steps: usize,
    /// Also run the full-drift, direct-frame EM pipeline for comparison.
    pub compare_pipelines: bool,
    pub effort_nodes: usize,
    pub effort_samples: usize,
}

impl Default for E3Settings {
    fn default() -> Self {
        E3Settings {
            schedule: SigmaSchedule::default(),
            drift: DriftModel::ControlOnly,
            frame: SourceFrame::Shifted,
            particles: 400,
            steps: 600,
            compare_pipelines: true,
            effort_nodes: 101,
            effort_samples: 512,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CustomSettings {
    pub protocol: ProtocolDoc,
    pub target: MixtureDoc,
    pub source: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub experiment: ExperimentId,
    pub seed: u64,
    pub epsilon: f64,
    pub output: Option<PathBuf>,
    pub sampler: SamplerSettings,
    pub weak_order: WeakOrderSettings,
    pub loss: LossConfig,
    pub corridor: CorridorSettings,
    pub source: SourceSettings,
    pub h1: H1Settings,
    pub e3: E3Settings,
    pub custom: Option<CustomSettings>,
    /// Samples per snapshot time drawn from the closed-form marginal.
    pub snapshot_samples: usize,
    /// Monte-Carlo samples per time node for the kinetic term.
    pub kinetic_samples: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            experiment: ExperimentId::E1,
            seed: 7,
            epsilon: 1e-3,
            output: None,
            sampler: SamplerSettings::default(),
            weak_order: WeakOrderSettings::default(),
            loss: LossConfig::default(),
            corridor: CorridorSettings::default(),
            source: SourceSettings::default(),
            h1: H1Settings::default(),
            e3: E3Settings::default(),
            custom: None,
            snapshot_samples: 1000,
            kinetic_samples: 2048,
        }
    }
}

fn bimodal(x: f64, y: f64, var: f64) -> MixtureDoc {
    MixtureDoc {
        weights: vec![0.5, 0.5],
        means: vec![vec![x, y], vec![x, -y]],
        covariances: vec![vec![var, 0.0, 0.0, var]; 2],
    }
}

impl ExperimentConfig {
    pub fn for_experiment(id: ExperimentId) -> Self {
        ExperimentConfig {
            experiment: id,
            ..Default::default()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let cfg: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn check(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 0.05) {
            return Err(Error::Config(format!("epsilon {} outside (0, 0.05)", self.epsilon)));
        }
        if self.corridor.intervals < 3 {
            return Err(Error::Config("corridor needs at least 3 intervals".into()));
        }
        if self.sampler.steps < 2 || self.h1.steps < 2 || self.e3.steps < 2 {
            return Err(Error::Config("need at least 2 simulation steps".into()));
        }
        if self.experiment == ExperimentId::Custom && self.custom.is_none() {
            return Err(Error::Config("custom experiment needs a `custom` section".into()));
        }
        Ok(())
    }

    pub fn corridor_target(&self) -> Result<GaussianMixture> {
        GaussianMixture::from_doc(&self.corridor.target)
    }

    pub fn source_mixture(&self) -> Result<GaussianMixture> {
        GaussianMixture::from_doc(&self.source.mixture)
    }

    pub fn custom_problem(&self) -> Result<(Protocol, GaussianMixture, Vector)> {
        let c = self
            .custom
            .as_ref()
            .ok_or_else(|| Error::Config("no `custom` section".into()))?;
        let p = Protocol::from_doc(&c.protocol)?;
        let tgt = GaussianMixture::from_doc(&c.target)?;
        if c.source.len() != p.dim {
            return Err(Error::Dimension(format!("source has {} entries, protocol d = {}", c.source.len(), p.dim)));
        }
        Ok((p, tgt, Vector::from_column_slice(&c.source)))
    }
}
