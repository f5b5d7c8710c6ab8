//! Trunk/branch/local block protocols and the fixed drift schedules.

use std::f64::consts::PI;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::{Protocol, ProtocolInterval, TimeGrid};
use crate::linalg::{Mat, Vector};
use crate::{Error, Result};

/// Coordinate split into trunk, branch and local blocks (in that order).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSplit {
    pub trunk: usize,
    pub branch: usize,
    pub local: usize,
}

impl BlockSplit {
    pub fn new(trunk: usize, branch: usize, local: usize) -> Self {
        BlockSplit {
            trunk,
            branch,
            local,
        }
    }

    /// Default split: (1, 2, 1) at d = 4, otherwise (2, 2, d - 4).
    pub fn for_dim(d: usize) -> Self {
        if d <= 4 {
            BlockSplit::new(1, 2, d.saturating_sub(3))
        } else {
            BlockSplit::new(2, 2, d - 4)
        }
    }

    pub fn dim(&self) -> usize {
        self.trunk + self.branch + self.local
    }

    pub fn trunk_range(&self) -> Range<usize> {
        0..self.trunk
    }

    pub fn branch_range(&self) -> Range<usize> {
        self.trunk..self.trunk + self.branch
    }

    pub fn local_range(&self) -> Range<usize> {
        self.trunk + self.branch..self.dim()
    }

    pub fn ranges(&self) -> [Range<usize>; 3] {
        [self.trunk_range(), self.branch_range(), self.local_range()]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// Isotropic stiffness.
    B0,
    /// Block-diagonal stiffness, constant in time.
    B1,
    /// B1 with the branch block held stiff until the release time, then loosened.
    B2,
}

impl Variant {
    pub fn name(&self) -> &'static str {
        match self {
            Variant::B0 => "B0",
            Variant::B1 => "B1",
            Variant::B2 => "B2",
        }
    }

    pub fn all() -> [Variant; 3] {
        [Variant::B0, Variant::B1, Variant::B2]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HierarchyStiffness {
    pub isotropic: f64,
    pub trunk: f64,
    pub branch: f64,
    pub local: f64,
    pub branch_hold: f64,
    pub branch_release: f64,
}

impl Default for HierarchyStiffness {
    fn default() -> Self {
        HierarchyStiffness {
            isotropic: 2.0,
            trunk: 0.5,
            branch: 4.0,
            local: 4.0,
            branch_hold: 6.0,
            branch_release: 1.0,
        }
    }
}

/// Trunk endpoint with norm `travel` spread evenly over the trunk coordinates.
pub fn trunk_endpoint(split: &BlockSplit, travel: f64) -> Vector {
    let mut mu = Vector::zeros(split.dim());
    let v = travel / (split.trunk as f64).sqrt();
    for i in split.trunk_range() {
        mu[i] = v;
    }
    mu
}

/// Block protocol with guide `min(2t, 1)·μ_trunk` evaluated at interval midpoints.
pub fn build_hierarchical_protocol(
    dim: usize,
    split: &BlockSplit,
    variant: Variant,
    stiffness: &HierarchyStiffness,
    t_star: f64,
    k: usize,
    trunk_travel: f64,
) -> Result<Protocol> {
    if split.dim() != dim {
        return Err(Error::Dimension(format!(
            "block split {}+{}+{} does not add up to d = {dim}",
            split.trunk, split.branch, split.local
        )));
    }
    let grid = TimeGrid::uniform(k, 1.0);
    let release = t_star * k as f64;
    if (release - release.round()).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "release time {t_star} is not a breakpoint of the {k}-interval grid"
        )));
    }
    let mu = trunk_endpoint(split, trunk_travel);
    let intervals = grid
        .midpoints()
        .iter()
        .map(|&s| {
            let mut diag = Vector::zeros(dim);
            match variant {
                Variant::B0 => diag.fill(stiffness.isotropic),
                Variant::B1 | Variant::B2 => {
                    let branch = match variant {
                        Variant::B1 => stiffness.branch,
                        _ if s < t_star => stiffness.branch_hold,
                        _ => stiffness.branch_release,
                    };
                    for i in split.trunk_range() {
                        diag[i] = stiffness.trunk;
                    }
                    for i in split.branch_range() {
                        diag[i] = branch;
                    }
                    for i in split.local_range() {
                        diag[i] = stiffness.local;
                    }
                }
            }
            ProtocolInterval::new(
                Mat::from_diagonal(&diag),
                &mu * (2.0 * s).min(1.0),
                Mat::zeros(dim, dim),
                1.0,
            )
        })
        .collect();
    Ok(Protocol::new(grid, intervals))
}

/// Smooth symmetric 2×2 drift schedule with a sin⁴ envelope.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SigmaSchedule {
    pub alpha: f64,
    pub mean: f64,
    pub anisotropy: f64,
    pub coupling: f64,
}

impl Default for SigmaSchedule {
    fn default() -> Self {
        SigmaSchedule {
            alpha: 0.05,
            mean: 1.0,
            anisotropy: 0.5,
            coupling: 0.4,
        }
    }
}

impl SigmaSchedule {
    pub fn at(&self, sign: f64, s: f64) -> Mat {
        let env = sign * self.alpha * (PI * s).sin().powi(4);
        let (c, sn) = ((2.0 * PI * s).cos(), (2.0 * PI * s).sin());
        let off = self.coupling * sn;
        Mat::from_row_slice(
            2,
            2,
            &[
                env * (self.mean + self.anisotropy * c),
                env * off,
                env * off,
                env * (self.mean - self.anisotropy * c),
            ],
        )
    }
}

/// Drift matrices at the midpoints of a uniform K-interval grid.
pub fn build_sigma_schedule(sign: f64, schedule: &SigmaSchedule, k: usize) -> Vec<Mat> {
    TimeGrid::uniform(k, 1.0)
        .midpoints()
        .iter()
        .map(|&s| schedule.at(sign, s))
        .collect()
}
