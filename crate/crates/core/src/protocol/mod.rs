//! Piecewise-constant protocols: grid, per-interval coefficients, validation,
//! special-case classification and JSON form.

mod corridor;
mod hierarchy;

pub use corridor::{
    baseline_protocol, build_corridor_protocol, logit, sigmoid, warm_start_c, CorridorGeometry,
    CorridorParams, StiffnessBand,
};
pub use hierarchy::{
    build_hierarchical_protocol, build_sigma_schedule, trunk_endpoint, BlockSplit,
    HierarchyStiffness, SigmaSchedule, Variant,
};

use serde::{Deserialize, Serialize};

use crate::linalg::{from_row_major, to_row_major, Mat, Vector};
use crate::{Error, Result};

const SYM_TOL: f64 = 1e-10;
const PSD_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct TimeGrid {
    breakpoints: Vec<f64>,
}

impl TimeGrid {
    /// Build a grid without validating it; see [`Protocol::validate`].
    pub fn new(breakpoints: Vec<f64>) -> Self {
        TimeGrid { breakpoints }
    }

    pub fn uniform(k: usize, horizon: f64) -> Self {
        let breakpoints = (0..=k).map(|i| horizon * i as f64 / k as f64).collect();
        TimeGrid { breakpoints }
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn intervals(&self) -> usize {
        self.breakpoints.len().saturating_sub(1)
    }

    pub fn horizon(&self) -> f64 {
        *self.breakpoints.last().unwrap_or(&0.0)
    }

    pub fn midpoints(&self) -> Vec<f64> {
        self.breakpoints
            .windows(2)
            .map(|w| 0.5 * (w[0] + w[1]))
            .collect()
    }

    /// Index of the interval containing `t`; breakpoints belong to the interval on their left,
    /// except t_0 which belongs to interval 0.
    pub fn locate(&self, t: f64) -> usize {
        let k = self.intervals();
        let pos = self.breakpoints[1..k].partition_point(|&b| b < t);
        pos.min(k - 1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProtocolInterval {
    pub beta: Mat,
    pub nu: Vector,
    pub sigma: Mat,
    pub kappa: f64,
}

impl ProtocolInterval {
    pub fn new(beta: Mat, nu: Vector, sigma: Mat, kappa: f64) -> Self {
        ProtocolInterval {
            beta,
            nu,
            sigma,
            kappa,
        }
    }

    pub fn dim(&self) -> usize {
        self.nu.len()
    }

    /// Drive vector βν.
    pub fn drive(&self) -> Vector {
        &self.beta * &self.nu
    }

    pub fn with_nu(&self, nu: Vector) -> Self {
        ProtocolInterval {
            nu,
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Protocol {
    pub grid: TimeGrid,
    pub intervals: Vec<ProtocolInterval>,
    pub dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub interval: Option<usize>,
    pub field: String,
    pub message: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.interval {
            Some(k) => write!(f, "interval {k}, {}: {}", self.field, self.message),
            None => write!(f, "{}: {}", self.field, self.message),
        }
    }
}

impl Protocol {
    pub fn new(grid: TimeGrid, intervals: Vec<ProtocolInterval>) -> Self {
        let dim = intervals.first().map(|iv| iv.dim()).unwrap_or(0);
        Protocol {
            grid,
            intervals,
            dim,
        }
    }

    pub fn len(&self) -> usize {
        self.intervals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.intervals.is_empty()
    }

    pub fn interval_bounds(&self, k: usize) -> (f64, f64) {
        let b = self.grid.breakpoints();
        (b[k], b[k + 1])
    }

    /// Copy of this protocol with every guide centre replaced.
    pub fn map_nu(&self, f: impl Fn(usize, &Vector) -> Vector) -> Protocol {
        let intervals = self
            .intervals
            .iter()
            .enumerate()
            .map(|(k, iv)| iv.with_nu(f(k, &iv.nu)))
            .collect();
        Protocol {
            grid: self.grid.clone(),
            intervals,
            dim: self.dim,
        }
    }

    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let mut push = |interval: Option<usize>, field: &str, message: String| {
            out.push(Violation {
                interval,
                field: field.to_string(),
                message,
            })
        };
        let b = self.grid.breakpoints();
        if b.len() < 2 {
            push(None, "grid", "need at least one interval".into());
        } else {
            if b[0] != 0.0 {
                push(None, "grid", format!("first breakpoint is {} (expected 0)", b[0]));
            }
            if b.windows(2).any(|w| !(w[1] > w[0])) {
                push(None, "grid", "breakpoints not strictly increasing".into());
            }
            if self.intervals.len() != b.len() - 1 {
                push(
                    None,
                    "intervals",
                    format!("{} intervals for {} grid cells", self.intervals.len(), b.len() - 1),
                );
            }
        }
        let d = self.dim;
        for (k, iv) in self.intervals.iter().enumerate() {
            let k = Some(k);
            if iv.nu.len() != d {
                push(k, "nu", format!("length {} != dim {d}", iv.nu.len()));
            }
            if iv.beta.shape() != (d, d) {
                push(k, "beta", format!("shape {:?} != ({d}, {d})", iv.beta.shape()));
                continue;
            }
            if iv.sigma.shape() != (d, d) {
                push(k, "sigma", format!("shape {:?} != ({d}, {d})", iv.sigma.shape()));
            }
            if iv.beta.iter().chain(iv.sigma.iter()).chain(iv.nu.iter()).any(|v| !v.is_finite()) {
                push(k, "values", "non-finite entry".into());
                continue;
            }
            let asym = crate::linalg::max_abs(&(&iv.beta - iv.beta.transpose()));
            if asym > SYM_TOL {
                push(k, "beta", format!("not symmetric (max asymmetry {asym:.3e})"));
            } else {
                let min_eig = crate::linalg::symmetrize(&iv.beta)
                    .symmetric_eigenvalues()
                    .min();
                if min_eig < -PSD_TOL {
                    push(k, "beta", format!("not positive semi-definite (min eigenvalue {min_eig:.3e})"));
                }
            }
            if !(iv.kappa > 0.0) || !iv.kappa.is_finite() {
                push(k, "kappa", format!("must be positive (got {})", iv.kappa));
            }
        }
        out
    }

    pub fn ensure_valid(&self) -> Result<()> {
        let v = self.validate();
        if v.is_empty() {
            Ok(())
        } else {
            let msg: Vec<String> = v.iter().map(|x| x.to_string()).collect();
            Err(Error::InvalidProtocol(msg.join("; ")))
        }
    }

    pub fn to_doc(&self) -> ProtocolDoc {
        ProtocolDoc {
            grid: self.grid.breakpoints().to_vec(),
            intervals: self
                .intervals
                .iter()
                .map(|iv| IntervalDoc {
                    beta: to_row_major(&iv.beta),
                    nu: iv.nu.iter().copied().collect(),
                    sigma: to_row_major(&iv.sigma),
                    kappa: iv.kappa,
                })
                .collect(),
            dim: self.dim,
        }
    }

    pub fn from_doc(doc: &ProtocolDoc) -> Result<Protocol> {
        let d = doc.dim;
        let mut intervals = Vec::with_capacity(doc.intervals.len());
        for (k, iv) in doc.intervals.iter().enumerate() {
            if iv.beta.len() != d * d || iv.sigma.len() != d * d || iv.nu.len() != d {
                return Err(Error::Config(format!(
                    "interval {k}: expected beta/sigma of length {} and nu of length {d}",
                    d * d
                )));
            }
            intervals.push(ProtocolInterval {
                beta: from_row_major(d, &iv.beta),
                nu: Vector::from_column_slice(&iv.nu),
                sigma: from_row_major(d, &iv.sigma),
                kappa: iv.kappa,
            });
        }
        Ok(Protocol {
            grid: TimeGrid::new(doc.grid.clone()),
            intervals,
            dim: d,
        })
    }
}

/// Serialized protocol: row-major matrices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolDoc {
    pub grid: Vec<f64>,
    pub intervals: Vec<IntervalDoc>,
    pub dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntervalDoc {
    pub beta: Vec<f64>,
    pub nu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub kappa: f64,
}

impl Serialize for Protocol {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_doc().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Protocol {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let doc = ProtocolDoc::deserialize(d)?;
        Protocol::from_doc(&doc).map_err(serde::de::Error::custom)
    }
}

/// Closed-form class of an interval, most specific first.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum SpecialCase {
    /// σ = 0 and β = b·I.
    Isotropic { b: f64 },
    /// σ = 0, β symmetric.
    ZeroDrift,
    /// σ = c·I with c ≠ 0, β symmetric.
    ScalarDrift { c: f64 },
    General,
}

impl SpecialCase {
    pub fn name(&self) -> &'static str {
        match self {
            SpecialCase::Isotropic { .. } => "isotropic",
            SpecialCase::ZeroDrift => "zero-drift",
            SpecialCase::ScalarDrift { .. } => "scalar-drift",
            SpecialCase::General => "general",
        }
    }

    /// Scalar drift rate c for the mode-wise solvers.
    pub fn drift_rate(&self) -> Option<f64> {
        match *self {
            SpecialCase::Isotropic { .. } | SpecialCase::ZeroDrift => Some(0.0),
            SpecialCase::ScalarDrift { c } => Some(c),
            SpecialCase::General => None,
        }
    }
}

fn scaled_identity(m: &Mat) -> Option<f64> {
    let c = m[(0, 0)];
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            let expect = if i == j { c } else { 0.0 };
            if m[(i, j)] != expect {
                return None;
            }
        }
    }
    Some(c)
}

pub fn classify_interval(iv: &ProtocolInterval) -> SpecialCase {
    match scaled_identity(&iv.sigma) {
        Some(c) if c == 0.0 => match scaled_identity(&iv.beta) {
            Some(b) => SpecialCase::Isotropic { b },
            None => SpecialCase::ZeroDrift,
        },
        Some(c) => SpecialCase::ScalarDrift { c },
        None => SpecialCase::General,
    }
}

/// Mode frequencies sqrt(κ b_i + c²) over the eigenvalues b_i of β, for the closed-form classes.
pub fn mode_frequencies(iv: &ProtocolInterval) -> Option<Vec<f64>> {
    let c = classify_interval(iv).drift_rate()?;
    let eig = crate::linalg::symmetrize(&iv.beta).symmetric_eigenvalues();
    Some(eig.iter().map(|b| (iv.kappa * b + c * c).max(0.0).sqrt()).collect())
}
