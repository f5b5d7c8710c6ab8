//! Two-dimensional corridor geometry and the corridor-aligned protocol family.

use serde::{Deserialize, Serialize};

use super::{Protocol, ProtocolInterval, TimeGrid};
use crate::linalg::{Mat, Vector};
use crate::{Error, Result};

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Up-and-back midline `s -> (L s, A [tanh(k(s-s1)) - tanh(k(s-s2))])`.
///
/// With `anchored` the linear interpolant of the endpoint offsets is removed from the
/// transverse coordinate, so the midline starts at the origin and ends at `(L, 0)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorridorGeometry {
    pub amplitude: f64,
    pub steepness: f64,
    pub length: f64,
    pub lobes: (f64, f64),
    pub kernel_widths: (f64, f64),
    pub anchored: bool,
}

impl Default for CorridorGeometry {
    fn default() -> Self {
        CorridorGeometry {
            amplitude: 0.7,
            steepness: 6.0,
            length: 3.0,
            lobes: (0.30, 0.70),
            kernel_widths: (0.8, 0.2),
            anchored: true,
        }
    }
}

impl CorridorGeometry {
    fn raw_offset(&self, s: f64) -> f64 {
        let k = self.steepness;
        self.amplitude * ((k * (s - self.lobes.0)).tanh() - (k * (s - self.lobes.1)).tanh())
    }

    fn raw_slope(&self, s: f64) -> f64 {
        let k = self.steepness;
        let sech2 = |u: f64| 1.0 / u.cosh().powi(2);
        self.amplitude * k * (sech2(k * (s - self.lobes.0)) - sech2(k * (s - self.lobes.1)))
    }

    pub fn midline(&self, s: f64) -> Vector {
        let mut y = self.raw_offset(s);
        if self.anchored {
            let (y0, y1) = (self.raw_offset(0.0), self.raw_offset(1.0));
            y -= (1.0 - s) * y0 + s * y1;
        }
        Vector::from_vec(vec![self.length * s, y])
    }

    pub fn tangent(&self, s: f64) -> Vector {
        let mut dy = self.raw_slope(s);
        if self.anchored {
            dy -= self.raw_offset(1.0) - self.raw_offset(0.0);
        }
        Vector::from_vec(vec![self.length, dy]).normalize()
    }

    /// Left-hand unit normal.
    pub fn normal(&self, s: f64) -> Vector {
        let t = self.tangent(s);
        Vector::from_vec(vec![-t[1], t[0]])
    }

    /// Orthonormal frame [t | n].
    pub fn frame(&self, s: f64) -> Mat {
        let t = self.tangent(s);
        Mat::from_column_slice(2, 2, &[t[0], t[1], -t[1], t[0]])
    }

    /// Alignment-kernel matrix Q diag(ω∥⁻², ω⊥⁻²) Qᵀ at `s`.
    pub fn kernel_matrix(&self, s: f64) -> Mat {
        let q = self.frame(s);
        let (wp, wn) = self.kernel_widths;
        let d = Mat::from_diagonal(&Vector::from_vec(vec![wp.powi(-2), wn.powi(-2)]));
        &q * d * q.transpose()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StiffnessBand {
    pub parallel: f64,
    pub min: f64,
    pub max: f64,
}

impl Default for StiffnessBand {
    fn default() -> Self {
        StiffnessBand {
            parallel: 0.2,
            min: 2.0,
            max: 60.0,
        }
    }
}

impl StiffnessBand {
    pub fn transverse(&self, c: f64) -> f64 {
        self.min + (self.max - self.min) * sigmoid(c)
    }
}

/// Trainable corridor parameters: transverse guide offsets and unconstrained stiffness logits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorridorParams {
    pub rho: Vec<f64>,
    pub c: Vec<f64>,
}

impl CorridorParams {
    pub fn warm_start(k: usize, band: &StiffnessBand, beta_init: f64) -> Self {
        CorridorParams {
            rho: vec![0.0; k],
            c: vec![warm_start_c(band, beta_init); k],
        }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.rho.iter().chain(self.c.iter()).copied().collect()
    }

    pub fn from_slice(v: &[f64]) -> Self {
        let k = v.len() / 2;
        CorridorParams {
            rho: v[..k].to_vec(),
            c: v[k..].to_vec(),
        }
    }
}

/// Logit placing the transverse stiffness at `beta_init` inside the band.
pub fn warm_start_c(band: &StiffnessBand, beta_init: f64) -> f64 {
    logit((beta_init - band.min) / (band.max - band.min))
}

pub fn build_corridor_protocol(
    geom: &CorridorGeometry,
    params: &CorridorParams,
    band: &StiffnessBand,
) -> Result<Protocol> {
    let k = params.rho.len();
    if k == 0 || params.c.len() != k {
        return Err(Error::Dimension(format!(
            "rho has {} entries, c has {}",
            params.rho.len(),
            params.c.len()
        )));
    }
    let grid = TimeGrid::uniform(k, 1.0);
    let intervals = grid
        .midpoints()
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let q = geom.frame(s);
            let d = Mat::from_diagonal(&Vector::from_vec(vec![
                band.parallel,
                band.transverse(params.c[i]),
            ]));
            let beta = crate::linalg::symmetrize(&(&q * d * q.transpose()));
            let nu = geom.midline(s) + geom.normal(s) * params.rho[i];
            ProtocolInterval::new(beta, nu, Mat::zeros(2, 2), 1.0)
        })
        .collect();
    Ok(Protocol::new(grid, intervals))
}

/// Straight-line guide from the origin to `(length, 0)` with isotropic stiffness.
pub fn baseline_protocol(k: usize, length: f64, stiffness: f64) -> Protocol {
    let grid = TimeGrid::uniform(k, 1.0);
    let intervals = grid
        .midpoints()
        .iter()
        .map(|&s| {
            ProtocolInterval::new(
                Mat::identity(2, 2) * stiffness,
                Vector::from_vec(vec![length * s, 0.0]),
                Mat::zeros(2, 2),
                1.0,
            )
        })
        .collect();
    Protocol::new(grid, intervals)
}
