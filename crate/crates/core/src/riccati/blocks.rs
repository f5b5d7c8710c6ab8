//! Transition blocks of the per-interval Hamiltonian system.

use crate::linalg::{expm, Mat};
use crate::protocol::{classify_interval, ProtocolInterval, SpecialCase};
use crate::Result;

use super::{Branch, Solver};

/// Blocks of `exp(τ [[M, F], [0, 0]])` where `M` is the 2d×2d Hamiltonian matrix of the
/// branch and `F = [0; -G]` stacks the (negated) drive columns `G = β·ν` .
///
/// `phi11..phi22` are the d×d blocks of `exp(τM)`; `drive1`, `drive2` are the top and
/// bottom halves of the augmented columns (d×m each).
#[derive(Clone, Debug)]
pub struct HamiltonianBlocks {
    pub phi11: Mat,
    pub phi12: Mat,
    pub phi21: Mat,
    pub phi22: Mat,
    pub drive1: Mat,
    pub drive2: Mat,
}

impl HamiltonianBlocks {
    /// Assemble the full (2d+m)×(2d+m) transition matrix.
    pub fn full(&self) -> Mat {
        let d = self.phi11.nrows();
        let m = self.drive1.ncols();
        let mut out = Mat::zeros(2 * d + m, 2 * d + m);
        out.view_mut((0, 0), (d, d)).copy_from(&self.phi11);
        out.view_mut((0, d), (d, d)).copy_from(&self.phi12);
        out.view_mut((d, 0), (d, d)).copy_from(&self.phi21);
        out.view_mut((d, d), (d, d)).copy_from(&self.phi22);
        out.view_mut((0, 2 * d), (d, m)).copy_from(&self.drive1);
        out.view_mut((d, 2 * d), (d, m)).copy_from(&self.drive2);
        for i in 0..m {
            out[(2 * d + i, 2 * d + i)] = 1.0;
        }
        out
    }
}

/// 2d×2d Hamiltonian matrix: backward `[[-σ, κI], [β, σᵀ]]`, forward `[[σ, κI], [β, -σᵀ]]`.
pub fn hamiltonian(iv: &ProtocolInterval, branch: Branch) -> Mat {
    let d = iv.dim();
    let s = match branch {
        Branch::Backward => -1.0,
        Branch::Forward => 1.0,
    };
    let mut h = Mat::zeros(2 * d, 2 * d);
    h.view_mut((0, 0), (d, d)).copy_from(&(&iv.sigma * s));
    h.view_mut((0, d), (d, d))
        .copy_from(&(Mat::identity(d, d) * iv.kappa));
    h.view_mut((d, 0), (d, d)).copy_from(&iv.beta);
    h.view_mut((d, d), (d, d))
        .copy_from(&(iv.sigma.transpose() * -s));
    h
}

/// Which formula computes the blocks for this interval under the given solver policy.
pub fn resolve_case(iv: &ProtocolInterval, solver: Solver) -> SpecialCase {
    match solver {
        Solver::Auto => classify_interval(iv),
        Solver::General => SpecialCase::General,
        Solver::Force(case) => case,
    }
}

pub fn blocks(
    iv: &ProtocolInterval,
    branch: Branch,
    tau: f64,
    drives: &Mat,
    case: SpecialCase,
) -> Result<HamiltonianBlocks> {
    match case {
        SpecialCase::General => blocks_expm(iv, branch, tau, drives),
        SpecialCase::Isotropic { b } => Ok(blocks_modes(iv, branch, tau, drives, &Modes::isotropic(iv.dim(), b), 0.0)),
        SpecialCase::ZeroDrift => Ok(blocks_modes(iv, branch, tau, drives, &Modes::of(&iv.beta), 0.0)),
        SpecialCase::ScalarDrift { c } => Ok(blocks_modes(iv, branch, tau, drives, &Modes::of(&iv.beta), c)),
    }
}

fn blocks_expm(iv: &ProtocolInterval, branch: Branch, tau: f64, drives: &Mat) -> Result<HamiltonianBlocks> {
    let d = iv.dim();
    let m = drives.ncols();
    let mut n = Mat::zeros(2 * d + m, 2 * d + m);
    n.view_mut((0, 0), (2 * d, 2 * d))
        .copy_from(&hamiltonian(iv, branch));
    n.view_mut((d, 2 * d), (d, m)).copy_from(&(-drives));
    let e = expm(&(n * tau))?;
    Ok(HamiltonianBlocks {
        phi11: e.view((0, 0), (d, d)).into_owned(),
        phi12: e.view((0, d), (d, d)).into_owned(),
        phi21: e.view((d, 0), (d, d)).into_owned(),
        phi22: e.view((d, d), (d, d)).into_owned(),
        drive1: e.view((0, 2 * d), (d, m)).into_owned(),
        drive2: e.view((d, 2 * d), (d, m)).into_owned(),
    })
}

/// Eigenbasis of β; `vectors == None` means the identity basis.
struct Modes {
    values: Vec<f64>,
    vectors: Option<Mat>,
}

impl Modes {
    fn isotropic(d: usize, b: f64) -> Self {
        Modes {
            values: vec![b; d],
            vectors: None,
        }
    }

    fn of(beta: &Mat) -> Self {
        let d = beta.nrows();
        let diagonal = (0..d).all(|i| (0..d).all(|j| i == j || beta[(i, j)] == 0.0));
        if diagonal {
            return Modes {
                values: beta.diagonal().iter().copied().collect(),
                vectors: None,
            };
        }
        let eig = crate::linalg::symmetrize(beta).symmetric_eigen();
        Modes {
            values: eig.eigenvalues.iter().copied().collect(),
            vectors: Some(eig.eigenvectors),
        }
    }

    fn to_basis(&self, diag: &[f64]) -> Mat {
        let dm = Mat::from_diagonal(&crate::linalg::Vector::from_column_slice(diag));
        match &self.vectors {
            None => dm,
            Some(v) => v * dm * v.transpose(),
        }
    }
}

/// `sinh(wτ)/w` and `(cosh(wτ) - 1)/w²`, with series near w = 0.
fn hyperbolic_kernels(w: f64, tau: f64) -> (f64, f64, f64) {
    let x = w * tau;
    let ch = x.cosh();
    if x < 1e-3 {
        let x2 = x * x;
        let sh = tau * (1.0 + x2 / 6.0 + x2 * x2 / 120.0);
        let cm = tau * tau * (0.5 + x2 / 24.0 + x2 * x2 / 720.0);
        (ch, sh, cm)
    } else {
        (ch, x.sinh() / w, (ch - 1.0) / (w * w))
    }
}

/// Closed-form blocks for σ = c·I: each β mode evolves under the 2×2 system
/// `[[-c', κ], [b, c']]` whose exponential is `cosh(wτ) I + sinh(wτ)/w · H`, `w² = κb + c²`.
fn blocks_modes(
    iv: &ProtocolInterval,
    branch: Branch,
    tau: f64,
    drives: &Mat,
    modes: &Modes,
    c: f64,
) -> HamiltonianBlocks {
    let d = iv.dim();
    let kappa = iv.kappa;
    let cp = match branch {
        Branch::Backward => c,
        Branch::Forward => -c,
    };
    let mut p11 = vec![0.0; d];
    let mut p12 = vec![0.0; d];
    let mut p21 = vec![0.0; d];
    let mut p22 = vec![0.0; d];
    let mut f1 = vec![0.0; d];
    let mut f2 = vec![0.0; d];
    for i in 0..d {
        let b = modes.values[i];
        let w = (kappa * b + cp * cp).max(0.0).sqrt();
        let (ch, sh, cm) = hyperbolic_kernels(w, tau);
        p11[i] = ch - cp * sh;
        p12[i] = kappa * sh;
        p21[i] = b * sh;
        p22[i] = ch + cp * sh;
        f1[i] = -kappa * cm;
        f2[i] = -(sh + cp * cm);
    }
    let g = match &modes.vectors {
        None => drives.clone(),
        Some(v) => v.transpose() * drives,
    };
    let scale_rows = |f: &[f64]| {
        let mut out = g.clone();
        for (i, mut row) in out.row_iter_mut().enumerate() {
            row *= f[i];
        }
        match &modes.vectors {
            None => out,
            Some(v) => v * out,
        }
    };
    HamiltonianBlocks {
        phi11: modes.to_basis(&p11),
        phi12: modes.to_basis(&p12),
        phi21: modes.to_basis(&p21),
        phi22: modes.to_basis(&p22),
        drive1: scale_rows(&f1),
        drive2: scale_rows(&f2),
    }
}
