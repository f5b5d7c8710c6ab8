//! Dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

use crate::Error;

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

// Padé coefficients for degrees 3, 5, 7, 9 and 13, with the matching
// 1-norm thresholds from Higham (2005).
const PADE3: [f64; 4] = [120.0, 60.0, 12.0, 1.0];
const PADE5: [f64; 6] = [30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0];
const PADE7: [f64; 8] = [
    17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0, 1512.0, 56.0, 1.0,
];
const PADE9: [f64; 10] = [
    17643225600.0,
    8821612800.0,
    2075673600.0,
    302702400.0,
    30270240.0,
    2162160.0,
    110880.0,
    3960.0,
    90.0,
    1.0,
];
const PADE13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];
const THETA: [(usize, f64); 4] = [
    (3, 1.495585217958292e-2),
    (5, 2.539398330063230e-1),
    (7, 9.504178996162932e-1),
    (9, 2.097847961257068e0),
];
const THETA13: f64 = 5.371920351148152;

pub fn norm1(m: &Mat) -> f64 {
    m.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Matrix exponential by scaling and squaring with a diagonal Padé approximant.
pub fn expm(m: &Mat) -> Result<Mat, Error> {
    assert!(m.is_square(), "expm needs a square matrix");
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("matrix exponential input"));
    }
    let n = m.nrows();
    let eye = Mat::identity(n, n);
    let nrm = norm1(m);
    let a2 = m * m;

    for &(deg, theta) in THETA.iter() {
        if nrm <= theta {
            let coef: &[f64] = match deg {
                3 => &PADE3,
                5 => &PADE5,
                7 => &PADE7,
                _ => &PADE9,
            };
            let mut powers = vec![eye.clone(), a2.clone()];
            while powers.len() <= deg / 2 {
                let next = powers.last().unwrap() * &a2;
                powers.push(next);
            }
            let mut u = Mat::zeros(n, n);
            let mut v = Mat::zeros(n, n);
            for (j, p) in powers.iter().enumerate() {
                u += p * coef[2 * j + 1];
                v += p * coef[2 * j];
            }
            let u = m * u;
            return pade_solve(&u, &v);
        }
    }

    let s = if nrm > THETA13 {
        (nrm / THETA13).log2().ceil() as i32
    } else {
        0
    };
    let scale = 0.5f64.powi(s);
    let a = m * scale;
    let a2 = a2 * (scale * scale);
    let a4 = &a2 * &a2;
    let a6 = &a4 * &a2;
    let b = &PADE13;
    let inner_u = &a6 * (&a6 * b[13] + &a4 * b[11] + &a2 * b[9]);
    let u = &a * (inner_u + &a6 * b[7] + &a4 * b[5] + &a2 * b[3] + &eye * b[1]);
    let inner_v = &a6 * (&a6 * b[12] + &a4 * b[10] + &a2 * b[8]);
    let v = inner_v + &a6 * b[6] + &a4 * b[4] + &a2 * b[2] + &eye * b[0];
    let mut r = pade_solve(&u, &v)?;
    for _ in 0..s {
        r = &r * &r;
    }
    Ok(r)
}

fn pade_solve(u: &Mat, v: &Mat) -> Result<Mat, Error> {
    let den = v - u;
    let num = v + u;
    den.lu()
        .solve(&num)
        .ok_or(Error::Singular("Padé denominator"))
}

pub fn symmetrize(m: &Mat) -> Mat {
    (m + m.transpose()) * 0.5
}

/// Solve `m x = rhs` by LU with partial pivoting.
pub fn solve(m: &Mat, rhs: &Mat, what: &'static str) -> Result<Mat, Error> {
    m.clone().lu().solve(rhs).ok_or(Error::Singular(what))
}

pub fn solve_vec(m: &Mat, rhs: &Vector, what: &'static str) -> Result<Vector, Error> {
    m.clone().lu().solve(rhs).ok_or(Error::Singular(what))
}

/// log |det m| from an LU factorisation.
pub fn log_abs_det(m: &Mat) -> f64 {
    let lu = m.clone().lu();
    let u = lu.u();
    u.diagonal().iter().map(|v| v.abs().ln()).sum()
}

/// Cholesky factor of a symmetric positive-definite matrix.
#[derive(Clone, Debug)]
pub struct Spd {
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    log_det: f64,
}

impl Spd {
    pub fn new(m: &Mat, what: &'static str) -> Result<Self, Error> {
        let chol = symmetrize(m)
            .cholesky()
            .ok_or(Error::NotPositiveDefinite(what))?;
        let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        Ok(Spd { chol, log_det })
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    pub fn solve(&self, rhs: &Mat) -> Mat {
        self.chol.solve(rhs)
    }

    pub fn solve_vec(&self, rhs: &Vector) -> Vector {
        self.chol.solve(rhs)
    }

    pub fn inverse(&self) -> Mat {
        self.chol.inverse()
    }

    pub fn l(&self) -> Mat {
        self.chol.l()
    }
}

/// Max absolute entry.
pub fn max_abs(m: &Mat) -> f64 {
    m.iter().fold(0.0, |a, v| a.max(v.abs()))
}

pub fn rel_err(a: &Mat, b: &Mat) -> f64 {
    let scale = max_abs(b).max(1.0);
    max_abs(&(a - b)) / scale
}

pub fn from_row_major(d: usize, data: &[f64]) -> Mat {
    Mat::from_row_slice(d, d, data)
}

pub fn to_row_major(m: &Mat) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.len());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)]);
        }
    }
    out
}

/// Gauss–Legendre nodes and weights on [-1, 1] by Newton iteration on P_n.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (z * p1 - p0) / (z * z - 1.0);
            let dz = p1 / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        let wi = 2.0 / ((1.0 - z * z) * dp * dp);
        w[i] = wi;
        w[n - 1 - i] = wi;
    }
    (x, w)
}
