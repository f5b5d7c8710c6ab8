//! Closed-form score, marginal mixture and terminal look-up law for a delta source and a
//! Gaussian-mixture target.

use serde::{Deserialize, Serialize};

use crate::linalg::{symmetrize, Mat, Spd, Vector};
use crate::protocol::Protocol;
use crate::riccati::{run_sweeps, Branch, CoefficientState, SweepCache, SweepOptions, Sweeps};
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct GaussianMixture {
    pub weights: Vec<f64>,
    pub means: Vec<Vector>,
    pub covariances: Vec<Mat>,
    pub precisions: Vec<Mat>,
    pub log_dets: Vec<f64>,
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, means: Vec<Vector>, covariances: Vec<Mat>) -> Result<Self> {
        let k = weights.len();
        if k == 0 || means.len() != k || covariances.len() != k {
            return Err(Error::Dimension("mixture needs matching weights, means, covariances".into()));
        }
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|w| !(*w > 0.0)) || (total - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!("mixture weights must be positive and sum to 1 (sum {total})")));
        }
        let d = means[0].len();
        let mut precisions = Vec::with_capacity(k);
        let mut log_dets = Vec::with_capacity(k);
        for (m, c) in means.iter().zip(&covariances) {
            if m.len() != d || c.shape() != (d, d) {
                return Err(Error::Dimension("mixture component shapes differ".into()));
            }
            let f = Spd::new(c, "mixture covariance")?;
            precisions.push(symmetrize(&f.inverse()));
            log_dets.push(f.log_det());
        }
        Ok(GaussianMixture {
            weights,
            means,
            covariances,
            precisions,
            log_dets,
        })
    }

    /// Equal-weight mixture.
    pub fn uniform(means: Vec<Vector>, covariances: Vec<Mat>) -> Result<Self> {
        let k = means.len();
        let mut w = vec![1.0 / k as f64; k];
        // Make the weights sum to one exactly.
        let tail: f64 = w[..k - 1].iter().sum();
        w[k - 1] = 1.0 - tail;
        GaussianMixture::new(w, means, covariances)
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    /// Posterior responsibilities of each component at `x`.
    pub fn responsibilities(&self, x: &Vector) -> Vec<f64> {
        let logs: Vec<f64> = (0..self.len())
            .map(|k| {
                let dx = x - &self.means[k];
                self.weights[k].ln() - 0.5 * self.log_dets[k] - 0.5 * dx.dot(&(&self.precisions[k] * &dx))
            })
            .collect();
        softmax(&logs)
    }

    pub fn log_density(&self, x: &Vector) -> f64 {
        let d = self.dim() as f64;
        let logs: Vec<f64> = (0..self.len())
            .map(|k| {
                let dx = x - &self.means[k];
                self.weights[k].ln()
                    - 0.5 * self.log_dets[k]
                    - 0.5 * d * (2.0 * std::f64::consts::PI).ln()
                    - 0.5 * dx.dot(&(&self.precisions[k] * &dx))
            })
            .collect();
        log_sum_exp(&logs)
    }

    pub fn mean(&self) -> Vector {
        let mut m = Vector::zeros(self.dim());
        for (w, mu) in self.weights.iter().zip(&self.means) {
            m += mu * *w;
        }
        m
    }

    pub fn covariance(&self) -> Mat {
        let d = self.dim();
        let mean = self.mean();
        let mut c = Mat::zeros(d, d);
        for k in 0..self.len() {
            let dm = &self.means[k] - &mean;
            c += (&self.covariances[k] + &dm * dm.transpose()) * self.weights[k];
        }
        c
    }

    /// Trace of the mixture covariance restricted to a coordinate range.
    pub fn block_trace(&self, range: std::ops::Range<usize>) -> f64 {
        let c = self.covariance();
        range.map(|i| c[(i, i)]).sum()
    }

    pub fn to_doc(&self) -> MixtureDoc {
        MixtureDoc {
            weights: self.weights.clone(),
            means: self.means.iter().map(|m| m.iter().copied().collect()).collect(),
            covariances: self.covariances.iter().map(crate::linalg::to_row_major).collect(),
        }
    }

    pub fn from_doc(doc: &MixtureDoc) -> Result<Self> {
        let d = doc.means.first().map(|m| m.len()).unwrap_or(0);
        if doc.covariances.iter().any(|c| c.len() != d * d) {
            return Err(Error::Config("mixture covariance must be a row-major d×d array".into()));
        }
        GaussianMixture::new(
            doc.weights.clone(),
            doc.means.iter().map(|m| Vector::from_column_slice(m)).collect(),
            doc.covariances.iter().map(|c| crate::linalg::from_row_major(d, c)).collect(),
        )
    }
}

fn invert_precision(p: &Mat) -> Mat {
    match Spd::new(p, "precision") {
        Ok(f) => symmetrize(&f.inverse()),
        Err(_) => p.clone().try_inverse().unwrap_or_else(|| Mat::from_element(p.nrows(), p.ncols(), f64::NAN)),
    }
}

/// Serialized mixture with row-major covariances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureDoc {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub covariances: Vec<Vec<f64>>,
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Per-component ingredients of the score at one time.
#[derive(Clone, Debug)]
pub struct ComponentBridgeState {
    pub s: Mat,
    pub q: Vector,
    pub lambda_mat: Mat,
    pub lambda_vec: Vector,
    pub log_omega: f64,
}

/// z-independent per-component factorizations at one time.
#[derive(Clone, Debug)]
pub(crate) struct ComponentCore {
    pub s: Mat,
    pub s_fact: Spd,
    pub lambda_mat: Mat,
    pub pi_fact: Spd,
}

/// Linear (source- and guide-dependent) inputs of the component formulas.
#[derive(Clone, Debug)]
pub struct LinearInputs {
    pub thx_minus: Vector,
    pub thy_minus: Vector,
    pub thx_plus: Vector,
    pub thx_plus_terminal: Vector,
    pub source: Vector,
    pub means: Vec<Vector>,
}

/// Source/guide-dependent component quantities.
#[derive(Clone, Debug)]
pub struct ComponentLinear {
    pub q: Vec<Vector>,
    pub lambda: Vec<Vector>,
    pub log_omega: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MarginalMixture {
    pub t: f64,
    pub weights: Vec<f64>,
    pub means: Vec<Vector>,
    pub precisions: Vec<Mat>,
}

impl MarginalMixture {
    pub fn covariances(&self) -> Vec<Mat> {
        self.precisions.iter().map(invert_precision).collect()
    }

    /// The marginal as a target-style mixture (weights renormalized).
    pub fn to_mixture(&self) -> Result<GaussianMixture> {
        let total: f64 = self.weights.iter().sum();
        let covariances = self.covariances();
        let mut log_dets = Vec::with_capacity(covariances.len());
        for c in &covariances {
            log_dets.push(Spd::new(c, "marginal covariance")?.log_det());
        }
        Ok(GaussianMixture {
            weights: self.weights.iter().map(|w| w / total).collect(),
            means: self.means.clone(),
            covariances,
            precisions: self.precisions.clone(),
            log_dets,
        })
    }

    pub fn mean(&self) -> Vector {
        let mut m = Vector::zeros(self.means[0].len());
        for (w, mu) in self.weights.iter().zip(&self.means) {
            m += mu * *w;
        }
        m
    }

    pub fn covariance(&self) -> Mat {
        let d = self.means[0].len();
        let mean = self.mean();
        let covs = self.covariances();
        let mut c = Mat::zeros(d, d);
        for k in 0..self.weights.len() {
            let dm = &self.means[k] - &mean;
            c += (&covs[k] + &dm * dm.transpose()) * self.weights[k];
        }
        c
    }

    pub fn to_doc(&self) -> MarginalDoc {
        MarginalDoc {
            t: self.t,
            weights: self.weights.clone(),
            means: self.means.iter().map(|m| m.iter().copied().collect()).collect(),
            covariances: self.covariances().iter().map(crate::linalg::to_row_major).collect(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MarginalDoc {
    pub t: f64,
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub covariances: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct LookupResult {
    pub responsibilities: Vec<f64>,
    pub endpoints: Vec<Vector>,
    pub precisions: Vec<Mat>,
    pub expectation: Vector,
}

/// Sweeps plus target and source: everything needed to query the bridge.
#[derive(Clone, Debug)]
pub struct BridgeContext {
    pub backward: SweepCache,
    pub forward: SweepCache,
    pub target: GaussianMixture,
    pub source: Vector,
}

impl BridgeContext {
    pub fn new(protocol: &Protocol, target: GaussianMixture, source: Vector, opts: &SweepOptions) -> Result<Self> {
        let Sweeps { backward, forward } = run_sweeps(protocol, opts)?;
        BridgeContext::from_sweeps(backward, forward, target, source)
    }

    pub fn from_sweeps(backward: SweepCache, forward: SweepCache, target: GaussianMixture, source: Vector) -> Result<Self> {
        if backward.branch != Branch::Backward || forward.branch != Branch::Forward {
            return Err(Error::Config("sweep branches swapped".into()));
        }
        if backward.protocol != forward.protocol || backward.options.epsilon != forward.options.epsilon {
            return Err(Error::Config("sweeps built from different protocols".into()));
        }
        let d = backward.protocol.dim;
        if target.dim() != d || source.len() != d {
            return Err(Error::Dimension(format!("protocol has d = {d}")));
        }
        Ok(BridgeContext {
            backward,
            forward,
            target,
            source,
        })
    }

    pub fn protocol(&self) -> &Protocol {
        &self.backward.protocol
    }

    pub fn band(&self) -> (f64, f64) {
        self.backward.band()
    }

    pub fn kappa_at(&self, t: f64) -> f64 {
        let k = self.protocol().grid.locate(t);
        self.protocol().intervals[k].kappa
    }

    pub fn slice(&self, t: f64) -> Result<TimeSlice> {
        let bwd = self.backward.evaluate_at(t)?;
        let fwd = self.forward.evaluate_at(t)?;
        TimeSlice::build(self, t, bwd, fwd)
    }

    pub fn component_quantities(&self, t: f64) -> Result<Vec<ComponentBridgeState>> {
        self.slice(t).map(|s| s.components())
    }

    pub fn score(&self, t: f64, x: &Vector) -> Result<Vector> {
        Ok(self.slice(t)?.score(x))
    }

    pub fn log_psi(&self, t: f64, x: &Vector) -> Result<f64> {
        Ok(self.slice(t)?.log_psi(x))
    }

    pub fn marginal(&self, t: f64) -> Result<MarginalMixture> {
        Ok(self.slice(t)?.marginal())
    }

    pub fn lookup(&self, t: f64, x: &Vector) -> Result<LookupResult> {
        Ok(self.slice(t)?.lookup(x))
    }
}

/// Everything about the bridge at one query time.
#[derive(Clone, Debug)]
pub struct TimeSlice {
    pub t: f64,
    pub kappa: f64,
    pub backward: CoefficientState,
    pub forward: CoefficientState,
    pub(crate) cores: Vec<ComponentCore>,
    pub base: ComponentLinear,
    pub(crate) target_log_norm: Vec<f64>,
    pub(crate) target_precision_means: Vec<Vector>,
    /// `log π_k - ½ log|Σ_k|`.
    base_inputs: LinearInputs,
}

impl TimeSlice {
    fn build(ctx: &BridgeContext, t: f64, bwd: CoefficientState, fwd: CoefficientState) -> Result<Self> {
        let term = ctx.forward.terminal();
        let tgt = &ctx.target;
        let mut cores = Vec::with_capacity(tgt.len());
        for k in 0..tgt.len() {
            let s = symmetrize(&(&bwd.c + &tgt.precisions[k] - &term.a));
            let s_fact = Spd::new(&s, "component matrix S")?;
            let gain = s_fact.solve(&bwd.b.transpose()).transpose();
            let lambda_mat = symmetrize(&(&bwd.a - &gain * bwd.b.transpose()));
            let pi_fact = Spd::new(&(&fwd.a + &lambda_mat), "marginal precision")?;
            cores.push(ComponentCore {
                s,
                s_fact,
                lambda_mat,
                pi_fact,
            });
        }
        let target_log_norm = (0..tgt.len())
            .map(|k| tgt.weights[k].ln() - 0.5 * tgt.log_dets[k])
            .collect();
        let target_precision_means = (0..tgt.len()).map(|k| &tgt.precisions[k] * &tgt.means[k]).collect();
        let base_inputs = LinearInputs {
            thx_minus: bwd.theta_x.clone(),
            thy_minus: bwd.theta_y.clone(),
            thx_plus: fwd.theta_x.clone(),
            thx_plus_terminal: term.theta_x.clone(),
            source: ctx.source.clone(),
            means: tgt.means.clone(),
        };
        let mut slice = TimeSlice {
            t,
            kappa: ctx.kappa_at(t),
            backward: bwd,
            forward: fwd,
            cores,
            base: ComponentLinear {
                q: vec![],
                lambda: vec![],
                log_omega: vec![],
            },
            target_log_norm,
            target_precision_means,
            base_inputs,
        };
        let term_b = term.b.clone();
        slice.base = slice.linear_parts(&slice.base_inputs.clone(), &term_b, ctx, None);
        Ok(slice)
    }

    /// Component (q, λ, log ω) for given linear inputs.
    ///
    /// `shifted_means` replaces the target means (and their precision products) when the
    /// frame is translated.
    pub(crate) fn linear_parts(
        &self,
        lin: &LinearInputs,
        term_b: &Mat,
        ctx: &BridgeContext,
        shifted_means: Option<&[Vector]>,
    ) -> ComponentLinear {
        let tgt = &ctx.target;
        let n = self.cores.len();
        let mut q = Vec::with_capacity(n);
        let mut lambda = Vec::with_capacity(n);
        let mut log_omega = Vec::with_capacity(n);
        let src = term_b * &lin.source + &lin.thx_plus_terminal;
        for k in 0..n {
            let core = &self.cores[k];
            let (pm, mpm) = match shifted_means {
                None => {
                    let pm = self.target_precision_means[k].clone();
                    let mpm = tgt.means[k].dot(&pm);
                    (pm, mpm)
                }
                Some(means) => {
                    let pm = &tgt.precisions[k] * &means[k];
                    let mpm = means[k].dot(&pm);
                    (pm, mpm)
                }
            };
            let qk = &lin.thy_minus + pm - &src;
            let sq = core.s_fact.solve_vec(&qk);
            lambda.push(&lin.thx_minus + &self.backward.b * &sq);
            log_omega.push(self.target_log_norm[k] - 0.5 * core.s_fact.log_det() - 0.5 * mpm + 0.5 * qk.dot(&sq));
            q.push(qk);
        }
        ComponentLinear {
            q,
            lambda,
            log_omega,
        }
    }

    pub fn base_inputs(&self) -> &LinearInputs {
        &self.base_inputs
    }

    pub fn components(&self) -> Vec<ComponentBridgeState> {
        self.cores
            .iter()
            .enumerate()
            .map(|(k, c)| ComponentBridgeState {
                s: c.s.clone(),
                q: self.base.q[k].clone(),
                lambda_mat: c.lambda_mat.clone(),
                lambda_vec: self.base.lambda[k].clone(),
                log_omega: self.base.log_omega[k],
            })
            .collect()
    }

    fn exponents(&self, lin: &ComponentLinear, x: &Vector) -> Vec<f64> {
        self.cores
            .iter()
            .enumerate()
            .map(|(k, c)| lin.log_omega[k] - 0.5 * x.dot(&(&c.lambda_mat * x)) + lin.lambda[k].dot(x))
            .collect()
    }

    pub fn responsibilities_with(&self, lin: &ComponentLinear, x: &Vector) -> Vec<f64> {
        softmax(&self.exponents(lin, x))
    }

    pub fn log_psi_with(&self, lin: &ComponentLinear, x: &Vector) -> f64 {
        log_sum_exp(&self.exponents(lin, x))
    }

    pub fn score_with(&self, lin: &ComponentLinear, x: &Vector) -> Vector {
        let rho = self.responsibilities_with(lin, x);
        let mut u = Vector::zeros(x.len());
        for (k, c) in self.cores.iter().enumerate() {
            u += (&lin.lambda[k] - &c.lambda_mat * x) * rho[k];
        }
        u * self.kappa
    }

    /// Jacobian of the score, via the softmax product rule.
    pub fn score_jacobian_with(&self, lin: &ComponentLinear, x: &Vector) -> Mat {
        let d = x.len();
        let rho = self.responsibilities_with(lin, x);
        let fields: Vec<Vector> = self
            .cores
            .iter()
            .enumerate()
            .map(|(k, c)| &lin.lambda[k] - &c.lambda_mat * x)
            .collect();
        let mut mean = Vector::zeros(d);
        for (r, v) in rho.iter().zip(&fields) {
            mean += v * *r;
        }
        let mut jac = Mat::zeros(d, d);
        for (k, c) in self.cores.iter().enumerate() {
            jac += (&fields[k] * fields[k].transpose() - &c.lambda_mat) * rho[k];
        }
        jac -= &mean * mean.transpose();
        jac * self.kappa
    }

    pub fn score(&self, x: &Vector) -> Vector {
        self.score_with(&self.base, x)
    }

    pub fn score_jacobian(&self, x: &Vector) -> Mat {
        self.score_jacobian_with(&self.base, x)
    }

    pub fn log_psi(&self, x: &Vector) -> f64 {
        self.log_psi_with(&self.base, x)
    }

    pub fn responsibilities(&self, x: &Vector) -> Vec<f64> {
        self.responsibilities_with(&self.base, x)
    }

    /// Component means and log-weights (unnormalized) of the marginal for given linear inputs.
    pub(crate) fn marginal_parts(&self, lin: &ComponentLinear, fwd_linear: &Vector) -> (Vec<Vector>, Vec<f64>) {
        let mut means = Vec::with_capacity(self.cores.len());
        let mut logw = Vec::with_capacity(self.cores.len());
        for (k, c) in self.cores.iter().enumerate() {
            let rhs = fwd_linear + &lin.lambda[k];
            let mu = c.pi_fact.solve_vec(&rhs);
            logw.push(lin.log_omega[k] - 0.5 * c.pi_fact.log_det() + 0.5 * rhs.dot(&mu));
            means.push(mu);
        }
        (means, logw)
    }

    pub fn precisions(&self) -> Vec<Mat> {
        self.cores.iter().map(|c| symmetrize(&(&self.forward.a + &c.lambda_mat))).collect()
    }

    pub fn marginal(&self) -> MarginalMixture {
        let fwd_linear = &self.forward.b * &self.base_inputs.source + &self.forward.theta_x;
        let (means, logw) = self.marginal_parts(&self.base, &fwd_linear);
        MarginalMixture {
            t: self.t,
            weights: softmax(&logw),
            means,
            precisions: self.precisions(),
        }
    }

    pub fn lookup_with(&self, lin: &ComponentLinear, x: &Vector) -> LookupResult {
        let rho = self.responsibilities_with(lin, x);
        let bt_x = self.backward.b.transpose() * x;
        let endpoints: Vec<Vector> = self
            .cores
            .iter()
            .enumerate()
            .map(|(k, c)| c.s_fact.solve_vec(&(&bt_x + &lin.q[k])))
            .collect();
        let mut expectation = Vector::zeros(x.len());
        for (r, y) in rho.iter().zip(&endpoints) {
            expectation += y * *r;
        }
        LookupResult {
            responsibilities: rho,
            endpoints,
            precisions: self.cores.iter().map(|c| c.s.clone()).collect(),
            expectation,
        }
    }

    pub fn lookup(&self, x: &Vector) -> LookupResult {
        self.lookup_with(&self.base, x)
    }
}

/// Match each target component to the marginal component closest in target-Mahalanobis
/// distance between means; report the worst mean and covariance errors.
pub fn terminal_errors(marginal: &MarginalMixture, target: &GaussianMixture) -> (f64, f64) {
    let covs = marginal.covariances();
    let mut mean_err = 0.0f64;
    let mut cov_err = 0.0f64;
    for k in 0..target.len() {
        let mut best = (f64::INFINITY, 0usize);
        for (j, mu) in marginal.means.iter().enumerate() {
            let dm = mu - &target.means[k];
            let dist = dm.dot(&(&target.precisions[k] * &dm));
            if dist < best.0 {
                best = (dist, j);
            }
        }
        let j = best.1;
        mean_err = mean_err.max((&marginal.means[j] - &target.means[k]).norm());
        cov_err = cov_err.max(crate::linalg::max_abs(&(&covs[j] - &target.covariances[k])));
    }
    (mean_err, cov_err)
}
