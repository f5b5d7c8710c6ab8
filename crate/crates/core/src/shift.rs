//! Gaussian-mixture sources through per-particle coordinate shifts.
//!
//! A source draw `z` is handled in the frame `x̃ = x - z`, where the guide becomes `ν - z`,
//! the target means `m - z` and the start point the origin. The linear coefficients are
//! linear in the guide, so the shifted ones follow from unit-drive responses:
//! `θ(ν - z) = θ(ν) - Λ z`, with column j of `Λ` the response to `ν ≡ e_j`.
//!
//! The translation is exact when the drift matrix vanishes; with σ ≠ 0 the shifted frame
//! acquires an extra constant drift `σ z` that the construction does not see. The
//! [`SourceFrame::Direct`] mode instead solves each particle's bridge from `x₀ = z`
//! in physical coordinates, which is exact for any σ.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bridge::{softmax, BridgeContext, ComponentLinear, LinearInputs, MarginalMixture, TimeSlice};
use crate::linalg::{Mat, Vector};
use crate::riccati::{blocks, interval_update, propagate, substeps, Branch, SweepCache};
use crate::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SourceFrame {
    /// Shifted frame with propagator corrections.
    Shifted,
    /// Physical frame, bridge started at the particle's source point.
    Direct,
}

/// θ responses of one branch to unit guide drives, at the cache breakpoints.
#[derive(Clone, Debug)]
pub struct LinearSweep {
    pub theta_x: Vec<Mat>,
    pub theta_y: Vec<Mat>,
}

/// Propagate d drive columns (`G = β`) with zero initial θ, reusing the cached quadratic
/// coefficients.
pub fn unit_response_sweep(cache: &SweepCache) -> Result<LinearSweep> {
    let p = &cache.protocol;
    let d = p.dim;
    let k = p.len();
    let zero = Mat::zeros(d, d);
    let mut theta_x = vec![zero.clone(); k + 1];
    let mut theta_y = vec![zero.clone(); k + 1];
    let order: Vec<usize> = match cache.branch {
        Branch::Forward => (0..k).collect(),
        Branch::Backward => (0..k).rev().collect(),
    };
    for i in order {
        let (from, to) = match cache.branch {
            Branch::Forward => (i, i + 1),
            Branch::Backward => (i + 1, i),
        };
        let tau = cache.times[i + 1] - cache.times[i];
        let (tx, ty) = step(cache, i, from, tau, &theta_x[from], &theta_y[from])
            .map_err(|e| e.at_interval(i))?;
        theta_x[to] = tx;
        theta_y[to] = ty;
    }
    Ok(LinearSweep { theta_x, theta_y })
}

fn step(cache: &SweepCache, interval: usize, from: usize, tau: f64, tx0: &Mat, ty0: &Mat) -> Result<(Mat, Mat)> {
    let iv = &cache.protocol.intervals[interval];
    let n = substeps(iv, cache.branch, tau);
    let h = tau / n as f64;
    let blk = blocks(iv, cache.branch, h, &iv.beta, cache.cases[interval])?;
    let mut s = cache.states[from].clone();
    let (mut tx, mut ty) = (tx0.clone(), ty0.clone());
    for j in 0..n {
        let p = propagate(&s.a, &s.b, &s.c, &tx, &ty, &blk)?;
        tx = p.theta_x;
        ty = p.theta_y;
        if j + 1 < n {
            s = interval_update(&s, iv, h, &cache.options)?;
        }
    }
    Ok((tx, ty))
}

impl LinearSweep {
    /// Responses at an arbitrary band time.
    pub fn at(&self, cache: &SweepCache, t: f64) -> Result<(Mat, Mat)> {
        if let Some(i) = cache.times.iter().position(|&s| s == t) {
            return Ok((self.theta_x[i].clone(), self.theta_y[i].clone()));
        }
        let _ = cache.evaluate_at(t)?;
        let k = cache.interval_of(t);
        match cache.branch {
            Branch::Forward => step(cache, k, k, t - cache.times[k], &self.theta_x[k], &self.theta_y[k]),
            Branch::Backward => step(
                cache,
                k,
                k + 1,
                cache.times[k + 1] - t,
                &self.theta_x[k + 1],
                &self.theta_y[k + 1],
            ),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ShiftPropagators {
    pub backward: LinearSweep,
    pub forward: LinearSweep,
    /// Forward θx response at `T - ε`.
    pub terminal_x: Mat,
}

pub fn build_propagators(ctx: &BridgeContext) -> Result<ShiftPropagators> {
    let (backward, forward) = rayon::join(
        || unit_response_sweep(&ctx.backward),
        || unit_response_sweep(&ctx.forward),
    );
    let forward = forward?;
    let terminal_x = forward.theta_x.last().unwrap().clone();
    Ok(ShiftPropagators {
        backward: backward?,
        forward,
        terminal_x,
    })
}

/// Bridge slice plus the propagators at the same time.
#[derive(Clone, Debug)]
pub struct ShiftedSlice {
    pub slice: TimeSlice,
    pub lx_minus: Mat,
    pub ly_minus: Mat,
    pub lx_plus: Mat,
    pub lx_plus_terminal: Mat,
    pub frame: SourceFrame,
    term_b: Mat,
    ctx_means: Vec<Vector>,
}

/// Per-particle quantities at one time.
#[derive(Clone, Debug)]
pub struct ParticleTerms {
    pub linear: ComponentLinear,
    /// `B⁺x₀ + θx⁺` in the particle's working frame.
    pub forward_linear: Vector,
    /// Offset added to working-frame positions to get physical ones.
    pub offset: Vector,
}

impl ShiftedSlice {
    pub fn new(ctx: &BridgeContext, props: &ShiftPropagators, t: f64, frame: SourceFrame) -> Result<Self> {
        let slice = ctx.slice(t)?;
        let (lx_minus, ly_minus) = props.backward.at(&ctx.backward, t)?;
        let (lx_plus, _) = props.forward.at(&ctx.forward, t)?;
        Ok(ShiftedSlice {
            slice,
            lx_minus,
            ly_minus,
            lx_plus,
            lx_plus_terminal: props.terminal_x.clone(),
            frame,
            term_b: ctx.forward.terminal().b.clone(),
            ctx_means: ctx.target.means.clone(),
        })
    }

    /// Linear inputs for source draw `z` in the shifted frame.
    pub fn shifted_inputs(&self, z: &Vector) -> LinearInputs {
        let s = &self.slice;
        LinearInputs {
            thx_minus: &s.backward.theta_x - &self.lx_minus * z,
            thy_minus: &s.backward.theta_y - &self.ly_minus * z,
            thx_plus: &s.forward.theta_x - &self.lx_plus * z,
            thx_plus_terminal: s.base_inputs().thx_plus_terminal.clone() - &self.lx_plus_terminal * z,
            source: Vector::zeros(z.len()),
            means: self.ctx_means.iter().map(|m| m - z).collect(),
        }
    }

    pub fn particle(&self, ctx: &BridgeContext, z: &Vector) -> ParticleTerms {
        let s = &self.slice;
        match self.frame {
            SourceFrame::Shifted => {
                let lin = self.shifted_inputs(z);
                let linear = s.linear_parts(&lin, &self.term_b, ctx, Some(&lin.means));
                ParticleTerms {
                    linear,
                    forward_linear: lin.thx_plus.clone(),
                    offset: z.clone(),
                }
            }
            SourceFrame::Direct => {
                let mut lin = s.base_inputs().clone();
                lin.source = z.clone();
                let linear = s.linear_parts(&lin, &self.term_b, ctx, None);
                ParticleTerms {
                    linear,
                    forward_linear: &s.forward.b * z + &s.forward.theta_x,
                    offset: Vector::zeros(z.len()),
                }
            }
        }
    }

    /// Score in the particle's working frame.
    pub fn score(&self, terms: &ParticleTerms, x_work: &Vector) -> Vector {
        self.slice.score_with(&terms.linear, x_work)
    }

    /// Per-particle marginal components translated to physical coordinates, with weights
    /// normalized within the particle.
    pub fn particle_marginal(&self, terms: &ParticleTerms) -> (Vec<Vector>, Vec<f64>) {
        let (means, logw) = self.slice.marginal_parts(&terms.linear, &terms.forward_linear);
        let means = means.into_iter().map(|m| m + &terms.offset).collect();
        (means, softmax(&logw))
    }
}

/// Equal-weight flattening of the per-particle marginals: a `B·K` component mixture.
pub fn shifted_marginal(
    ctx: &BridgeContext,
    props: &ShiftPropagators,
    sources: &[Vector],
    t: f64,
    frame: SourceFrame,
) -> Result<MarginalMixture> {
    let ss = ShiftedSlice::new(ctx, props, t, frame)?;
    let precisions = ss.slice.precisions();
    let parts: Vec<(Vec<Vector>, Vec<f64>)> = sources
        .par_iter()
        .map(|z| ss.particle_marginal(&ss.particle(ctx, z)))
        .collect();
    let b = sources.len() as f64;
    let mut means = Vec::new();
    let mut weights = Vec::new();
    let mut precs = Vec::new();
    for (m, w) in parts {
        for (k, (mk, wk)) in m.into_iter().zip(w).enumerate() {
            means.push(mk);
            weights.push(wk / b);
            precs.push(precisions[k].clone());
        }
    }
    Ok(MarginalMixture {
        t,
        weights,
        means,
        precisions: precs,
    })
}

/// Shifted score for one particle: `ũ*(t, x̃; z)`.
pub fn shifted_score(
    ctx: &BridgeContext,
    props: &ShiftPropagators,
    z: &Vector,
    t: f64,
    x_tilde: &Vector,
) -> Result<Vector> {
    let ss = ShiftedSlice::new(ctx, props, t, SourceFrame::Shifted)?;
    let terms = ss.particle(ctx, z);
    Ok(ss.score(&terms, x_tilde))
}
