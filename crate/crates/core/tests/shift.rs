mod common;

use common::{random_mixture, random_vec, random_zero_drift};
use lqgmpid::bridge::{BridgeContext, MarginalMixture};
use lqgmpid::linalg::{Mat, Vector};
use lqgmpid::oracle;
use lqgmpid::protocol::Protocol;
use lqgmpid::riccati::SweepOptions;
use lqgmpid::shift::{build_propagators, shifted_marginal, shifted_score, ShiftedSlice, SourceFrame};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn with_drift(mut p: Protocol, rng: &mut ChaCha8Rng, scale: f64) -> Protocol {
    let d = p.dim;
    for iv in &mut p.intervals {
        iv.sigma = Mat::from_fn(d, d, |_, _| rng.random_range(-scale..scale));
    }
    p
}

/// Largest gap between the flattened mixture and separate bridges started at each source draw.
fn gap_to_resweeps(p: &Protocol, frame: SourceFrame, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = p.dim;
    let target = random_mixture(&mut rng, d, 3);
    let sources: Vec<Vector> = (0..6).map(|_| random_vec(&mut rng, d, 0.8)).collect();
    let opts = SweepOptions::default();
    let ctx = BridgeContext::new(p, target.clone(), Vector::zeros(d), &opts).unwrap();
    let props = build_propagators(&ctx).unwrap();
    let mut worst = 0.0f64;
    for t in [0.1, 0.5, 0.9] {
        let flat = shifted_marginal(&ctx, &props, &sources, t, frame).unwrap();
        let k = target.len();
        assert_eq!(flat.weights.len(), sources.len() * k);
        for (n, z) in sources.iter().enumerate() {
            let own: MarginalMixture = BridgeContext::new(p, target.clone(), z.clone(), &opts).unwrap().marginal(t).unwrap();
            for j in 0..k {
                let i = n * k + j;
                worst = worst
                    .max((&flat.means[i] - &own.means[j]).amax())
                    .max((&flat.precisions[i] - &own.precisions[j]).amax() / own.precisions[j].amax())
                    .max((flat.weights[i] * sources.len() as f64 - own.weights[j]).abs());
            }
        }
    }
    worst
}

#[test]
fn shifted_frame_equals_per_particle_resweeps_without_drift() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for d in [1, 2, 3] {
        let p = random_zero_drift(&mut rng, d, 4);
        let gap = gap_to_resweeps(&p, SourceFrame::Shifted, 100 + d as u64);
        assert!(gap < 1e-9, "d = {d}: gap {gap:.3e}");
    }
}

#[test]
fn direct_frame_is_exact_with_drift() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let p = with_drift(random_zero_drift(&mut rng, 2, 4), &mut rng, 0.5);
    let gap = gap_to_resweeps(&p, SourceFrame::Direct, 7);
    assert!(gap < 1e-9, "gap {gap:.3e}");
}

#[test]
fn shifted_frame_misses_the_drift_term() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let p = with_drift(random_zero_drift(&mut rng, 2, 4), &mut rng, 0.5);
    assert!(gap_to_resweeps(&p, SourceFrame::Shifted, 7) > 1e-4);
}

#[test]
fn shifted_score_equals_the_resweep_score() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let p = random_zero_drift(&mut rng, 2, 5);
    let target = random_mixture(&mut rng, 2, 2);
    let opts = SweepOptions::default();
    let ctx = BridgeContext::new(&p, target.clone(), Vector::zeros(2), &opts).unwrap();
    let props = build_propagators(&ctx).unwrap();
    for _ in 0..10 {
        let z = random_vec(&mut rng, 2, 1.0);
        let t = rng.random_range(0.05..0.95);
        let x = random_vec(&mut rng, 2, 2.0);
        let own = BridgeContext::new(&p, target.clone(), z.clone(), &opts).unwrap();
        let want = own.score(t, &x).unwrap();
        let got = shifted_score(&ctx, &props, &z, t, &(&x - &z)).unwrap();
        assert!((got - &want).amax() < 1e-9 * want.amax().max(1.0));
    }
}

#[test]
fn zero_shift_leaves_inputs_untouched() {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let p = random_zero_drift(&mut rng, 3, 4);
    let ctx = BridgeContext::new(&p, random_mixture(&mut rng, 3, 2), Vector::zeros(3), &SweepOptions::default()).unwrap();
    let props = build_propagators(&ctx).unwrap();
    let ss = ShiftedSlice::new(&ctx, &props, 0.4, SourceFrame::Shifted).unwrap();
    let lin = ss.shifted_inputs(&Vector::zeros(3));
    let base = ss.slice.base_inputs();
    assert_eq!(lin.thx_minus, base.thx_minus);
    assert_eq!(lin.thy_minus, base.thy_minus);
    assert_eq!(lin.thx_plus, base.thx_plus);
    assert_eq!(lin.thx_plus_terminal, base.thx_plus_terminal);
    assert_eq!(lin.means, ctx.target.means);
}

#[test]
fn oracle_suite_passes() {
    let checks = oracle::run_suite("shift", 0).unwrap();
    assert!(!checks.is_empty());
    for check in checks {
        assert!(check.passed, "{check}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn shifted_inputs_are_affine_in_the_shift(seed in 0u64..10_000, a in -2.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_zero_drift(&mut rng, 2, 3);
        let ctx = BridgeContext::new(&p, random_mixture(&mut rng, 2, 2), Vector::zeros(2), &SweepOptions::default()).unwrap();
        let props = build_propagators(&ctx).unwrap();
        let ss = ShiftedSlice::new(&ctx, &props, rng.random_range(0.05..0.95), SourceFrame::Shifted).unwrap();
        let (z1, z2) = (random_vec(&mut rng, 2, 1.0), random_vec(&mut rng, 2, 1.0));
        let at = |z: &Vector| ss.shifted_inputs(z);
        let (l0, l1, l2, l12) = (at(&Vector::zeros(2)), at(&z1), at(&z2), at(&(&z1 * a + &z2)));
        let comb = |f: fn(&lqgmpid::bridge::LinearInputs) -> &Vector| {
            (f(&l12) - (f(&l1) - f(&l0)) * a - f(&l2)).amax()
        };
        let tol = 1e-10 * (1.0 + l0.thx_minus.amax() + l0.thx_plus.amax());
        prop_assert!(comb(|l| &l.thx_minus) < tol);
        prop_assert!(comb(|l| &l.thy_minus) < tol);
        prop_assert!(comb(|l| &l.thx_plus) < tol);
        prop_assert!(comb(|l| &l.thx_plus_terminal) < tol);
    }
}
