mod common;

use common::{random_mixture, random_vec, random_zero_drift, vec};
use lqgmpid::bridge::{BridgeContext, GaussianMixture};
use lqgmpid::experiment::draw_mixture;
use lqgmpid::linalg::{Mat, Vector};
use lqgmpid::riccati::SweepOptions;
use lqgmpid::sampler::{
    branching_time, control_diagnostics, guide_cost, mean_of, mode_counts, mode_imbalance, sample_marginal, simulate,
    trapezoid, tv_mode_error, SimConfig, Source,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_context(seed: u64) -> BridgeContext {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = random_zero_drift(&mut rng, 2, 4);
    let target = random_mixture(&mut rng, 2, 2);
    BridgeContext::new(&p, target, random_vec(&mut rng, 2, 0.5), &SweepOptions::default()).unwrap()
}

#[test]
fn simulation_is_deterministic_in_the_seed_and_thread_count() {
    let ctx = small_context(1);
    let cfg = SimConfig::new(200, 100, 9);
    let a = simulate(&ctx, &Source::Delta, &cfg).unwrap();
    let b = rayon::ThreadPoolBuilder::new()
        .num_threads(3)
        .build()
        .unwrap()
        .install(|| simulate(&ctx, &Source::Delta, &cfg).unwrap());
    assert_eq!(a.terminal, b.terminal);
    let c = simulate(&ctx, &Source::Delta, &SimConfig::new(200, 100, 10)).unwrap();
    assert_ne!(a.terminal, c.terminal);
    assert_eq!(a.times.len(), 101);
    assert_eq!(a.stats.len(), 101);
}

#[test]
fn paths_and_snapshots_are_consistent() {
    let ctx = small_context(2);
    let mut cfg = SimConfig::new(20, 50, 3);
    cfg.keep_paths = true;
    cfg.snapshots = vec![0.0, 0.5, 1.0];
    let e = simulate(&ctx, &Source::Delta, &cfg).unwrap();
    let paths = e.paths.as_ref().unwrap();
    for (n, path) in paths.iter().enumerate() {
        assert_eq!(path.len(), 51);
        assert_eq!(path[0], ctx.source);
        assert_eq!(path[50], e.terminal[n]);
    }
    assert_eq!(e.snapshots.len(), 3);
    assert_eq!(e.snapshots[2].1, e.terminal);
}

#[test]
fn ensemble_means_agree_with_the_closed_form_marginal() {
    for seed in 0..5 {
        let ctx = small_context(100 + seed);
        let mut cfg = SimConfig::new(4000, 600, seed);
        cfg.snapshots = vec![0.5];
        let e = simulate(&ctx, &Source::Delta, &cfg).unwrap();
        let (t, cloud) = &e.snapshots[0];
        let m = ctx.marginal(*t).unwrap();
        let mean = mean_of(cloud);
        let cov = m.covariance();
        let want = m.mean();
        for i in 0..2 {
            let se = (cov[(i, i)] / cloud.len() as f64).sqrt();
            assert!((mean[i] - want[i]).abs() < 3.0 * se + 2e-3, "case {seed}, coordinate {i}");
        }
    }
}

#[test]
fn mode_statistics() {
    let target = GaussianMixture::uniform(
        vec![vec(&[-2.0, 0.0]), vec(&[2.0, 0.0])],
        vec![Mat::identity(2, 2) * 0.1, Mat::identity(2, 2) * 0.1],
    )
    .unwrap();
    let xs = draw_mixture(&target, 20000, 5).unwrap();
    let tv = tv_mode_error(&xs, &target);
    assert!(tv < 3.0 * (0.25f64 / 20000.0).sqrt(), "TV {tv}");

    let one_side: Vec<Vector> = (0..100).map(|i| vec(&[2.0 + 0.001 * i as f64, 0.0])).collect();
    assert_eq!(mode_counts(&one_side, &target), vec![0, 100]);
    assert!((tv_mode_error(&one_side, &target) - 0.5).abs() < 1e-15);
    assert!((mode_imbalance(&one_side, &target) - 1.0).abs() < 1e-15);
}

#[test]
fn branching_time_and_trapezoid() {
    let t = [0.0, 0.25, 0.5, 0.75, 1.0];
    assert_eq!(branching_time(&t, &[0.0, 1.0, 2.0, 3.0, 4.0]), Some(0.5));
    assert_eq!(branching_time(&t, &[0.0, 0.0, 0.0, 0.0, 1.0]), Some(1.0));
    assert_eq!(branching_time(&t, &[5.0, 1.0, 1.0, 1.0, 1.0]), Some(0.0));
    assert_eq!(branching_time(&[], &[]), None);
    assert!((trapezoid(&t, &[1.0, 2.0, 3.0, 4.0, 5.0]) - 3.0).abs() < 1e-15);
}

#[test]
fn guide_cost_is_positive_and_finite() {
    let ctx = small_context(3);
    let e = simulate(&ctx, &Source::Delta, &SimConfig::new(500, 200, 1)).unwrap();
    let g = guide_cost(&e);
    assert!(g.is_finite() && g > 0.0);
}

#[test]
fn marginal_samples_have_the_marginal_moments() {
    let ctx = small_context(4);
    let m = ctx.marginal(0.6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let xs: Vec<Vector> = sample_marginal(&m, 40000, &mut rng).unwrap().into_iter().map(|(_, x)| x).collect();
    let mean = mean_of(&xs);
    let cov = m.covariance();
    for i in 0..2 {
        assert!((mean[i] - m.mean()[i]).abs() < 4.0 * (cov[(i, i)] / 40000.0).sqrt());
    }
}

#[test]
fn stiffness_of_a_single_gaussian_target_is_sample_free() {
    // with one target component the score is affine in x, so ∫‖∇u‖² does not depend on the draws
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let p = random_zero_drift(&mut rng, 2, 3);
    let target = random_mixture(&mut rng, 2, 1);
    let ctx = BridgeContext::new(&p, target, vec(&[0.0, 0.0]), &SweepOptions::default()).unwrap();
    let a = control_diagnostics(&ctx, &Source::Delta, 40, 50, 1).unwrap();
    let b = control_diagnostics(&ctx, &Source::Delta, 40, 50, 2).unwrap();
    assert!((a.stiffness_integral - b.stiffness_integral).abs() < 1e-10 * a.stiffness_integral);
    assert!((a.control_effort - b.control_effort).abs() > 0.0);
}
