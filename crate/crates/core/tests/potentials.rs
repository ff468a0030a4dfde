use cfjoint_core::geom::{Futures, Scene, V2};
use cfjoint_core::potentials::{
    check_gradient, col_delta, composite, ObstacleFrame, PotentialContext, PotentialRegistry, PotentialWeights,
};
use cfjoint_core::synth::{generate_episode, Episode, EpisodeSpec, WorldConfig};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn episode(i: u64) -> Episode {
    generate_episode(&WorldConfig::default(), i, &EpisodeSpec::default()).unwrap()
}

/// Ground truth jittered enough to activate every hinge somewhere.
fn noisy(ep: &Episode, seed: u64, sigma: f64) -> (Futures, V2) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = Normal::new(0.0, sigma).unwrap();
    let mut jit = |p: V2| p + V2::new(n.sample(&mut rng), n.sample(&mut rng));
    let f = ep.gt_futures.iter().map(|a| a.iter().map(|&p| jit(p)).collect()).collect();
    let token = jit(ep.gt_endpoint);
    (f, token)
}

fn permuted(scene: &Scene, f: &Futures, perm: &[usize]) -> (Scene, Futures) {
    let mut s = scene.clone();
    s.agents = perm.iter().map(|&i| scene.agents[i].clone()).collect();
    (s, perm.iter().map(|&i| f[i].clone()).collect())
}

#[test]
fn composite_gradient_matches_central_differences() {
    let w = PotentialWeights::default();
    let reg = PotentialRegistry::default();
    let (mut checked, mut skipped) = (0, 0);
    for i in 0..60 {
        let ep = episode(i);
        let (f, token) = noisy(&ep, i, 0.8);
        let ctx = PotentialContext {
            scene: &ep.scene,
            token,
            weights: &w,
        };
        let rep = reg.composite(&ctx, &f);
        let c = check_gradient(|y| reg.total(&ctx, y), &f, &rep.gradient, 1e-5, 1e-4);
        assert!(c.rel_err < 1e-5, "scene {i}: {c:?}");
        checked += c.checked;
        skipped += c.skipped;
    }
    assert!(skipped * 100 < checked, "skipped {skipped} of {}", checked + skipped);
}

#[test]
fn col_delta_gradient_matches_central_differences() {
    for i in 0..50 {
        let ep = episode(100 + i);
        let (f, _) = noisy(&ep, i, 1.0);
        let frame = ObstacleFrame::of(&ep.scene);
        let radii = ep.scene.radii();
        let val = |y: &Futures| col_delta(y, &radii, &frame, &ep.scene.map, 0.2).value;
        let out = col_delta(&f, &radii, &frame, &ep.scene.map, 0.2);
        let c = check_gradient(val, &f, &out.gradient, 1e-5, 1e-4);
        assert!(c.rel_err < 1e-5, "scene {i}: {c:?}");
    }
}

#[test]
fn zero_gradient_means_every_hinge_is_inactive() {
    let w = PotentialWeights::default();
    let reg = PotentialRegistry::default();
    let mut zero = 0;
    for i in 0..200 {
        let ep = episode(300 + i);
        let ctx = PotentialContext {
            scene: &ep.scene,
            token: ep.gt_endpoint,
            weights: &w,
        };
        let rep = reg.composite(&ctx, &ep.gt_futures);
        if rep.gradient.iter().flatten().all(|g| *g == V2::ZERO) {
            zero += 1;
            let p = rep.per_term;
            for v in [p.overlap, p.obstacle, p.tube, p.smooth] {
                assert_eq!(v, 0.0, "episode {i}: {p:?}");
            }
            assert!(p.endpoint < 1e-18);
        }
    }
    assert!(zero > 0, "no generated scene had a stationary ground truth");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn terms_are_nonnegative(i in 0u64..10_000, seed in any::<u64>(), sigma in 0.0f64..3.0) {
        let ep = episode(i);
        let (f, token) = noisy(&ep, seed, sigma);
        let rep = composite(&f, &ep.scene, token, &PotentialWeights::default());
        let p = rep.per_term;
        for v in [p.overlap, p.obstacle, p.tube, p.endpoint, p.smooth] {
            prop_assert!(v >= 0.0);
        }
        prop_assert!(rep.total >= 0.0);
        prop_assert!((rep.total - p.sum()).abs() <= 1e-9 * rep.total.max(1.0));
    }

    #[test]
    fn composite_ignores_non_ego_order(i in 0u64..10_000, seed in any::<u64>(), rot in 0usize..8) {
        let ep = episode(i);
        let (f, token) = noisy(&ep, seed, 0.8);
        let n = f.len();
        let mut perm: Vec<usize> = (0..n).collect();
        if n > 2 {
            perm[1..].rotate_left(rot % (n - 1));
        }
        perm[1..].reverse();
        let (s2, f2) = permuted(&ep.scene, &f, &perm);
        let w = PotentialWeights::default();
        let a = composite(&f, &ep.scene, token, &w);
        let b = composite(&f2, &s2, token, &w);
        prop_assert!((a.total - b.total).abs() <= 1e-9 * a.total.max(1.0));
        for (k, &src) in perm.iter().enumerate() {
            for (ga, gb) in a.gradient[src].iter().zip(&b.gradient[k]) {
                prop_assert!((*ga - *gb).norm() <= 1e-9 * ga.norm().max(1.0));
            }
        }
    }

    #[test]
    fn col_delta_grows_with_clearance(i in 0u64..10_000, seed in any::<u64>(), d1 in 0.0f64..0.5, d2 in 0.0f64..0.5) {
        let ep = episode(i);
        let (f, _) = noisy(&ep, seed, 0.5);
        let frame = ObstacleFrame::of(&ep.scene);
        let radii = ep.scene.radii();
        let (lo, hi) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
        let a = col_delta(&f, &radii, &frame, &ep.scene.map, lo).value;
        let b = col_delta(&f, &radii, &frame, &ep.scene.map, hi).value;
        prop_assert!(a >= 0.0);
        prop_assert!(a <= b + 1e-12);
    }
}
