mod common;

use common::fixture;
use proptest::prelude::*;
use qmmr_core::fixtures::FixtureKind;
use qmmr_core::mdp::{exact_q, exact_return, sample_trajectories, Policy};
use qmmr_core::qmmr::{
    error_bound, error_decomposition, estimate_return, telescoping_sum, WeightMatrix,
};
use qmmr_core::rng::substream;
use rand::Rng;

fn random_weights(horizon: usize, n: usize, seed: u64, scale: f64) -> WeightMatrix {
    let mut rng = substream(seed, 42);
    let mut levels = vec![vec![1.0; n]];
    for _ in 0..horizon {
        levels.push(
            (0..n)
                .map(|_| scale * (rng.random::<f64>() * 4.0 - 1.0))
                .collect(),
        );
    }
    let mut losses = vec![0.0];
    losses.extend((0..horizon).map(|_| rng.random::<f64>()));
    WeightMatrix::new(levels, losses).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn telescoping_recovers_initial_value(seed in 0u64..1000, horizon in 1usize..5, n in 1usize..60) {
        let fx = fixture(FixtureKind::RandomTabular, horizon, 3, 2, None, seed);
        let shape = fx.mdp.shape();
        let pi = Policy::softmax_random(shape, 0.7, seed).unwrap();
        let ds = sample_trajectories(&fx.mdp, &Policy::uniform(shape), n, seed).unwrap();
        let q = exact_q(&fx.mdp, &pi).unwrap();
        let weights = random_weights(horizon, n, seed, 3.0);
        let sum = telescoping_sum(&ds, shape, &weights, &q);
        prop_assert!((sum - q.levels[0][0]).abs() <= 1e-10);
    }

    #[test]
    fn decomposition_accounts_for_the_whole_error(seed in 0u64..1000, horizon in 1usize..5, n in 1usize..60) {
        let fx = fixture(FixtureKind::RandomTabular, horizon, 3, 2, None, seed);
        let shape = fx.mdp.shape();
        let pi = Policy::softmax_random(shape, 0.7, seed).unwrap();
        let ds = sample_trajectories(&fx.mdp, &Policy::uniform(shape), n, seed).unwrap();
        let q = exact_q(&fx.mdp, &pi).unwrap();
        let weights = random_weights(horizon, n, seed, 1.0);
        let parts = error_decomposition(&ds, shape, &pi, &weights, &q);
        let err = estimate_return(&ds, &weights) - exact_return(&fx.mdp, &pi).unwrap();
        prop_assert!((parts.total() - err).abs() <= 1e-10);
    }

    #[test]
    fn estimate_scales_with_weights(seed in 0u64..1000, c in -3.0f64..3.0) {
        let fx = fixture(FixtureKind::RandomTabular, 3, 3, 2, None, seed);
        let shape = fx.mdp.shape();
        let ds = sample_trajectories(&fx.mdp, &Policy::uniform(shape), 40, seed).unwrap();
        let w = random_weights(3, 40, seed, 1.0);
        let mut levels: Vec<Vec<f64>> = (0..=3).map(|h| w.level(h).to_vec()).collect();
        for v in levels[1..].iter_mut().flatten() {
            *v *= c;
        }
        let scaled = WeightMatrix::new(levels, vec![0.0; 4]).unwrap();
        let a = estimate_return(&ds, &scaled);
        let b = c * estimate_return(&ds, &w);
        prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
    }

    #[test]
    fn bound_is_monotone_in_confidence(seed in 0u64..1000, d1 in 0.01f64..0.5, d2 in 0.5f64..0.99) {
        let fx = fixture(FixtureKind::RandomTabular, 2, 3, 2, None, seed);
        let shape = fx.mdp.shape();
        let ds = sample_trajectories(&fx.mdp, &Policy::uniform(shape), 30, seed).unwrap();
        let w = random_weights(2, 30, seed, 1.0);
        let tight = error_bound(&ds, &w, 2.0, d1).unwrap();
        let loose = error_bound(&ds, &w, 2.0, d2).unwrap();
        prop_assert!(tight.bound >= loose.bound);
        prop_assert!(loose.bound >= loose.loss_total);
        let recomputed: f64 = tight.per_level[1..].iter().map(|l| l.loss).sum::<f64>()
            + tight.per_level.iter().map(|l| l.eps_stat).sum::<f64>();
        prop_assert!((recomputed - tight.bound).abs() <= 1e-12);
    }
}
