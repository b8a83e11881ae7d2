#![allow(dead_code)]

use qmmr_core::fixtures::{generate_mdp, Fixture, FixtureKind, FixtureSpec, LevelSizes};
use qmmr_core::mdp::{Policy, RewardNoise};

pub fn fixture(
    kind: FixtureKind,
    horizon: usize,
    states: usize,
    actions: usize,
    dim: Option<usize>,
    seed: u64,
) -> Fixture {
    let spec = FixtureSpec {
        kind,
        horizon,
        states: LevelSizes::Uniform(states),
        actions,
        dim,
        r_max: 1.0,
        noise: RewardNoise::default(),
        perturbation: 0.3,
        seed,
    };
    generate_mdp(&spec, None).unwrap()
}

/// Misspecified fixture whose `Q` coordinate belongs to `pi`.
pub fn misspecified(
    horizon: usize,
    states: usize,
    actions: usize,
    dim: usize,
    seed: u64,
    pi: &Policy,
) -> Fixture {
    let spec = FixtureSpec {
        kind: FixtureKind::MisspecifiedLinear,
        horizon,
        states: LevelSizes::Uniform(states),
        actions,
        dim: Some(dim),
        r_max: 1.0,
        noise: RewardNoise::default(),
        perturbation: 0.3,
        seed,
    };
    generate_mdp(&spec, Some(pi)).unwrap()
}

pub fn rms(a: &[f64], b: &[f64]) -> f64 {
    (a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64).sqrt()
}
