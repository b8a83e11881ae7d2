use rayon::prelude::*;

use super::{sample_index, LayeredMdp, Policy};
use crate::dataset::{Provenance, TrajectoryDataset};
use crate::error::Result;
use crate::rng::substream;

/// Draws `n` independent trajectories of `behavior`. Trajectory `i` uses its
/// own random stream, so the result does not depend on the thread count.
pub fn sample_trajectories(
    mdp: &LayeredMdp,
    behavior: &Policy,
    n: usize,
    seed: u64,
) -> Result<TrajectoryDataset> {
    behavior.validate(mdp.shape())?;
    if n == 0 {
        return Err(crate::error::QmmrError::validation("n must be positive"));
    }
    let shape = mdp.shape();
    let horizon = shape.horizon();
    let rows: Vec<(Vec<usize>, Vec<usize>, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = substream(seed, i as u64);
            let mut s_local = 0;
            let mut states = Vec::with_capacity(horizon + 1);
            let mut actions = Vec::with_capacity(horizon + 1);
            let mut rewards = Vec::with_capacity(horizon + 1);
            for h in 0..=horizon {
                let a = sample_index(behavior.dist(h, s_local), &mut rng);
                let pair = shape.pair(h, s_local, a);
                let r = if h == 0 {
                    0.0
                } else {
                    mdp.noise()
                        .sample(mdp.reward_mean(h, pair), mdp.r_max(), &mut rng)
                };
                states.push(shape.global(h, s_local));
                actions.push(a);
                rewards.push(r);
                if h < horizon {
                    s_local = sample_index(mdp.transition_row(h, pair), &mut rng);
                }
            }
            (states, actions, rewards)
        })
        .collect();
    let mut states = vec![Vec::with_capacity(n); horizon + 1];
    let mut actions = vec![Vec::with_capacity(n); horizon + 1];
    let mut rewards = vec![Vec::with_capacity(n); horizon + 1];
    for (s, a, r) in rows {
        for h in 0..=horizon {
            states[h].push(s[h]);
            actions[h].push(a[h]);
            rewards[h].push(r[h]);
        }
    }
    let provenance = Provenance {
        mdp_hash: mdp.content_hash(),
        behavior_hash: behavior.content_hash(),
        seed,
    };
    Ok(TrajectoryDataset::from_columns(
        states,
        actions,
        rewards,
        Some(provenance),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::exact_return;
    use crate::test_support::{chain, random_mdp};

    #[test]
    fn same_seed_same_data() {
        let mdp = random_mdp(3, 3, 2, 0);
        let pi = Policy::uniform(mdp.shape());
        let a = sample_trajectories(&mdp, &pi, 64, 7).unwrap();
        let b = sample_trajectories(&mdp, &pi, 64, 7).unwrap();
        let c = sample_trajectories(&mdp, &pi, 64, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        a.validate(mdp.shape()).unwrap();
        assert_eq!(a.provenance().unwrap().seed, 7);
    }

    #[test]
    fn deterministic_chain_returns_horizon() {
        let mdp = chain(4);
        let pi = Policy::uniform(mdp.shape());
        let ds = sample_trajectories(&mdp, &pi, 5, 0).unwrap();
        for i in 0..5 {
            assert_eq!(ds.trajectory_return(i), 4.0);
            assert_eq!(ds.rewards(0)[i], 0.0);
        }
    }

    #[test]
    fn monte_carlo_matches_exact_return() {
        let mdp = random_mdp(3, 3, 2, 12);
        let pi = Policy::uniform(mdp.shape());
        let n = 40_000;
        let ds = sample_trajectories(&mdp, &pi, n, 1).unwrap();
        let mc = (0..n).map(|i| ds.trajectory_return(i)).sum::<f64>() / n as f64;
        let exact = exact_return(&mdp, &pi).unwrap();
        assert!(
            (mc - exact).abs() < 4.0 * mdp.v_max() / (n as f64).sqrt(),
            "{mc} vs {exact}"
        );
    }
}
