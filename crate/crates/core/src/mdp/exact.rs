//! Exact backward (Bellman) and forward (flow) recursions.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{LayeredMdp, MdpShape, Policy};
use crate::error::Result;

/// `Q_h(s, a)` for `h = 0..=H`, pair-indexed per level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QTable {
    pub levels: Vec<Vec<f64>>,
}

/// Occupancy `d_h(s, a)` for `h = 0..=H`, pair-indexed per level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Occupancy {
    pub levels: Vec<Vec<f64>>,
}

impl QTable {
    pub fn level(&self, h: usize) -> &[f64] {
        &self.levels[h]
    }

    /// `Q_h(s, pi) = sum_a pi(a|s) Q_h(s, a)`; zero past the horizon.
    pub fn policy_value(&self, shape: &MdpShape, pi: &Policy, h: usize, s_local: usize) -> f64 {
        if h > shape.horizon() {
            return 0.0;
        }
        let na = shape.num_actions(h);
        pi.dist(h, s_local)
            .iter()
            .zip(&self.levels[h][s_local * na..(s_local + 1) * na])
            .map(|(p, q)| p * q)
            .sum()
    }
}

impl Occupancy {
    pub fn level(&self, h: usize) -> &[f64] {
        &self.levels[h]
    }
}

/// Dense matrix `M[(s,a), (s',a')] = P(s'|s,a) pi(a'|s')` from level `h` to `h + 1`.
pub fn policy_transition(mdp: &LayeredMdp, pi: &Policy, h: usize) -> DMatrix<f64> {
    let shape = mdp.shape();
    let na_next = shape.num_actions(h + 1);
    let mut m = DMatrix::zeros(shape.num_pairs(h), shape.num_pairs(h + 1));
    for pair in 0..shape.num_pairs(h) {
        for (s_next, &p) in mdp.transition_row(h, pair).iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            for (a_next, &q) in pi.dist(h + 1, s_next).iter().enumerate() {
                m[(pair, s_next * na_next + a_next)] += p * q;
            }
        }
    }
    m
}

/// Backward recursion `Q_h = R + P^pi Q_{h+1}` with `Q_{H+1} = 0`.
pub fn exact_q(mdp: &LayeredMdp, pi: &Policy) -> Result<QTable> {
    let shape = mdp.shape();
    pi.validate(shape)?;
    let horizon = shape.horizon();
    let mut levels = vec![Vec::new(); horizon + 1];
    levels[horizon] = mdp.rewards(horizon).to_vec();
    for h in (0..horizon).rev() {
        let na = shape.num_actions(h + 1);
        let next_values: Vec<f64> = (0..shape.num_states(h + 1))
            .map(|s| {
                pi.dist(h + 1, s)
                    .iter()
                    .zip(&levels[h + 1][s * na..(s + 1) * na])
                    .map(|(p, q)| p * q)
                    .sum()
            })
            .collect();
        levels[h] = (0..shape.num_pairs(h))
            .map(|pair| {
                let cont: f64 = mdp
                    .transition_row(h, pair)
                    .iter()
                    .zip(&next_values)
                    .map(|(p, v)| p * v)
                    .sum();
                mdp.reward_mean(h, pair) + cont
            })
            .collect();
    }
    Ok(QTable { levels })
}

/// Forward flow `d_{h+1}(s',a') = pi(a'|s') sum_{s,a} d_h(s,a) P(s'|s,a)`
/// from the point mass on `(s_0, a_0)`.
pub fn exact_occupancy(mdp: &LayeredMdp, pi: &Policy) -> Result<Occupancy> {
    let shape = mdp.shape();
    pi.validate(shape)?;
    let horizon = shape.horizon();
    let mut levels = Vec::with_capacity(horizon + 1);
    levels.push(vec![1.0]);
    for h in 0..horizon {
        let mut state_mass = vec![0.0; shape.num_states(h + 1)];
        for (pair, &d) in levels[h].iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            for (s_next, &p) in mdp.transition_row(h, pair).iter().enumerate() {
                state_mass[s_next] += d * p;
            }
        }
        let next: Vec<f64> = state_mass
            .iter()
            .enumerate()
            .flat_map(|(s, &m)| pi.dist(h + 1, s).iter().map(move |q| m * q))
            .collect();
        levels.push(next);
    }
    Ok(Occupancy { levels })
}

/// `J(pi) = Q_0(s_0, a_0)`.
pub fn exact_return(mdp: &LayeredMdp, pi: &Policy) -> Result<f64> {
    Ok(exact_q(mdp, pi)?.levels[0][0])
}
