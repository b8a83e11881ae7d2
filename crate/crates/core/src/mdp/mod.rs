//! Layered finite-horizon MDPs, policies and exact dynamic-programming oracles.
//!
//! States carry globally unique ids partitioned by level: level `h` owns the
//! contiguous id range `offset(h)..offset(h) + num_states(h)`. Level 0 holds
//! the single fixed start state with one admissible action and zero reward.
//! Per-level tables are stored pair-major, `index = s_local * A_h + a`.

mod exact;
mod policy;
mod sample;

pub use exact::{exact_occupancy, exact_q, exact_return, policy_transition, Occupancy, QTable};
pub use policy::{Policy, PolicySpec};
pub use sample::sample_trajectories;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{QmmrError, Result};

/// Row-sum tolerance for probability vectors.
pub const PROB_TOL: f64 = 1e-12;

/// Level sizes of a layered MDP.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MdpShape {
    /// `states[h]` is `|S_h|`; `states[0] == 1`.
    pub states: Vec<usize>,
    /// Action count at levels `1..=H` (level 0 has exactly one action).
    pub actions: usize,
}

impl MdpShape {
    pub fn new(states: Vec<usize>, actions: usize) -> Result<Self> {
        let shape = MdpShape { states, actions };
        shape.validate()?;
        Ok(shape)
    }

    /// Shape with `per_level` states at each of the levels `1..=horizon`.
    pub fn uniform(horizon: usize, per_level: usize, actions: usize) -> Result<Self> {
        let mut states = vec![1];
        states.extend(std::iter::repeat_n(per_level, horizon));
        Self::new(states, actions)
    }

    pub fn validate(&self) -> Result<()> {
        if self.states.len() < 2 {
            return Err(QmmrError::validation("horizon must be at least 1"));
        }
        if self.states[0] != 1 {
            return Err(QmmrError::validation(
                "level 0 must contain exactly one state",
            ));
        }
        if self.states.contains(&0) {
            return Err(QmmrError::validation(
                "every level needs at least one state",
            ));
        }
        if self.actions == 0 {
            return Err(QmmrError::validation("at least one action is required"));
        }
        Ok(())
    }

    pub fn horizon(&self) -> usize {
        self.states.len() - 1
    }

    pub fn num_states(&self, h: usize) -> usize {
        self.states[h]
    }

    pub fn num_actions(&self, h: usize) -> usize {
        if h == 0 {
            1
        } else {
            self.actions
        }
    }

    pub fn num_pairs(&self, h: usize) -> usize {
        self.num_states(h) * self.num_actions(h)
    }

    pub fn offset(&self, h: usize) -> usize {
        self.states[..h].iter().sum()
    }

    pub fn total_states(&self) -> usize {
        self.states.iter().sum()
    }

    /// Local index of a global state id, if it belongs to level `h`.
    pub fn local(&self, h: usize, global: usize) -> Option<usize> {
        let off = self.offset(h);
        (global >= off && global < off + self.states[h]).then(|| global - off)
    }

    pub fn global(&self, h: usize, local: usize) -> usize {
        self.offset(h) + local
    }

    pub fn pair(&self, h: usize, s_local: usize, a: usize) -> usize {
        s_local * self.num_actions(h) + a
    }

    /// Inverse of [`MdpShape::pair`].
    pub fn unpair(&self, h: usize, pair: usize) -> (usize, usize) {
        let na = self.num_actions(h);
        (pair / na, pair % na)
    }
}

/// Reward noise family. Every family keeps draws in `[0, r_max]` and keeps
/// the conditional mean equal to the reward mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RewardNoise {
    /// `r = mean` exactly.
    Deterministic,
    /// `r = mean + clamp(sigma * z, -m, m)` with `z ~ N(0,1)` and
    /// `m = min(mean, r_max - mean)`; symmetric clipping keeps the mean.
    TruncatedGaussian { sigma: f64 },
    /// `r = r_max` with probability `mean / r_max`, else 0.
    Bernoulli,
}

impl Default for RewardNoise {
    fn default() -> Self {
        RewardNoise::TruncatedGaussian { sigma: 0.25 }
    }
}

impl RewardNoise {
    pub fn validate(&self) -> Result<()> {
        if let RewardNoise::TruncatedGaussian { sigma } = self {
            if !(sigma.is_finite() && *sigma >= 0.0) {
                return Err(QmmrError::validation(
                    "gaussian noise sigma must be finite and >= 0",
                ));
            }
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, mean: f64, r_max: f64, rng: &mut R) -> f64 {
        match *self {
            RewardNoise::Deterministic => mean,
            RewardNoise::TruncatedGaussian { sigma } => {
                let z: f64 = StandardNormal.sample(rng);
                let half_width = mean.min(r_max - mean).max(0.0);
                (mean + (sigma * z).clamp(-half_width, half_width)).clamp(0.0, r_max)
            }
            RewardNoise::Bernoulli => {
                if rng.random::<f64>() * r_max < mean {
                    r_max
                } else {
                    0.0
                }
            }
        }
    }
}

/// Exact finite-horizon layered MDP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MdpDocument", into = "MdpDocument")]
pub struct LayeredMdp {
    shape: MdpShape,
    r_max: f64,
    noise: RewardNoise,
    /// Per level, pair-indexed reward means.
    rewards: Vec<Vec<f64>>,
    /// Per level `h < H`, pair-major rows of length `|S_{h+1}|`.
    transitions: Vec<Vec<f64>>,
}

impl LayeredMdp {
    /// Builds and validates an MDP. `rewards[h]` is pair-indexed (level 0 must
    /// be zero); `transitions[h]` holds `|S_{h+1}|`-long rows per pair for
    /// `h < H`.
    pub fn new(
        shape: MdpShape,
        rewards: Vec<Vec<f64>>,
        transitions: Vec<Vec<f64>>,
        r_max: f64,
        noise: RewardNoise,
    ) -> Result<Self> {
        let mdp = LayeredMdp {
            shape,
            r_max,
            noise,
            rewards,
            transitions,
        };
        mdp.validate()?;
        Ok(mdp)
    }

    fn validate(&self) -> Result<()> {
        let shape = &self.shape;
        shape.validate()?;
        self.noise.validate()?;
        if !(self.r_max.is_finite() && self.r_max > 0.0) {
            return Err(QmmrError::validation("r_max must be positive and finite"));
        }
        let horizon = shape.horizon();
        if self.rewards.len() != horizon + 1 {
            return Err(QmmrError::mismatch(
                "reward levels",
                horizon + 1,
                self.rewards.len(),
            ));
        }
        if self.transitions.len() != horizon {
            return Err(QmmrError::mismatch(
                "transition levels",
                horizon,
                self.transitions.len(),
            ));
        }
        for h in 0..=horizon {
            let pairs = shape.num_pairs(h);
            let r = &self.rewards[h];
            if r.len() != pairs {
                return Err(QmmrError::mismatch(
                    format!("rewards at level {h}"),
                    pairs,
                    r.len(),
                ));
            }
            for &v in r {
                if !(v.is_finite() && (0.0..=self.r_max).contains(&v)) {
                    return Err(QmmrError::validation(format!(
                        "reward mean {v} at level {h} outside [0, r_max]"
                    )));
                }
                if h == 0 && v != 0.0 {
                    return Err(QmmrError::validation("level-0 reward must be zero"));
                }
            }
            if h < horizon {
                let next = shape.num_states(h + 1);
                let t = &self.transitions[h];
                if t.len() != pairs * next {
                    return Err(QmmrError::mismatch(
                        format!("transitions at level {h}"),
                        pairs * next,
                        t.len(),
                    ));
                }
                for (pair, row) in t.chunks(next).enumerate() {
                    check_distribution(row).map_err(|e| {
                        QmmrError::validation(format!("transition row {pair} at level {h}: {e}"))
                    })?;
                }
            }
        }
        Ok(())
    }

    pub fn shape(&self) -> &MdpShape {
        &self.shape
    }

    pub fn horizon(&self) -> usize {
        self.shape.horizon()
    }

    pub fn r_max(&self) -> f64 {
        self.r_max
    }

    /// `V_max = H * R_max`.
    pub fn v_max(&self) -> f64 {
        self.horizon() as f64 * self.r_max
    }

    pub fn noise(&self) -> RewardNoise {
        self.noise
    }

    pub fn rewards(&self, h: usize) -> &[f64] {
        &self.rewards[h]
    }

    pub fn reward_mean(&self, h: usize, pair: usize) -> f64 {
        self.rewards[h][pair]
    }

    /// `P(. | s, a)` over the local states of level `h + 1`.
    pub fn transition_row(&self, h: usize, pair: usize) -> &[f64] {
        let next = self.shape.num_states(h + 1);
        &self.transitions[h][pair * next..(pair + 1) * next]
    }

    pub fn with_noise(mut self, noise: RewardNoise) -> Result<Self> {
        noise.validate()?;
        self.noise = noise;
        Ok(self)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Short content hash used for dataset provenance.
    pub fn content_hash(&self) -> String {
        hash_json(self)
    }
}

pub(crate) fn hash_json<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("in-memory serialization cannot fail");
    hex::encode(&Sha256::digest(&bytes)[..8])
}

pub(crate) fn check_distribution(row: &[f64]) -> std::result::Result<(), String> {
    if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err("negative or non-finite probability".into());
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > PROB_TOL {
        return Err(format!("probabilities sum to {sum}"));
    }
    Ok(())
}

/// Samples an index from a probability vector by inversion.
pub(crate) fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Round-off: fall back to the last index with positive mass.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// On-disk MDP document.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct MdpDocument {
    horizon: usize,
    actions: usize,
    r_max: f64,
    noise: RewardNoise,
    levels: Vec<LevelDocument>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LevelDocument {
    states: usize,
    /// `rewards[s][a]`.
    rewards: Vec<Vec<f64>>,
    /// `transitions[s][a][s']`; empty at the last level.
    #[serde(default)]
    transitions: Vec<Vec<Vec<f64>>>,
}

impl From<LayeredMdp> for MdpDocument {
    fn from(mdp: LayeredMdp) -> Self {
        let shape = &mdp.shape;
        let horizon = shape.horizon();
        let levels = (0..=horizon)
            .map(|h| {
                let na = shape.num_actions(h);
                let rewards = mdp.rewards[h].chunks(na).map(<[f64]>::to_vec).collect();
                let transitions = if h < horizon {
                    let next = shape.num_states(h + 1);
                    mdp.transitions[h]
                        .chunks(na * next)
                        .map(|s_block| s_block.chunks(next).map(<[f64]>::to_vec).collect())
                        .collect()
                } else {
                    Vec::new()
                };
                LevelDocument {
                    states: shape.num_states(h),
                    rewards,
                    transitions,
                }
            })
            .collect();
        MdpDocument {
            horizon,
            actions: shape.actions,
            r_max: mdp.r_max,
            noise: mdp.noise,
            levels,
        }
    }
}

impl TryFrom<MdpDocument> for LayeredMdp {
    type Error = QmmrError;

    fn try_from(doc: MdpDocument) -> Result<Self> {
        if doc.levels.len() != doc.horizon + 1 {
            return Err(QmmrError::mismatch(
                "mdp levels",
                doc.horizon + 1,
                doc.levels.len(),
            ));
        }
        let shape = MdpShape::new(doc.levels.iter().map(|l| l.states).collect(), doc.actions)?;
        let mut rewards = Vec::with_capacity(doc.levels.len());
        let mut transitions = Vec::with_capacity(doc.horizon);
        for (h, level) in doc.levels.into_iter().enumerate() {
            let na = shape.num_actions(h);
            if level.rewards.len() != level.states {
                return Err(QmmrError::mismatch(
                    format!("reward rows at level {h}"),
                    level.states,
                    level.rewards.len(),
                ));
            }
            if let Some(bad) = level.rewards.iter().find(|r| r.len() != na) {
                return Err(QmmrError::mismatch(
                    format!("reward actions at level {h}"),
                    na,
                    bad.len(),
                ));
            }
            rewards.push(level.rewards.into_iter().flatten().collect());
            if h < doc.horizon {
                if level.transitions.len() != level.states
                    || level.transitions.iter().any(|s| s.len() != na)
                {
                    return Err(QmmrError::validation(format!(
                        "transition tensor at level {h} must be [states][actions][next_states]"
                    )));
                }
                transitions.push(level.transitions.into_iter().flatten().flatten().collect());
            } else if !level.transitions.is_empty() {
                return Err(QmmrError::validation(
                    "last level must not have transitions",
                ));
            }
        }
        LayeredMdp::new(shape, rewards, transitions, doc.r_max, doc.noise)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_indexing() {
        let shape = MdpShape::new(vec![1, 3, 2], 2).unwrap();
        assert_eq!(shape.horizon(), 2);
        assert_eq!(shape.offset(2), 4);
        assert_eq!(shape.local(2, 5), Some(1));
        assert_eq!(shape.local(1, 5), None);
        assert_eq!(shape.num_pairs(0), 1);
        assert_eq!(shape.num_pairs(1), 6);
        assert_eq!(shape.unpair(1, shape.pair(1, 2, 1)), (2, 1));
    }

    #[test]
    fn rejects_bad_rows_and_rewards() {
        let shape = MdpShape::new(vec![1, 2], 1).unwrap();
        let bad_row = LayeredMdp::new(
            shape.clone(),
            vec![vec![0.0], vec![0.5, 0.5]],
            vec![vec![0.6, 0.6]],
            1.0,
            RewardNoise::Deterministic,
        );
        assert!(matches!(bad_row, Err(QmmrError::Validation(_))));
        let bad_root = LayeredMdp::new(
            shape.clone(),
            vec![vec![0.1], vec![0.5, 0.5]],
            vec![vec![0.5, 0.5]],
            1.0,
            RewardNoise::Deterministic,
        );
        assert!(bad_root.is_err());
        let out_of_range = LayeredMdp::new(
            shape,
            vec![vec![0.0], vec![0.5, 1.5]],
            vec![vec![0.5, 0.5]],
            1.0,
            RewardNoise::Deterministic,
        );
        assert!(out_of_range.is_err());
    }

    #[test]
    fn json_round_trip_is_lossless() {
        let shape = MdpShape::new(vec![1, 2, 2], 2).unwrap();
        let third = 1.0 / 3.0;
        let mdp = LayeredMdp::new(
            shape,
            vec![
                vec![0.0],
                vec![0.1, 0.2, third, 0.7],
                vec![0.0, 1.0, 0.123_456_789_012_345_68, 0.5],
            ],
            vec![
                vec![third, 1.0 - third],
                vec![0.25, 0.75, 1.0, 0.0, 0.5, 0.5, 0.1, 0.9],
            ],
            1.0,
            RewardNoise::TruncatedGaussian { sigma: 0.2 },
        )
        .unwrap();
        let text = mdp.to_json().unwrap();
        let back = LayeredMdp::from_json(&text).unwrap();
        assert_eq!(mdp, back);
        assert_eq!(mdp.content_hash(), back.content_hash());
    }

    #[test]
    fn noise_stays_in_range() {
        let mut rng = crate::rng::substream(3, 0);
        for noise in [
            RewardNoise::Deterministic,
            RewardNoise::TruncatedGaussian { sigma: 2.0 },
            RewardNoise::Bernoulli,
        ] {
            for mean in [0.0, 0.2, 0.5, 1.0] {
                for _ in 0..200 {
                    let r = noise.sample(mean, 1.0, &mut rng);
                    assert!((0.0..=1.0).contains(&r));
                }
            }
        }
    }

    #[test]
    fn noise_preserves_mean() {
        let mut rng = crate::rng::substream(11, 0);
        let n = 200_000;
        for noise in [
            RewardNoise::TruncatedGaussian { sigma: 0.5 },
            RewardNoise::Bernoulli,
        ] {
            let mean = 0.3;
            let avg: f64 = (0..n)
                .map(|_| noise.sample(mean, 1.0, &mut rng))
                .sum::<f64>()
                / n as f64;
            assert!(
                (avg - mean).abs() < 4.0 / (n as f64).sqrt(),
                "{noise:?}: {avg}"
            );
        }
    }
}
