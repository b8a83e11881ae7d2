use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{check_distribution, hash_json, MdpShape};
use crate::error::{QmmrError, Result};
use crate::rng::substream;

/// Per-level action distributions `pi(a | s)`, pair-indexed like every other
/// level table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PolicyDocument", into = "PolicyDocument")]
pub struct Policy {
    actions: usize,
    levels: Vec<Vec<f64>>,
}

impl Policy {
    /// Builds a policy from `dist(h, s_local)`, one distribution per state.
    pub fn from_fn(
        shape: &MdpShape,
        mut dist: impl FnMut(usize, usize) -> Vec<f64>,
    ) -> Result<Self> {
        let levels = (0..=shape.horizon())
            .map(|h| (0..shape.num_states(h)).flat_map(|s| dist(h, s)).collect())
            .collect();
        let policy = Policy {
            actions: shape.actions,
            levels,
        };
        policy.validate(shape)?;
        Ok(policy)
    }

    pub fn uniform(shape: &MdpShape) -> Self {
        Self::from_fn(shape, |h, _| {
            let na = shape.num_actions(h);
            vec![1.0 / na as f64; na]
        })
        .expect("uniform policy is valid")
    }

    /// Deterministic policy choosing `choose(h, s_local)` (ignored at level 0).
    pub fn deterministic(
        shape: &MdpShape,
        mut choose: impl FnMut(usize, usize) -> usize,
    ) -> Result<Self> {
        Self::from_fn(shape, |h, s| {
            let na = shape.num_actions(h);
            let mut d = vec![0.0; na];
            let a = if h == 0 { 0 } else { choose(h, s) };
            if a < na {
                d[a] = 1.0;
            }
            d
        })
    }

    /// Softmax of i.i.d. standard-uniform scores scaled by `1 / temperature`.
    pub fn softmax_random(shape: &MdpShape, temperature: f64, seed: u64) -> Result<Self> {
        if !(temperature.is_finite() && temperature > 0.0) {
            return Err(QmmrError::validation(
                "softmax temperature must be positive",
            ));
        }
        let mut rng = substream(seed, 0x0501_73a4);
        Self::from_fn(shape, |h, _| {
            let na = shape.num_actions(h);
            let scores: Vec<f64> = (0..na).map(|_| rng.random::<f64>() / temperature).collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exp: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = exp.iter().sum();
            exp.into_iter().map(|e| e / z).collect()
        })
    }

    /// `(1 - epsilon) * self + epsilon * other`.
    pub fn mix(&self, other: &Policy, epsilon: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&epsilon) {
            return Err(QmmrError::validation("mixing weight must lie in [0, 1]"));
        }
        if self.actions != other.actions || self.levels.len() != other.levels.len() {
            return Err(QmmrError::validation(
                "cannot mix policies of different shapes",
            ));
        }
        let levels = self
            .levels
            .iter()
            .zip(&other.levels)
            .map(|(a, b)| {
                a.iter()
                    .zip(b)
                    .map(|(x, y)| (1.0 - epsilon) * x + epsilon * y)
                    .collect()
            })
            .collect();
        Ok(Policy {
            actions: self.actions,
            levels,
        })
    }

    pub fn validate(&self, shape: &MdpShape) -> Result<()> {
        if self.actions != shape.actions {
            return Err(QmmrError::mismatch(
                "policy actions",
                shape.actions,
                self.actions,
            ));
        }
        if self.levels.len() != shape.horizon() + 1 {
            return Err(QmmrError::mismatch(
                "policy levels",
                shape.horizon() + 1,
                self.levels.len(),
            ));
        }
        for (h, level) in self.levels.iter().enumerate() {
            let na = shape.num_actions(h);
            if level.len() != shape.num_pairs(h) {
                return Err(QmmrError::mismatch(
                    format!("policy pairs at level {h}"),
                    shape.num_pairs(h),
                    level.len(),
                ));
            }
            for (s, dist) in level.chunks(na).enumerate() {
                check_distribution(dist).map_err(|e| {
                    QmmrError::validation(format!("policy at level {h}, state {s}: {e}"))
                })?;
            }
        }
        Ok(())
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    /// Pair-indexed probabilities at level `h`.
    pub fn level(&self, h: usize) -> &[f64] {
        &self.levels[h]
    }

    fn actions_at(&self, h: usize) -> usize {
        if h == 0 {
            1
        } else {
            self.actions
        }
    }

    /// `pi(. | s)` for local state `s` at level `h`.
    pub fn dist(&self, h: usize, s_local: usize) -> &[f64] {
        let na = self.actions_at(h);
        &self.levels[h][s_local * na..(s_local + 1) * na]
    }

    pub fn prob(&self, h: usize, s_local: usize, a: usize) -> f64 {
        self.dist(h, s_local)[a]
    }

    pub fn content_hash(&self) -> String {
        hash_json(self)
    }
}

/// Named policy constructions used by experiment configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicySpec {
    Uniform,
    Softmax { temperature: f64, seed: u64 },
    EpsilonMix { epsilon: f64, base: Box<PolicySpec> },
}

impl PolicySpec {
    pub fn build(&self, shape: &MdpShape) -> Result<Policy> {
        match self {
            PolicySpec::Uniform => Ok(Policy::uniform(shape)),
            PolicySpec::Softmax { temperature, seed } => {
                Policy::softmax_random(shape, *temperature, *seed)
            }
            PolicySpec::EpsilonMix { epsilon, base } => {
                base.build(shape)?.mix(&Policy::uniform(shape), *epsilon)
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PolicyDocument {
    actions: usize,
    /// `levels[h][s][a]`.
    levels: Vec<Vec<Vec<f64>>>,
}

impl From<Policy> for PolicyDocument {
    fn from(p: Policy) -> Self {
        let levels = p
            .levels
            .iter()
            .enumerate()
            .map(|(h, l)| l.chunks(p.actions_at(h)).map(<[f64]>::to_vec).collect())
            .collect();
        PolicyDocument {
            actions: p.actions,
            levels,
        }
    }
}

impl TryFrom<PolicyDocument> for Policy {
    type Error = QmmrError;

    fn try_from(doc: PolicyDocument) -> Result<Self> {
        let states: Vec<usize> = doc.levels.iter().map(Vec::len).collect();
        let shape = MdpShape::new(states, doc.actions)?;
        let policy = Policy {
            actions: doc.actions,
            levels: doc
                .levels
                .into_iter()
                .map(|l| l.into_iter().flatten().collect())
                .collect(),
        };
        policy.validate(&shape)?;
        Ok(policy)
    }
}
