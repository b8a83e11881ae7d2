//! Seeded MDP + feature generators used by tests and experiments.
//!
//! * `random_tabular`: dense random transitions and rewards, one-hot features.
//! * `linear_complete`: a linear MDP. Features lie on the simplex,
//!   `P_h(.|s,a) = sum_j phi_j(s,a) mu_{h,j}` and `R_h = phi^T theta_h`, so every
//!   policy's Bellman operator maps linear functions to linear functions.
//! * `misspecified_linear`: the linear MDP's transitions are mixed with random
//!   rows, which breaks closure, and one feature coordinate is added so that
//!   `Q^pi_h` of the given target policy lies in the span: the part of `Q^pi_h`
//!   orthogonal to the base features, or a random column where `Q^pi_h` is
//!   already linear (always at level `H`, where `Q_H = R_H`).

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::diagnostics::{check_completeness, compute_feature_dynamics};
use crate::error::{QmmrError, Result};
use crate::features::FeatureMap;
use crate::mdp::{exact_q, LayeredMdp, MdpShape, Policy, RewardNoise};
use crate::rng::{derive_seed, substream};

/// Residual a misspecified fixture must exceed at some level.
pub const MISSPECIFICATION_FLOOR: f64 = 1e-3;
const MAX_ATTEMPTS: u64 = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FixtureKind {
    RandomTabular,
    LinearComplete,
    MisspecifiedLinear,
}

/// `|S_h|` for levels `1..=H`: one size for all levels or an explicit list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LevelSizes {
    Uniform(usize),
    PerLevel(Vec<usize>),
}

fn default_r_max() -> f64 {
    1.0
}

fn default_perturbation() -> f64 {
    0.3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureSpec {
    pub kind: FixtureKind,
    pub horizon: usize,
    pub states: LevelSizes,
    pub actions: usize,
    /// Feature dimension; required by the linear kinds, ignored (one-hot) otherwise.
    #[serde(default)]
    pub dim: Option<usize>,
    #[serde(default = "default_r_max")]
    pub r_max: f64,
    #[serde(default)]
    pub noise: RewardNoise,
    /// Weight of the random transition component in `misspecified_linear`.
    #[serde(default = "default_perturbation")]
    pub perturbation: f64,
    pub seed: u64,
}

impl FixtureSpec {
    pub fn shape(&self) -> Result<MdpShape> {
        let mut states = vec![1];
        match &self.states {
            LevelSizes::Uniform(k) => states.extend(std::iter::repeat_n(*k, self.horizon)),
            LevelSizes::PerLevel(list) => {
                if list.len() != self.horizon {
                    return Err(QmmrError::mismatch(
                        "per-level state counts",
                        self.horizon,
                        list.len(),
                    ));
                }
                states.extend(list);
            }
        }
        MdpShape::new(states, self.actions)
    }

    fn feature_dim(&self, shape: &MdpShape) -> Result<usize> {
        let min_pairs = (1..=shape.horizon())
            .map(|h| shape.num_pairs(h))
            .min()
            .unwrap_or(0);
        if let Some(d) = self.dim {
            if d == 0 {
                return Err(QmmrError::validation("feature dimension must be positive"));
            }
            if d > min_pairs {
                return Err(QmmrError::validation(format!(
                    "feature dimension {d} exceeds the {min_pairs} state-action pairs of the smallest level"
                )));
            }
        }
        match (self.kind, self.dim) {
            (FixtureKind::RandomTabular, _) => Ok(0),
            (FixtureKind::MisspecifiedLinear, Some(d)) if d < 2 => Err(QmmrError::validation(
                "misspecified_linear needs dim >= 2 (one coordinate holds Q^pi)",
            )),
            (_, Some(d)) => Ok(d),
            (_, None) => Err(QmmrError::validation(
                "linear fixtures need a feature dimension",
            )),
        }
    }
}

/// A generated MDP with its feature map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fixture {
    pub mdp: LayeredMdp,
    pub features: FeatureMap,
}

/// Builds the fixture described by `spec`. `target` is the policy whose `Q`
/// function `misspecified_linear` embeds (uniform when absent); the other
/// kinds ignore it.
pub fn generate_mdp(spec: &FixtureSpec, target: Option<&Policy>) -> Result<Fixture> {
    generate_mdp_for(spec, target, None)
}

/// [`generate_mdp`] with the behavior policy used by the misspecified
/// post-check: besides the completeness residual, the feature dynamics under
/// `behavior` (uniform when absent) must drift from `E_{d_h^pi}[phi]` by more
/// than [`MISSPECIFICATION_FLOOR`] at some level (skipped when the two
/// policies coincide).
pub fn generate_mdp_for(
    spec: &FixtureSpec,
    target: Option<&Policy>,
    behavior: Option<&Policy>,
) -> Result<Fixture> {
    let shape = spec.shape()?;
    let dim = spec.feature_dim(&shape)?;
    if !(spec.r_max.is_finite() && spec.r_max > 0.0) {
        return Err(QmmrError::validation("r_max must be positive and finite"));
    }
    spec.noise.validate()?;
    match spec.kind {
        FixtureKind::RandomTabular => {
            let mut rng = substream(derive_seed(spec.seed, &[0]), 0);
            let rewards = random_rewards(&shape, spec.r_max, &mut rng);
            let transitions = (0..shape.horizon())
                .map(|h| {
                    (0..shape.num_pairs(h))
                        .flat_map(|_| dirichlet(shape.num_states(h + 1), &mut rng))
                        .collect()
                })
                .collect();
            let mdp = LayeredMdp::new(shape.clone(), rewards, transitions, spec.r_max, spec.noise)?;
            Ok(Fixture {
                features: FeatureMap::one_hot(&shape),
                mdp,
            })
        }
        FixtureKind::LinearComplete => {
            let mut rng = substream(derive_seed(spec.seed, &[1]), 0);
            let (mdp, features) = linear_mdp(&shape, dim, spec, &mut rng)?;
            Ok(Fixture { mdp, features })
        }
        FixtureKind::MisspecifiedLinear => {
            if !(spec.perturbation > 0.0 && spec.perturbation <= 1.0) {
                return Err(QmmrError::validation("perturbation must lie in (0, 1]"));
            }
            let uniform = Policy::uniform(&shape);
            let pi = target.unwrap_or(&uniform);
            let pi_b = behavior.unwrap_or(&uniform);
            pi.validate(&shape)?;
            pi_b.validate(&shape)?;
            for attempt in 0..MAX_ATTEMPTS {
                let mut rng = substream(derive_seed(spec.seed, &[2, attempt]), 0);
                let fixture = misspecified(&shape, dim, spec, pi, &mut rng)?;
                let uniform_weights =
                    |h: usize| vec![1.0 / shape.num_pairs(h) as f64; shape.num_pairs(h)];
                let worst = (1..=shape.horizon())
                    .map(|h| {
                        check_completeness(
                            &fixture.mdp,
                            pi,
                            &fixture.features,
                            h,
                            &uniform_weights(h),
                        )
                    })
                    .collect::<Result<Vec<f64>>>()?
                    .into_iter()
                    .fold(0.0, f64::max);
                if worst <= MISSPECIFICATION_FLOOR {
                    continue;
                }
                // On-policy, psi equals E_pi[phi] whatever the features.
                if pi == pi_b {
                    return Ok(fixture);
                }
                let dynamics = compute_feature_dynamics(&fixture.mdp, pi, pi_b, &fixture.features)?;
                let drift = (1..=shape.horizon())
                    .map(|h| (&dynamics.psi[h] - &dynamics.target_mean[h]).norm())
                    .fold(0.0, f64::max);
                if drift > MISSPECIFICATION_FLOOR {
                    return Ok(fixture);
                }
            }
            Err(QmmrError::validation(
                "could not generate a misspecified fixture for this shape; increase states or perturbation",
            ))
        }
    }
}

fn dirichlet(k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let draws: Vec<f64> = (0..k).map(|_| Exp1.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    draws.iter().map(|v| v / total).collect()
}

fn random_rewards(shape: &MdpShape, r_max: f64, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut rewards = vec![vec![0.0]];
    for h in 1..=shape.horizon() {
        rewards.push(
            (0..shape.num_pairs(h))
                .map(|_| r_max * rng.random::<f64>())
                .collect(),
        );
    }
    rewards
}

/// Simplex features, mixture transitions and linear rewards.
fn linear_mdp(
    shape: &MdpShape,
    dim: usize,
    spec: &FixtureSpec,
    rng: &mut ChaCha8Rng,
) -> Result<(LayeredMdp, FeatureMap)> {
    let horizon = shape.horizon();
    let phis: Vec<DMatrix<f64>> = (0..=horizon)
        .map(|h| {
            let rows: Vec<f64> = (0..shape.num_pairs(h))
                .flat_map(|_| dirichlet(dim, rng))
                .collect();
            DMatrix::from_row_slice(shape.num_pairs(h), dim, &rows)
        })
        .collect();
    let mut rewards = vec![vec![0.0]];
    for phi in phis.iter().skip(1) {
        let theta: Vec<f64> = (0..dim).map(|_| spec.r_max * rng.random::<f64>()).collect();
        rewards.push(
            phi.row_iter()
                .map(|r| {
                    r.iter()
                        .zip(&theta)
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                        .clamp(0.0, spec.r_max)
                })
                .collect(),
        );
    }
    let transitions = (0..horizon)
        .map(|h| {
            let next = shape.num_states(h + 1);
            let mu: Vec<Vec<f64>> = (0..dim).map(|_| dirichlet(next, rng)).collect();
            phis[h]
                .row_iter()
                .flat_map(|row| {
                    let mut p = vec![0.0; next];
                    for (j, &c) in row.iter().enumerate() {
                        p.iter_mut().zip(&mu[j]).for_each(|(x, m)| *x += c * m);
                    }
                    normalize(p)
                })
                .collect()
        })
        .collect();
    let mdp = LayeredMdp::new(shape.clone(), rewards, transitions, spec.r_max, spec.noise)?;
    let features = FeatureMap::new(shape, phis)?;
    Ok((mdp, features))
}

/// Rescales a nonnegative vector to sum to one, absorbing round-off.
fn normalize(mut p: Vec<f64>) -> Vec<f64> {
    let total: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= total);
    p
}

fn misspecified(
    shape: &MdpShape,
    dim: usize,
    spec: &FixtureSpec,
    pi: &Policy,
    rng: &mut ChaCha8Rng,
) -> Result<Fixture> {
    let (base, base_features) = linear_mdp(shape, dim - 1, spec, rng)?;
    let eps = spec.perturbation;
    let horizon = shape.horizon();
    let transitions = (0..horizon)
        .map(|h| {
            let next = shape.num_states(h + 1);
            (0..shape.num_pairs(h))
                .flat_map(|pair| {
                    let noise = dirichlet(next, rng);
                    let mixed = base
                        .transition_row(h, pair)
                        .iter()
                        .zip(&noise)
                        .map(|(p, q)| (1.0 - eps) * p + eps * q)
                        .collect();
                    normalize(mixed)
                })
                .collect()
        })
        .collect();
    let rewards = (0..=horizon).map(|h| base.rewards(h).to_vec()).collect();
    let mdp = LayeredMdp::new(shape.clone(), rewards, transitions, spec.r_max, spec.noise)?;
    let q = exact_q(&mdp, pi)?;
    let levels = (0..=horizon)
        .map(|h| {
            let b = base_features.matrix(h);
            let extra = realizing_column(b, q.level(h))
                .unwrap_or_else(|| (0..b.nrows()).map(|_| rng.random::<f64>()).collect());
            DMatrix::from_fn(b.nrows(), dim, |r, c| {
                if c + 1 < dim {
                    b[(r, c)]
                } else {
                    extra[r]
                }
            })
        })
        .collect();
    Ok(Fixture {
        features: FeatureMap::new(shape, levels)?,
        mdp,
    })
}

/// Component of `q` orthogonal to the columns of `base`, rescaled to unit RMS.
/// Appending it to `base` spans the same space as appending `q` but keeps the
/// covariance well conditioned. `None` when `q` already lies in the span
/// (always the case for `Q_H = R_H`).
fn realizing_column(base: &DMatrix<f64>, q: &[f64]) -> Option<Vec<f64>> {
    let q = DVector::from_column_slice(q);
    let fit = base.clone().svd(true, true).solve(&q, 1e-12).ok()?;
    let resid = &q - base * fit;
    let rms = resid.norm() / (q.len() as f64).sqrt();
    if rms <= 1e-6 * (q.norm() / (q.len() as f64).sqrt()).max(1e-12) {
        return None;
    }
    Some(resid.iter().map(|v| v / rms).collect())
}
