//! Per-level importance-weight learning by moment matching, the reweighted
//! return estimate, and its data-dependent error bound.
//!
//! Level `h` weights are learned from `(s_h, a_h)` of every trajectory, the
//! previous level's weights and `phi(s_h, pi)`; rewards and next states never
//! enter the weight computation, so the bound's causality requirement holds by
//! construction.

mod solvers;

pub use solvers::{
    matching_loss, solve_level_linear, solve_level_minimax, solve_level_tabular, LevelSolution,
    LinearMoments, MinimaxConfig, RoleOrder, StepSize,
};

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dataset::TrajectoryDataset;
use crate::error::{QmmrError, Result};
use crate::features::{DiscriminatorClass, LevelDesign};
use crate::mdp::{MdpShape, Policy, QTable};

/// Learned weights `w_h^(i)` for `h = 0..=H`; `w_0` is identically one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightMatrix {
    levels: Vec<Vec<f64>>,
    losses: Vec<f64>,
}

impl WeightMatrix {
    /// `levels[0]` must be all ones; `losses[h]` is the matching loss of level `h`
    /// (`losses[0] = 0`).
    pub fn new(levels: Vec<Vec<f64>>, losses: Vec<f64>) -> Result<Self> {
        let n = levels.first().map_or(0, Vec::len);
        if n == 0 || levels.len() < 2 {
            return Err(QmmrError::validation(
                "weights need n > 0 and at least one level",
            ));
        }
        if levels.iter().any(|l| l.len() != n) {
            return Err(QmmrError::validation("every level must carry n weights"));
        }
        if levels[0].iter().any(|&w| w != 1.0) {
            return Err(QmmrError::validation("level-0 weights must be exactly one"));
        }
        if losses.len() != levels.len() || losses[0] != 0.0 {
            return Err(QmmrError::mismatch(
                "matching losses",
                levels.len(),
                losses.len(),
            ));
        }
        Ok(WeightMatrix { levels, losses })
    }

    /// Unit weights with zero reported loss.
    pub fn ones(horizon: usize, n: usize) -> Self {
        WeightMatrix {
            levels: vec![vec![1.0; n]; horizon + 1],
            losses: vec![0.0; horizon + 1],
        }
    }

    pub fn n(&self) -> usize {
        self.levels[0].len()
    }

    pub fn horizon(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn level(&self, h: usize) -> &[f64] {
        &self.levels[h]
    }

    pub fn loss(&self, h: usize) -> f64 {
        self.losses[h]
    }

    /// `||w_h||_[n] = sqrt((1/n) sum_i (w_h^(i))^2)`.
    pub fn second_moment(&self, h: usize) -> f64 {
        let w = &self.levels[h];
        (w.iter().map(|v| v * v).sum::<f64>() / w.len() as f64).sqrt()
    }

    pub fn second_moments(&self) -> Vec<f64> {
        (0..=self.horizon())
            .map(|h| self.second_moment(h))
            .collect()
    }

    /// One row per level: `level,w_1,...,w_n`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        write!(out, "level")?;
        for i in 0..self.n() {
            write!(out, ",w{i}")?;
        }
        writeln!(out)?;
        for (h, w) in self.levels.iter().enumerate() {
            write!(out, "{h}")?;
            for v in w {
                write!(out, ",{v}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

/// Per-level entries of an [`OpeEstimate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelReport {
    pub level: usize,
    pub loss: f64,
    pub second_moment: f64,
    pub eps_stat: f64,
    pub reward_contribution: f64,
}

/// Reweighted return estimate with its bound `sum_h L_h + sum_h eps_h`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpeEstimate {
    pub j_hat: f64,
    pub per_level: Vec<LevelReport>,
    pub loss_total: f64,
    pub eps_total: f64,
    pub bound: f64,
    pub delta: f64,
    pub v_max: f64,
}

/// `J_hat = sum_{h=1}^H (1/n) sum_i w_h^(i) r_h^(i)`.
pub fn estimate_return(ds: &TrajectoryDataset, weights: &WeightMatrix) -> f64 {
    (1..=ds.horizon())
        .map(|h| reward_contribution(ds, weights, h))
        .sum()
}

fn reward_contribution(ds: &TrajectoryDataset, weights: &WeightMatrix, h: usize) -> f64 {
    let total: f64 = weights
        .level(h)
        .iter()
        .zip(ds.rewards(h))
        .map(|(w, r)| w * r)
        .sum();
    total / ds.n() as f64
}

/// Statistical terms `eps_h = ||w_h||_[n] V_max sqrt(2 ln(2(H+1)/delta) / n)`
/// for `h = 0..=H`.
pub fn statistical_terms(
    second_moments: &[f64],
    v_max: f64,
    delta: f64,
    n: usize,
) -> Result<Vec<f64>> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(QmmrError::validation("delta must lie in (0, 1)"));
    }
    if n == 0 {
        return Err(QmmrError::validation("n must be positive"));
    }
    let levels = second_moments.len() as f64;
    let width = v_max * (2.0 * (2.0 * levels / delta).ln() / n as f64).sqrt();
    Ok(second_moments.iter().map(|m| m * width).collect())
}

/// Bound and per-level report for a weight matrix on its dataset.
pub fn error_bound(
    ds: &TrajectoryDataset,
    weights: &WeightMatrix,
    v_max: f64,
    delta: f64,
) -> Result<OpeEstimate> {
    if weights.n() != ds.n() || weights.horizon() != ds.horizon() {
        return Err(QmmrError::mismatch(
            "weight matrix size",
            ds.n(),
            weights.n(),
        ));
    }
    let moments = weights.second_moments();
    let eps = statistical_terms(&moments, v_max, delta, ds.n())?;
    let per_level: Vec<LevelReport> = (0..=ds.horizon())
        .map(|h| LevelReport {
            level: h,
            loss: weights.loss(h),
            second_moment: moments[h],
            eps_stat: eps[h],
            reward_contribution: if h == 0 {
                0.0
            } else {
                reward_contribution(ds, weights, h)
            },
        })
        .collect();
    let loss_total: f64 = per_level[1..].iter().map(|l| l.loss).sum();
    let eps_total: f64 = eps.iter().sum();
    Ok(OpeEstimate {
        j_hat: estimate_return(ds, weights),
        per_level,
        loss_total,
        eps_total,
        bound: loss_total + eps_total,
        delta,
        v_max,
    })
}

/// Level solver used by [`run_qmmr`].
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SolverConfig {
    /// Closed form for the class: pseudo-inverse regression for linear,
    /// cell-wise ratios for tabular.
    #[default]
    ClosedForm,
    Minimax(MinimaxConfig),
}

/// Weights, estimate and per-level solver output of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QmmrRun {
    pub weights: WeightMatrix,
    pub estimate: OpeEstimate,
    pub levels: Vec<LevelSolution>,
}

/// Learns weights level by level and evaluates the estimate and its bound.
pub fn run_qmmr(
    ds: &TrajectoryDataset,
    shape: &MdpShape,
    class: &DiscriminatorClass,
    pi: &Policy,
    solver: &SolverConfig,
    v_max: f64,
    delta: f64,
) -> Result<QmmrRun> {
    ds.validate(shape)?;
    pi.validate(shape)?;
    if let DiscriminatorClass::Linear(c) = class {
        c.features.validate(shape)?;
    }
    let horizon = shape.horizon();
    let mut levels_w = vec![vec![1.0; ds.n()]];
    let mut losses = vec![0.0];
    let mut solutions = Vec::with_capacity(horizon);
    for h in 1..=horizon {
        let design = LevelDesign::new(ds, shape, h);
        let w_prev = &levels_w[h - 1];
        let sol = match (solver, class) {
            (SolverConfig::ClosedForm, DiscriminatorClass::Linear(c)) => {
                solve_level_linear(&design, shape, &c.features, pi, w_prev, c.theta_bound)
            }
            (SolverConfig::ClosedForm, DiscriminatorClass::Tabular(c)) => {
                solve_level_tabular(&design, shape, pi, w_prev, c)
            }
            (SolverConfig::Minimax(cfg), _) => {
                solve_level_minimax(&design, shape, class, pi, w_prev, cfg)?
            }
        };
        levels_w.push(sol.weights.clone());
        losses.push(sol.loss);
        solutions.push(sol);
    }
    let weights = WeightMatrix::new(levels_w, losses)?;
    let estimate = error_bound(ds, &weights, v_max, delta)?;
    Ok(QmmrRun {
        weights,
        estimate,
        levels: solutions,
    })
}

/// `sum_{h=0}^H (1/n) sum_i (w_h Q_h^(i) - w_{h+1} Q_{h+1}^(i))` with
/// `w_{H+1} Q_{H+1} = 0`, where `Q_h^(i) = Q_h(s_h^(i), a_h^(i))`.
pub fn telescoping_sum(
    ds: &TrajectoryDataset,
    shape: &MdpShape,
    weights: &WeightMatrix,
    q: &QTable,
) -> f64 {
    let n = ds.n() as f64;
    let horizon = shape.horizon();
    let level_mass = |h: usize| -> f64 {
        if h > horizon {
            return 0.0;
        }
        let qh = q.level(h);
        ds.pairs(shape, h)
            .iter()
            .zip(weights.level(h))
            .map(|(&p, w)| w * qh[p])
            .sum::<f64>()
            / n
    };
    (0..=horizon)
        .map(|h| level_mass(h) - level_mass(h + 1))
        .sum()
}

/// Exact split of `J_hat - J` into per-level matching terms
/// `(1/n) sum_i [w_h Q_h(s_h, a_h) - w_{h-1} Q_h(s_h, pi)]` (h = 1..=H) and
/// per-level noise terms `(1/n) sum_i w_h [r_h + Q_{h+1}(s_{h+1}, pi) - Q_h(s_h, a_h)]`
/// (h = 0..=H).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorDecomposition {
    pub matching: Vec<f64>,
    pub noise: Vec<f64>,
}

impl ErrorDecomposition {
    pub fn total(&self) -> f64 {
        self.matching.iter().sum::<f64>() + self.noise.iter().sum::<f64>()
    }
}

pub fn error_decomposition(
    ds: &TrajectoryDataset,
    shape: &MdpShape,
    pi: &Policy,
    weights: &WeightMatrix,
    q: &QTable,
) -> ErrorDecomposition {
    let n = ds.n() as f64;
    let horizon = shape.horizon();
    let q_at =
        |h: usize| -> Vec<f64> { ds.pairs(shape, h).iter().map(|&p| q.level(h)[p]).collect() };
    let v_at = |h: usize| -> Vec<f64> {
        if h > horizon {
            return vec![0.0; ds.n()];
        }
        ds.states(h)
            .iter()
            .map(|&s| {
                let local = shape.local(h, s).expect("validated dataset");
                q.policy_value(shape, pi, h, local)
            })
            .collect()
    };
    let mean = |xs: Vec<f64>| xs.iter().sum::<f64>() / n;
    let matching = (1..=horizon)
        .map(|h| {
            let (qh, vh) = (q_at(h), v_at(h));
            let (w, w_prev) = (weights.level(h), weights.level(h - 1));
            mean(
                (0..ds.n())
                    .map(|i| w[i] * qh[i] - w_prev[i] * vh[i])
                    .collect(),
            )
        })
        .collect();
    let noise = (0..=horizon)
        .map(|h| {
            let (qh, v_next, r) = (q_at(h), v_at(h + 1), ds.rewards(h));
            let w = weights.level(h);
            mean(
                (0..ds.n())
                    .map(|i| w[i] * (r[i] + v_next[i] - qh[i]))
                    .collect(),
            )
        })
        .collect();
    ErrorDecomposition { matching, noise }
}

#[cfg(test)]
mod tests;
