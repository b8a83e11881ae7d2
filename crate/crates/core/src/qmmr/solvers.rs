use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{QmmrError, Result};
use crate::features::{
    data_measure, gram_matrix, policy_measure, BestResponseOracle, FeatureMap, LevelDesign,
    TabularClass,
};
use crate::linalg::SymmetricSpectrum;
use crate::mdp::{MdpShape, Policy};

/// Output of one level of weight learning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelSolution {
    pub weights: Vec<f64>,
    /// `sup_f |<f, mu(w) - target>|` over the class used by the solver.
    pub loss: f64,
    /// Target policy mass that could not be placed on data (tabular solver only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub unmatched_mass: Option<f64>,
    /// Largest single-cell discrepancy times `v_max` (tabular solver only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_cell_loss: Option<f64>,
    /// Loss of each minimax iterate `w_t`.
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub trace: Vec<f64>,
    /// Minimax only: `sup_f l(w_bar, f) - inf_{w in W_C} l(w, f_bar)` for the
    /// averaged iterates of both players.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub duality_gap: Option<f64>,
}

impl LevelSolution {
    fn plain(weights: Vec<f64>, loss: f64) -> Self {
        LevelSolution {
            weights,
            loss,
            unmatched_mass: None,
            max_cell_loss: None,
            trace: Vec::new(),
            duality_gap: None,
        }
    }
}

/// Sample moments of one level for the linear class.
#[derive(Debug, Clone)]
pub struct LinearMoments {
    /// Rows `phi(s_h^(i), a_h^(i))`.
    pub design: DMatrix<f64>,
    /// `Sigma_hat = (1/n) sum_i phi_i phi_i^T`.
    pub sigma: DMatrix<f64>,
    /// `psi_hat = (1/n) sum_i w_prev_i phi(s_h^(i), pi)`.
    pub psi: DVector<f64>,
}

impl LinearMoments {
    pub fn new(
        design: &LevelDesign,
        shape: &MdpShape,
        features: &FeatureMap,
        pi: &Policy,
        w_prev: &[f64],
    ) -> Self {
        let h = design.h;
        let x = features.design(h, &design.pairs);
        let sigma = gram_matrix(&x);
        let target = policy_measure(shape, pi, h, &design.local_states, w_prev);
        let psi = features.moment(h, &target);
        LinearMoments {
            design: x,
            sigma,
            psi,
        }
    }
}

/// Minimum-norm moment matching for linear discriminators:
/// `w_i = psi_hat^T Sigma_hat^+ phi_i`. The loss is reported for
/// `||theta||_2 <= theta_bound`.
pub fn solve_level_linear(
    design: &LevelDesign,
    shape: &MdpShape,
    features: &FeatureMap,
    pi: &Policy,
    w_prev: &[f64],
    theta_bound: f64,
) -> LevelSolution {
    let moments = LinearMoments::new(design, shape, features, pi, w_prev);
    let spectrum = SymmetricSpectrum::new(&moments.sigma);
    let alpha = spectrum.pinv() * &moments.psi;
    let weights: Vec<f64> = (&moments.design * alpha).data.into();
    let n = design.n() as f64;
    let mu = moments.design.tr_mul(&DVector::from_column_slice(&weights)) / n;
    let loss = theta_bound * (mu - &moments.psi).norm();
    LevelSolution::plain(weights, loss)
}

/// Cell-wise ratio weights: each visited cell receives exactly the target
/// mass `(1/n) sum_i w_prev_i 1{s_i = s} pi(a|s)`, split evenly over its samples.
pub fn solve_level_tabular(
    design: &LevelDesign,
    shape: &MdpShape,
    pi: &Policy,
    w_prev: &[f64],
    class: &TabularClass,
) -> LevelSolution {
    let h = design.h;
    let n = design.n();
    let target = policy_measure(shape, pi, h, &design.local_states, w_prev);
    let mut counts = vec![0usize; shape.num_pairs(h)];
    for &p in &design.pairs {
        counts[p] += 1;
    }
    let weights = design
        .pairs
        .iter()
        .map(|&p| n as f64 * target[p] / counts[p] as f64)
        .collect();
    let unmatched: Vec<f64> = target
        .iter()
        .zip(&counts)
        .map(|(t, &c)| if c == 0 { t.abs() } else { 0.0 })
        .collect();
    let mass: f64 = unmatched.iter().sum();
    LevelSolution {
        weights,
        loss: class.v_max * mass,
        unmatched_mass: Some(mass),
        max_cell_loss: Some(class.v_max * unmatched.iter().cloned().fold(0.0, f64::max)),
        trace: Vec::new(),
        duality_gap: None,
    }
}

/// `L_h(w; w_prev) = sup_f |(1/n) sum w_i f(s_i, a_i) - (1/n) sum w_prev_i f(s_i, pi)|`.
pub fn matching_loss(
    design: &LevelDesign,
    shape: &MdpShape,
    class: &impl BestResponseOracle,
    pi: &Policy,
    w: &[f64],
    w_prev: &[f64],
) -> f64 {
    class.sup(design.h, &design.discrepancy(shape, pi, w, w_prev))
}

/// Which player runs online gradient descent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoleOrder {
    /// Projected OGD on `w` against best-response discriminators.
    #[default]
    NoRegretOnW,
    /// Projected OGD ascent on the discriminator against best-response weights.
    NoRegretOnF,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepSize {
    /// Diameter over (gradient bound times sqrt(T)).
    #[default]
    Auto,
    Fixed(f64),
}

/// Settings for the no-regret / best-response solver over
/// `W_C = {w : ||w||_[n] <= C}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MinimaxConfig {
    pub budget: f64,
    pub iterations: usize,
    #[serde(default)]
    pub step: StepSize,
    #[serde(default)]
    pub order: RoleOrder,
}

impl MinimaxConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.budget.is_finite() && self.budget >= 0.0) {
            return Err(QmmrError::validation(
                "minimax budget must be finite and nonnegative",
            ));
        }
        if self.iterations == 0 {
            return Err(QmmrError::validation(
                "minimax needs at least one iteration",
            ));
        }
        if let StepSize::Fixed(eta) = self.step {
            if !(eta.is_finite() && eta > 0.0) {
                return Err(QmmrError::validation("step size must be positive"));
            }
        }
        Ok(())
    }
}

/// Averaged-iterate solution of `min_{w in W_C} sup_f l(w, f)`.
pub fn solve_level_minimax(
    design: &LevelDesign,
    shape: &MdpShape,
    class: &impl BestResponseOracle,
    pi: &Policy,
    w_prev: &[f64],
    cfg: &MinimaxConfig,
) -> Result<LevelSolution> {
    cfg.validate()?;
    let h = design.h;
    let n = design.n();
    let nf = n as f64;
    let num_pairs = shape.num_pairs(h);
    let target = policy_measure(shape, pi, h, &design.local_states, w_prev);
    let freq = data_measure(num_pairs, &design.pairs, &vec![1.0; n]);
    let g = class.data_scale(h, &freq);
    let discrepancy = |w: &[f64]| -> Vec<f64> {
        let mut m = data_measure(num_pairs, &design.pairs, w);
        m.iter_mut().zip(&target).for_each(|(x, t)| *x -= t);
        m
    };
    if cfg.budget == 0.0 || g == 0.0 {
        let zeros = vec![0.0; n];
        let loss = class.sup(h, &discrepancy(&zeros));
        return Ok(LevelSolution::plain(zeros, loss));
    }
    let t_total = cfg.iterations;
    let radius = cfg.budget * nf.sqrt();
    let mut avg = vec![0.0; n];
    let mut theta_avg = vec![0.0; class.num_params(shape, h)];
    let mut trace = Vec::with_capacity(t_total);

    match cfg.order {
        RoleOrder::NoRegretOnW => {
            // Gradients f|_n / n have Euclidean norm at most G / sqrt(n), and W_C
            // has Euclidean diameter 2 C sqrt(n).
            let eta = match cfg.step {
                StepSize::Auto => 2.0 * radius * nf.sqrt() / (g * (t_total as f64).sqrt()),
                StepSize::Fixed(eta) => eta,
            };
            let mut w = vec![0.0; n];
            for _ in 0..t_total {
                let m = discrepancy(&w);
                trace.push(class.sup(h, &m));
                avg.iter_mut().zip(&w).for_each(|(a, x)| *a += x);
                let theta = class.best_response(h, &m);
                theta_avg.iter_mut().zip(&theta).for_each(|(a, x)| *a += x);
                let f = class.values(h, &theta);
                for (wi, &p) in w.iter_mut().zip(&design.pairs) {
                    *wi -= eta * f[p] / nf;
                }
                project_ball(&mut w, radius);
            }
        }
        RoleOrder::NoRegretOnF => {
            let target_grad = class.gradient(h, &target);
            let target_norm = target_grad.iter().map(|v| v * v).sum::<f64>().sqrt();
            let grad_bound = cfg.budget * class.gradient_scale(h, &freq) + target_norm;
            let eta = match cfg.step {
                StepSize::Auto if grad_bound > 0.0 => {
                    2.0 * class.param_radius(shape, h) / (grad_bound * (t_total as f64).sqrt())
                }
                StepSize::Auto => 0.0,
                StepSize::Fixed(eta) => eta,
            };
            let mut theta = vec![0.0; class.num_params(shape, h)];
            for _ in 0..t_total {
                theta_avg.iter_mut().zip(&theta).for_each(|(a, x)| *a += x);
                let f = class.values(h, &theta);
                let fn_norm = (design.pairs.iter().map(|&p| f[p] * f[p]).sum::<f64>() / nf).sqrt();
                let w: Vec<f64> = if fn_norm > 0.0 {
                    design
                        .pairs
                        .iter()
                        .map(|&p| -cfg.budget * f[p] / fn_norm)
                        .collect()
                } else {
                    vec![0.0; n]
                };
                let m = discrepancy(&w);
                trace.push(class.sup(h, &m));
                avg.iter_mut().zip(&w).for_each(|(a, x)| *a += x);
                let grad = class.gradient(h, &m);
                theta.iter_mut().zip(&grad).for_each(|(t, g)| *t += eta * g);
                class.project(&mut theta);
            }
        }
    }
    let weights: Vec<f64> = avg.iter().map(|a| a / t_total as f64).collect();
    let loss = class.sup(h, &discrepancy(&weights));
    theta_avg.iter_mut().for_each(|a| *a /= t_total as f64);
    let f_bar = class.values(h, &theta_avg);
    let f_bar_norm = (design
        .pairs
        .iter()
        .map(|&p| f_bar[p] * f_bar[p])
        .sum::<f64>()
        / nf)
        .sqrt();
    let f_bar_target: f64 = f_bar.iter().zip(&target).map(|(f, t)| f * t).sum();
    Ok(LevelSolution {
        weights,
        loss,
        unmatched_mass: None,
        max_cell_loss: None,
        trace,
        duality_gap: Some(loss + cfg.budget * f_bar_norm + f_bar_target),
    })
}

fn project_ball(w: &mut [f64], radius: f64) {
    let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > radius {
        let scale = radius / norm;
        w.iter_mut().for_each(|v| *v *= scale);
    }
}
