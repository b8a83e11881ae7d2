//! Runs one configured estimator on one dataset.

use qmmr_core::baselines::{fqe_linear, fqe_tabular, importance_sampling};
use qmmr_core::dataset::TrajectoryDataset;
use qmmr_core::features::{DiscriminatorClass, LevelDesign, LinearClass, TabularClass};
use qmmr_core::linalg::pinv;
use qmmr_core::mdp::exact_q;
use qmmr_core::qmmr::{
    error_bound, run_qmmr, solve_level_linear, solve_level_minimax, solve_level_tabular,
    LevelReport, MinimaxConfig, SolverConfig, WeightMatrix,
};

use nalgebra::DVector;

use crate::config::{ClassKind, EstimatorSpec, Problem};
use crate::error::Result;

/// Fixed inputs shared by every estimator run of an experiment.
#[derive(Debug, Clone)]
pub struct Context {
    pub theta_bound: f64,
    pub v_max: f64,
    pub delta: f64,
}

impl Context {
    pub fn new(problem: &Problem, theta_bound: Option<f64>, delta: f64) -> Result<Self> {
        let theta_bound = match theta_bound {
            Some(t) => t,
            None => realizable_radius(problem)?,
        };
        Ok(Context {
            theta_bound,
            v_max: problem.mdp.v_max(),
            delta,
        })
    }

    pub fn linear_class(&self, problem: &Problem) -> Result<DiscriminatorClass> {
        Ok(DiscriminatorClass::Linear(LinearClass::new(
            problem.features.clone(),
            self.theta_bound,
        )?))
    }

    pub fn tabular_class(&self) -> Result<DiscriminatorClass> {
        Ok(DiscriminatorClass::Tabular(TabularClass::new(self.v_max)?))
    }
}

/// Largest `||theta_h||_2` over the least-squares fits (uniform over pairs) of
/// the exact `Q_h` of the target policy, floored at one.
pub fn realizable_radius(problem: &Problem) -> Result<f64> {
    let q = exact_q(&problem.mdp, &problem.target)?;
    let radius = (0..=problem.mdp.horizon())
        .map(|h| {
            let phi = problem.features.matrix(h);
            let y = DVector::from_column_slice(q.level(h));
            let theta = pinv(&phi.tr_mul(phi)) * phi.tr_mul(&y);
            theta.norm()
        })
        .fold(1.0, f64::max);
    Ok(radius)
}

/// Output of one estimator: the estimate plus, for the weight-based
/// estimators, the weights and the per-level bound ingredients.
#[derive(Debug, Clone)]
pub struct EstimatorOutput {
    pub j_hat: f64,
    pub bound: Option<f64>,
    pub levels: Vec<LevelReport>,
    pub weights: Option<WeightMatrix>,
}

impl EstimatorOutput {
    fn plain(j_hat: f64) -> Self {
        EstimatorOutput {
            j_hat,
            bound: None,
            levels: Vec::new(),
            weights: None,
        }
    }
}

pub fn run_estimator(
    spec: &EstimatorSpec,
    problem: &Problem,
    ds: &TrajectoryDataset,
    ctx: &Context,
) -> Result<EstimatorOutput> {
    let shape = problem.mdp.shape();
    let pi = &problem.target;
    let weighted = |class: &DiscriminatorClass| -> Result<EstimatorOutput> {
        let run = run_qmmr(
            ds,
            shape,
            class,
            pi,
            &SolverConfig::ClosedForm,
            ctx.v_max,
            ctx.delta,
        )?;
        Ok(EstimatorOutput {
            j_hat: run.estimate.j_hat,
            bound: Some(run.estimate.bound),
            levels: run.estimate.per_level,
            weights: Some(run.weights),
        })
    };
    match spec {
        EstimatorSpec::QmmrLinear => weighted(&ctx.linear_class(problem)?),
        EstimatorSpec::QmmrTabular => weighted(&ctx.tabular_class()?),
        EstimatorSpec::QmmrMinimax {
            class,
            iterations,
            budget,
            budget_scale,
            order,
            step,
        } => {
            let class = match class {
                ClassKind::Linear => ctx.linear_class(problem)?,
                ClassKind::Tabular => ctx.tabular_class()?,
            };
            let mut levels = vec![vec![1.0; ds.n()]];
            let mut losses = vec![0.0];
            for h in 1..=shape.horizon() {
                let design = LevelDesign::new(ds, shape, h);
                let w_prev = &levels[h - 1];
                let c = match budget {
                    Some(c) => *c,
                    None => {
                        let closed = match &class {
                            DiscriminatorClass::Linear(l) => solve_level_linear(
                                &design,
                                shape,
                                &l.features,
                                pi,
                                w_prev,
                                l.theta_bound,
                            ),
                            DiscriminatorClass::Tabular(t) => {
                                solve_level_tabular(&design, shape, pi, w_prev, t)
                            }
                        };
                        let sq: f64 = closed.weights.iter().map(|w| w * w).sum();
                        budget_scale * (sq / ds.n() as f64).sqrt()
                    }
                };
                let cfg = MinimaxConfig {
                    budget: c,
                    iterations: *iterations,
                    step: *step,
                    order: *order,
                };
                let sol = solve_level_minimax(&design, shape, &class, pi, w_prev, &cfg)?;
                losses.push(sol.loss);
                levels.push(sol.weights);
            }
            let weights = WeightMatrix::new(levels, losses)?;
            let estimate = error_bound(ds, &weights, ctx.v_max, ctx.delta)?;
            Ok(EstimatorOutput {
                j_hat: estimate.j_hat,
                bound: Some(estimate.bound),
                levels: estimate.per_level,
                weights: Some(weights),
            })
        }
        EstimatorSpec::FqeLinear => Ok(EstimatorOutput::plain(
            fqe_linear(ds, shape, &problem.features, pi)?.j_hat,
        )),
        EstimatorSpec::FqeTabular => Ok(EstimatorOutput::plain(fqe_tabular(ds, shape, pi)?.j_hat)),
        EstimatorSpec::Is => Ok(EstimatorOutput::plain(importance_sampling(
            ds,
            shape,
            pi,
            &problem.behavior,
        )?)),
    }
}
