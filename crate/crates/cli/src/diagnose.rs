//! `qmmr diagnose`: per-level coverage, leverage, stability and completeness
//! diagnostics of the fixture, with the tracking error of one learned run.

use serde::{Deserialize, Serialize};

use qmmr_core::diagnostics::{
    compute_feature_dynamics, diagnostics_report, tracking_error, LevelDiagnostics,
};
use qmmr_core::mdp::sample_trajectories;

use crate::config::{EstimatorSpec, ExperimentConfig, Problem};
use crate::error::Result;
use crate::estimators::{run_estimator, Context};
use crate::evaluate::dataset_seed;
use crate::report::FixtureInfo;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnoseReport {
    pub fixture: FixtureInfo,
    /// Sample size of the run behind `tracking_delta`.
    pub tracking_n: usize,
    pub levels: Vec<LevelDiagnostics>,
}

pub fn diagnose(cfg: &ExperimentConfig, problem: &Problem) -> Result<DiagnoseReport> {
    let ctx = Context::new(problem, cfg.theta_bound, cfg.delta)?;
    let shape = problem.mdp.shape();
    let n = *cfg.n_grid.last().expect("validated grid");
    let ds = sample_trajectories(
        &problem.mdp,
        &problem.behavior,
        n,
        dataset_seed(cfg.seed, n, 0),
    )?;
    let weights = run_estimator(&EstimatorSpec::QmmrLinear, problem, &ds, &ctx)?
        .weights
        .expect("linear weights");
    let wstar = compute_feature_dynamics(
        &problem.mdp,
        &problem.target,
        &problem.behavior,
        &problem.features,
    )?
    .population_weights();
    let deltas = tracking_error(&weights, &wstar, &ds, shape, &problem.features)?;
    let report = diagnostics_report(
        &problem.mdp,
        &problem.target,
        &problem.behavior,
        &problem.features,
        Some(&deltas),
    )?;
    Ok(DiagnoseReport {
        fixture: FixtureInfo::new(problem),
        tracking_n: n,
        levels: report.levels,
    })
}
