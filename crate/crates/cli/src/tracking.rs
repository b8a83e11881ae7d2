//! `qmmr tracking`: how fast the learned linear weights approach the
//! population weights as `n` grows, as a log-log slope.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use qmmr_core::diagnostics::{compute_feature_dynamics, tracking_error, PopulationWeights};
use qmmr_core::mdp::sample_trajectories;
use qmmr_core::qmmr::WeightMatrix;

use crate::config::{EstimatorSpec, ExperimentConfig, Problem};
use crate::error::{CliError, Result};
use crate::estimators::{run_estimator, Context};
use crate::evaluate::dataset_seed;
use crate::report::FixtureInfo;

/// Two-sided 95% normal quantile.
const Z95: f64 = 1.959_963_984_540_054;

/// Mean tracking errors below this are treated as exactly zero.
const ZERO_DELTA: f64 = 1e-13;

/// Least-squares slope with a delta-method confidence interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    /// `None` when some mean tracking error is zero (log undefined).
    pub slope: Option<f64>,
    pub std_error: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelTracking {
    pub level: usize,
    /// Mean of `Delta_h` over trials, one entry per grid point.
    pub mean_delta: Vec<f64>,
    /// Sample standard deviation of `Delta_h` over trials.
    pub sd_delta: Vec<f64>,
    pub fit: SlopeFit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackingReport {
    pub fixture: FixtureInfo,
    pub n_grid: Vec<usize>,
    pub trials: usize,
    pub weights: String,
    pub levels: Vec<LevelTracking>,
    /// Common slope across levels with per-level intercepts.
    pub pooled: SlopeFit,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

/// Per-trial `Delta_h`, `h = 1..=H`.
fn trial_deltas(
    cfg: &ExperimentConfig,
    problem: &Problem,
    ctx: &Context,
    wstar: &PopulationWeights,
    n: usize,
    trial: usize,
) -> Result<Vec<f64>> {
    let shape = problem.mdp.shape();
    let ds = sample_trajectories(
        &problem.mdp,
        &problem.behavior,
        n,
        dataset_seed(cfg.seed, n, trial),
    )?;
    let weights = if cfg.tracking.use_population_weights {
        let mut levels = vec![vec![1.0; n]];
        levels
            .extend((1..=shape.horizon()).map(|h| wstar.on_data(&ds, shape, &problem.features, h)));
        WeightMatrix::new(levels, vec![0.0; shape.horizon() + 1])?
    } else {
        run_estimator(&EstimatorSpec::QmmrLinear, problem, &ds, ctx)?
            .weights
            .expect("linear weights")
    };
    let deltas = tracking_error(&weights, wstar, &ds, shape, &problem.features)?;
    Ok(deltas[1..].to_vec())
}

/// Fits `y[g][n] = a_g + slope * x[n]` jointly over groups `g`, with
/// `var[g][n]` the variance of `y[g][n]`.
pub fn pooled_slope(x: &[f64], y: &[Vec<f64>], var: &[Vec<f64>]) -> SlopeFit {
    let x_bar = x.iter().sum::<f64>() / x.len() as f64;
    let sxx: f64 = x.iter().map(|v| (v - x_bar).powi(2)).sum::<f64>() * y.len() as f64;
    let mut slope = 0.0;
    let mut variance = 0.0;
    for (yg, vg) in y.iter().zip(var) {
        for ((xn, yn), vn) in x.iter().zip(yg).zip(vg) {
            let c = (xn - x_bar) / sxx;
            slope += c * yn;
            variance += c * c * vn;
        }
    }
    let se = variance.sqrt();
    SlopeFit {
        slope: Some(slope),
        std_error: Some(se),
        ci_low: Some(slope - Z95 * se),
        ci_high: Some(slope + Z95 * se),
    }
}

const UNDEFINED: SlopeFit = SlopeFit {
    slope: None,
    std_error: None,
    ci_low: None,
    ci_high: None,
};

pub fn tracking(cfg: &ExperimentConfig, problem: &Problem) -> Result<TrackingReport> {
    if cfg.n_grid.len() < 3 {
        return Err(CliError::config(
            "tracking needs at least 3 sample sizes in n_grid",
        ));
    }
    let ctx = Context::new(problem, cfg.theta_bound, cfg.delta)?;
    let horizon = problem.mdp.horizon();
    let wstar = compute_feature_dynamics(
        &problem.mdp,
        &problem.target,
        &problem.behavior,
        &problem.features,
    )?
    .population_weights();
    let cells: Vec<(usize, usize)> = cfg
        .n_grid
        .iter()
        .flat_map(|&n| (0..cfg.trials).map(move |t| (n, t)))
        .collect();
    let deltas: Vec<Vec<f64>> = cells
        .par_iter()
        .map(|&(n, t)| trial_deltas(cfg, problem, &ctx, &wstar, n, t))
        .collect::<Result<_>>()?;

    let trials = cfg.trials as f64;
    let x: Vec<f64> = cfg.n_grid.iter().map(|&n| (n as f64).ln()).collect();
    let mut levels = Vec::with_capacity(horizon);
    let mut ys = Vec::new();
    let mut vars = Vec::new();
    let mut all_positive = true;
    for h in 0..horizon {
        let mut mean_delta = Vec::new();
        let mut sd_delta = Vec::new();
        for (k, _) in cfg.n_grid.iter().enumerate() {
            let vals: Vec<f64> = deltas[k * cfg.trials..(k + 1) * cfg.trials]
                .iter()
                .map(|d| d[h])
                .collect();
            let mean = vals.iter().sum::<f64>() / trials;
            let sd = if cfg.trials > 1 {
                (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (trials - 1.0)).sqrt()
            } else {
                0.0
            };
            mean_delta.push(mean);
            sd_delta.push(sd);
        }
        let positive = mean_delta.iter().all(|&m| m > ZERO_DELTA);
        all_positive &= positive;
        let fit = if positive {
            let y: Vec<f64> = mean_delta.iter().map(|m| m.ln()).collect();
            // Var(log mean) ~ Var(Delta) / (trials * mean^2).
            let v: Vec<f64> = mean_delta
                .iter()
                .zip(&sd_delta)
                .map(|(m, s)| s * s / (trials * m * m))
                .collect();
            let fit = pooled_slope(&x, std::slice::from_ref(&y), std::slice::from_ref(&v));
            ys.push(y);
            vars.push(v);
            fit
        } else {
            UNDEFINED
        };
        levels.push(LevelTracking {
            level: h + 1,
            mean_delta,
            sd_delta,
            fit,
        });
    }
    let (pooled, note) = if all_positive {
        (pooled_slope(&x, &ys, &vars), None)
    } else {
        (
            UNDEFINED,
            Some("tracking error is identically zero at some level; slope undefined".to_string()),
        )
    };
    Ok(TrackingReport {
        fixture: FixtureInfo::new(problem),
        n_grid: cfg.n_grid.clone(),
        trials: cfg.trials,
        weights: if cfg.tracking.use_population_weights {
            "population"
        } else {
            "learned"
        }
        .to_string(),
        levels,
        pooled,
        note,
    })
}

pub fn csv_table(report: &TrackingReport) -> (Vec<String>, Vec<Vec<String>>) {
    let header = ["level", "n", "mean_delta", "sd_delta"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let rows = report
        .levels
        .iter()
        .flat_map(|l| {
            report.n_grid.iter().enumerate().map(move |(k, n)| {
                vec![
                    l.level.to_string(),
                    n.to_string(),
                    l.mean_delta[k].to_string(),
                    l.sd_delta[k].to_string(),
                ]
            })
        })
        .collect();
    (header, rows)
}
