//! `qmmr evaluate`: every estimator over the `n` grid and trials, paired with
//! the exact return of the target policy.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use qmmr_core::mdp::{exact_return, sample_trajectories};
use qmmr_core::qmmr::LevelReport;
use qmmr_core::rng::derive_seed;

use crate::config::{ExperimentConfig, Problem};
use crate::error::Result;
use crate::estimators::{run_estimator, Context};
use crate::report::{fmt_opt, FixtureInfo};

/// One estimator on one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRow {
    pub estimator: String,
    pub n: usize,
    pub trial: usize,
    pub seed: u64,
    pub j_hat: f64,
    pub j_true: f64,
    pub error: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bound: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub covered: Option<bool>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub levels: Vec<LevelReport>,
}

/// Summary over the trials of one `(estimator, n)` cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub estimator: String,
    pub n: usize,
    pub trials: usize,
    pub mean_estimate: f64,
    pub bias: f64,
    pub rmse: f64,
    /// Fraction of trials with `|J_hat - J| <= bound`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coverage: Option<f64>,
    /// Median of `bound / |error|` over trials with nonzero error.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub median_bound_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub fixture: FixtureInfo,
    pub j_true: f64,
    pub delta: f64,
    pub theta_bound: f64,
    pub rows: Vec<EvaluationRow>,
    pub aggregates: Vec<Aggregate>,
}

/// Seed of the dataset for sample size `n` and trial `trial`.
pub fn dataset_seed(seed: u64, n: usize, trial: usize) -> u64 {
    derive_seed(seed, &[n as u64, trial as u64])
}

pub fn evaluate(cfg: &ExperimentConfig, problem: &Problem) -> Result<EvaluationReport> {
    let ctx = Context::new(problem, cfg.theta_bound, cfg.delta)?;
    let j_true = exact_return(&problem.mdp, &problem.target)?;
    let cells: Vec<(usize, usize)> = cfg
        .n_grid
        .iter()
        .flat_map(|&n| (0..cfg.trials).map(move |t| (n, t)))
        .collect();
    let per_cell: Vec<Vec<EvaluationRow>> = cells
        .par_iter()
        .map(|&(n, trial)| -> Result<Vec<EvaluationRow>> {
            let seed = dataset_seed(cfg.seed, n, trial);
            let ds = sample_trajectories(&problem.mdp, &problem.behavior, n, seed)?;
            cfg.estimators
                .iter()
                .map(|spec| {
                    let out = run_estimator(spec, problem, &ds, &ctx)?;
                    let error = out.j_hat - j_true;
                    Ok(EvaluationRow {
                        estimator: spec.name().to_string(),
                        n,
                        trial,
                        seed,
                        j_hat: out.j_hat,
                        j_true,
                        error,
                        bound: out.bound,
                        covered: out.bound.map(|b| error.abs() <= b),
                        levels: out.levels,
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let rows: Vec<EvaluationRow> = per_cell.into_iter().flatten().collect();
    let aggregates = aggregate(&rows);
    Ok(EvaluationReport {
        fixture: FixtureInfo::new(problem),
        j_true,
        delta: cfg.delta,
        theta_bound: ctx.theta_bound,
        rows,
        aggregates,
    })
}

fn median(mut xs: Vec<f64>) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    xs.sort_by(f64::total_cmp);
    let m = xs.len() / 2;
    Some(if xs.len() % 2 == 1 {
        xs[m]
    } else {
        0.5 * (xs[m - 1] + xs[m])
    })
}

/// Groups rows by `(estimator, n)` in first-appearance order.
pub fn aggregate(rows: &[EvaluationRow]) -> Vec<Aggregate> {
    let mut keys: Vec<(String, usize)> = Vec::new();
    for r in rows {
        let key = (r.estimator.clone(), r.n);
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    keys.into_iter()
        .map(|(estimator, n)| {
            let cell: Vec<&EvaluationRow> = rows
                .iter()
                .filter(|r| r.estimator == estimator && r.n == n)
                .collect();
            let k = cell.len() as f64;
            let mean_estimate = cell.iter().map(|r| r.j_hat).sum::<f64>() / k;
            let bias = cell.iter().map(|r| r.error).sum::<f64>() / k;
            let rmse = (cell.iter().map(|r| r.error * r.error).sum::<f64>() / k).sqrt();
            let covered: Vec<bool> = cell.iter().filter_map(|r| r.covered).collect();
            let coverage = (!covered.is_empty())
                .then(|| covered.iter().filter(|&&c| c).count() as f64 / covered.len() as f64);
            let ratios = cell
                .iter()
                .filter_map(|r| {
                    r.bound
                        .filter(|_| r.error != 0.0)
                        .map(|b| b / r.error.abs())
                })
                .collect();
            Aggregate {
                estimator,
                n,
                trials: cell.len(),
                mean_estimate,
                bias,
                rmse,
                coverage,
                median_bound_ratio: median(ratios),
            }
        })
        .collect()
}

/// Flat table, one line per estimator x n x trial, with per-level columns.
pub fn csv_table(report: &EvaluationReport) -> (Vec<String>, Vec<Vec<String>>) {
    let horizon = report.fixture.horizon;
    let mut header: Vec<String> = [
        "estimator",
        "n",
        "trial",
        "seed",
        "j_hat",
        "j_true",
        "error",
        "bound",
        "covered",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    for h in 0..=horizon {
        header.push(format!("loss_{h}"));
        header.push(format!("second_moment_{h}"));
        header.push(format!("eps_{h}"));
    }
    let rows = report
        .rows
        .iter()
        .map(|r| {
            let mut line = vec![
                r.estimator.clone(),
                r.n.to_string(),
                r.trial.to_string(),
                r.seed.to_string(),
                r.j_hat.to_string(),
                r.j_true.to_string(),
                r.error.to_string(),
                fmt_opt(r.bound),
                r.covered.map(|c| c.to_string()).unwrap_or_default(),
            ];
            for h in 0..=horizon {
                match r.levels.get(h) {
                    Some(l) => {
                        line.push(l.loss.to_string());
                        line.push(l.second_moment.to_string());
                        line.push(l.eps_stat.to_string());
                    }
                    None => line.extend(std::iter::repeat_n(String::new(), 3)),
                }
            }
            line
        })
        .collect();
    (header, rows)
}
