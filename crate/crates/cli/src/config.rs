//! Experiment configuration: one JSON document, with a few keys that command
//! line flags may override.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use qmmr_core::features::FeatureMap;
use qmmr_core::fixtures::{generate_mdp_for, FixtureSpec};
use qmmr_core::mdp::{LayeredMdp, Policy, PolicySpec};
use qmmr_core::qmmr::{RoleOrder, StepSize};

use crate::error::{CliError, Result};

fn default_trials() -> usize {
    1
}

fn default_delta() -> f64 {
    0.1
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

fn default_budget_scale() -> f64 {
    1.5
}

fn default_iterations() -> usize {
    10_000
}

/// Where the MDP and features come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FixtureSource {
    /// A directory written by `qmmr generate`.
    Load {
        path: PathBuf,
    },
    Generate(FixtureSpec),
}

/// Discriminator class used by the minimax solver.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassKind {
    #[default]
    Linear,
    Tabular,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EstimatorSpec {
    QmmrLinear,
    QmmrTabular,
    QmmrMinimax {
        #[serde(default)]
        class: ClassKind,
        #[serde(default = "default_iterations")]
        iterations: usize,
        /// Fixed weight budget `C`; when absent each level uses
        /// `budget_scale` times the closed-form `||w_h||_[n]`.
        #[serde(default)]
        budget: Option<f64>,
        #[serde(default = "default_budget_scale")]
        budget_scale: f64,
        #[serde(default)]
        order: RoleOrder,
        #[serde(default)]
        step: StepSize,
    },
    FqeLinear,
    FqeTabular,
    Is,
}

impl EstimatorSpec {
    pub fn name(&self) -> &'static str {
        match self {
            EstimatorSpec::QmmrLinear => "qmmr_linear",
            EstimatorSpec::QmmrTabular => "qmmr_tabular",
            EstimatorSpec::QmmrMinimax { .. } => "qmmr_minimax",
            EstimatorSpec::FqeLinear => "fqe_linear",
            EstimatorSpec::FqeTabular => "fqe_tabular",
            EstimatorSpec::Is => "is",
        }
    }
}

/// Options of the `tracking` command.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrackingOptions {
    /// Replace the learned weights by the population weights on the sample
    /// (the tracking error is then identically zero).
    #[serde(default)]
    pub use_population_weights: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub fixture: FixtureSource,
    pub behavior: PolicySpec,
    pub target: PolicySpec,
    #[serde(default)]
    pub estimators: Vec<EstimatorSpec>,
    pub n_grid: Vec<usize>,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default = "default_delta")]
    pub delta: f64,
    /// Seed for the sampled datasets (the fixture has its own seed).
    #[serde(default)]
    pub seed: u64,
    /// Radius of the linear discriminator class; defaults to the smallest
    /// radius containing the least-squares fit of every `Q_h`.
    #[serde(default)]
    pub theta_bound: Option<f64>,
    #[serde(default)]
    pub tracking: TrackingOptions,
    #[serde(default = "default_out")]
    pub out: PathBuf,
}

/// Command line overrides.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub trials: Option<usize>,
    pub delta: Option<f64>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn apply(&mut self, overrides: &Overrides) {
        if let Some(seed) = overrides.seed {
            self.seed = seed;
        }
        if let Some(out) = &overrides.out {
            self.out = out.clone();
        }
        if let Some(trials) = overrides.trials {
            self.trials = trials;
        }
        if let Some(delta) = overrides.delta {
            self.delta = delta;
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(CliError::config("trials must be at least 1"));
        }
        if self.n_grid.is_empty() || self.n_grid[0] == 0 {
            return Err(CliError::config("n_grid must hold positive sample sizes"));
        }
        if self.n_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(CliError::config("n_grid must be strictly increasing"));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(CliError::config("delta must lie in (0, 1)"));
        }
        if let Some(t) = self.theta_bound {
            if !(t.is_finite() && t > 0.0) {
                return Err(CliError::config("theta_bound must be positive"));
            }
        }
        for est in &self.estimators {
            if let EstimatorSpec::QmmrMinimax {
                iterations,
                budget,
                budget_scale,
                ..
            } = est
            {
                if *iterations == 0 {
                    return Err(CliError::config("qmmr_minimax needs iterations >= 1"));
                }
                if budget.is_some_and(|b| !(b.is_finite() && b >= 0.0)) || !(*budget_scale > 0.0) {
                    return Err(CliError::config("qmmr_minimax budget must be nonnegative"));
                }
            }
        }
        Ok(())
    }
}

/// An MDP with its features and the two policies of an experiment.
#[derive(Debug, Clone)]
pub struct Problem {
    pub mdp: LayeredMdp,
    pub features: FeatureMap,
    pub behavior: Policy,
    pub target: Policy,
}

pub const MDP_FILE: &str = "mdp.json";
pub const FEATURES_FILE: &str = "features.json";
pub const BEHAVIOR_FILE: &str = "behavior_policy.json";
pub const TARGET_FILE: &str = "target_policy.json";

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

impl Problem {
    pub fn build(cfg: &ExperimentConfig) -> Result<Self> {
        match &cfg.fixture {
            FixtureSource::Generate(spec) => {
                let shape = spec.shape()?;
                let target = cfg.target.build(&shape)?;
                let behavior = cfg.behavior.build(&shape)?;
                let fixture = generate_mdp_for(spec, Some(&target), Some(&behavior))?;
                Ok(Problem {
                    mdp: fixture.mdp,
                    features: fixture.features,
                    behavior,
                    target,
                })
            }
            FixtureSource::Load { path } => {
                let mdp: LayeredMdp = read_json(&path.join(MDP_FILE))?;
                let features: FeatureMap = read_json(&path.join(FEATURES_FILE))?;
                features.validate(mdp.shape())?;
                // Policy files are optional; the config's policy specs fill the gaps.
                let load_policy = |file: &str, spec: &PolicySpec| -> Result<Policy> {
                    let p = path.join(file);
                    let policy = if p.exists() {
                        read_json(&p)?
                    } else {
                        spec.build(mdp.shape())?
                    };
                    policy.validate(mdp.shape())?;
                    Ok(policy)
                };
                let behavior = load_policy(BEHAVIOR_FILE, &cfg.behavior)?;
                let target = load_policy(TARGET_FILE, &cfg.target)?;
                Ok(Problem {
                    mdp,
                    features,
                    behavior,
                    target,
                })
            }
        }
    }
}
