//! `qmmr generate`: writes the MDP, features and both policies as JSON.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use qmmr_core::diagnostics::completeness_residuals;

use crate::config::{
    ExperimentConfig, Problem, BEHAVIOR_FILE, FEATURES_FILE, MDP_FILE, TARGET_FILE,
};
use crate::error::Result;
use crate::report::{write_json, FixtureInfo};

/// Summary written next to the fixture files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureManifest {
    pub fixture: FixtureInfo,
    /// Largest relative residual of projecting `T^pi` of each feature back
    /// onto the features, per level, under the behavior occupancy.
    pub completeness_residuals: Vec<f64>,
    pub files: Vec<String>,
}

pub const MANIFEST_FILE: &str = "fixture.json";

pub fn generate(cfg: &ExperimentConfig, problem: &Problem) -> Result<Vec<PathBuf>> {
    let dir = &cfg.out;
    let files = vec![
        write_json(dir, MDP_FILE, &problem.mdp)?,
        write_json(dir, FEATURES_FILE, &problem.features)?,
        write_json(dir, BEHAVIOR_FILE, &problem.behavior)?,
        write_json(dir, TARGET_FILE, &problem.target)?,
    ];
    let manifest = FixtureManifest {
        fixture: FixtureInfo::new(problem),
        completeness_residuals: completeness_residuals(
            &problem.mdp,
            &problem.target,
            &problem.behavior,
            &problem.features,
        )?,
        files: [MDP_FILE, FEATURES_FILE, BEHAVIOR_FILE, TARGET_FILE]
            .iter()
            .map(|s| s.to_string())
            .collect(),
    };
    let mut written = files;
    written.push(write_json(dir, MANIFEST_FILE, &manifest)?);
    Ok(written)
}
