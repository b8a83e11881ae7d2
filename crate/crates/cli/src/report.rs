//! Report plumbing shared by the commands: fixture identity and file output.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::Problem;
use crate::error::{CliError, Result};

/// Content hashes identifying the inputs of a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureInfo {
    pub mdp_hash: String,
    pub behavior_hash: String,
    pub target_hash: String,
    pub horizon: usize,
    pub states: Vec<usize>,
    pub actions: usize,
    pub feature_dim: usize,
    pub v_max: f64,
}

impl FixtureInfo {
    pub fn new(problem: &Problem) -> Self {
        let shape = problem.mdp.shape();
        FixtureInfo {
            mdp_hash: problem.mdp.content_hash(),
            behavior_hash: problem.behavior.content_hash(),
            target_hash: problem.target.content_hash(),
            horizon: shape.horizon(),
            states: shape.states.clone(),
            actions: shape.actions,
            feature_dim: problem.features.dim(shape.horizon()),
            v_max: problem.mdp.v_max(),
        }
    }
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<PathBuf> {
    ensure_dir(dir)?;
    let path = dir.join(name);
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
    Ok(path)
}

pub fn write_csv(
    dir: &Path,
    name: &str,
    header: &[String],
    rows: &[Vec<String>],
) -> Result<PathBuf> {
    ensure_dir(dir)?;
    let path = dir.join(name);
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(row)?;
    }
    w.flush().map_err(|e| CliError::io(&path, e))?;
    Ok(path)
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}
