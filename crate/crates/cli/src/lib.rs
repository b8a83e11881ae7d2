//! Config-driven experiment runner for moment-matched off-policy evaluation:
//! fixture generation, estimator sweeps with bound coverage, tracking-rate
//! studies, equivalence audits and population diagnostics.

pub mod audit;
pub mod config;
pub mod diagnose;
pub mod error;
pub mod estimators;
pub mod evaluate;
pub mod generate;
pub mod report;
pub mod tracking;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use error::{CliError, Result};

use config::{ExperimentConfig, Overrides, Problem};
use report::{write_csv, write_json};

#[derive(Debug, Parser)]
#[command(name = "qmmr", version, about = "Off-policy evaluation experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Write the fixture MDP, features and policies.
    Generate(CommonArgs),
    /// Run the estimators over the n grid and trials.
    Evaluate(CommonArgs),
    /// Fit the decay rate of the weight tracking error.
    Tracking(CommonArgs),
    /// Check estimator equivalences and weight identities.
    Audit(CommonArgs),
    /// Report population coverage and stability diagnostics.
    Diagnose(CommonArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Experiment configuration (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Dataset seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Independent datasets per sample size.
    #[arg(long)]
    pub trials: Option<usize>,
    /// Confidence parameter of the error bound.
    #[arg(long)]
    pub delta: Option<f64>,
}

impl CommonArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            out: self.out.clone(),
            trials: self.trials,
            delta: self.delta,
        }
    }
}

impl Command {
    pub fn args(&self) -> &CommonArgs {
        match self {
            Command::Generate(a)
            | Command::Evaluate(a)
            | Command::Tracking(a)
            | Command::Audit(a)
            | Command::Diagnose(a) => a,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Command::Generate(_) => "generate",
            Command::Evaluate(_) => "evaluate",
            Command::Tracking(_) => "tracking",
            Command::Audit(_) => "audit",
            Command::Diagnose(_) => "diagnose",
        }
    }
}

/// What a command wrote and whether an audit found failures.
#[derive(Debug, Clone, Default)]
pub struct Outcome {
    pub files: Vec<PathBuf>,
    pub audit_failed: bool,
}

/// Loads the config, applies flag overrides and runs the command.
pub fn run(command: &Command) -> Result<Outcome> {
    let args = command.args();
    let mut cfg = ExperimentConfig::load(&args.config)?;
    cfg.apply(&args.overrides());
    execute(command, &cfg)
}

/// Runs a command on an already loaded config.
pub fn execute(command: &Command, cfg: &ExperimentConfig) -> Result<Outcome> {
    cfg.validate()?;
    let problem = Problem::build(cfg)?;
    let out = &cfg.out;
    let mut outcome = Outcome::default();
    match command {
        Command::Generate(_) => {
            outcome.files = generate::generate(cfg, &problem)?;
        }
        Command::Evaluate(_) => {
            let report = evaluate::evaluate(cfg, &problem)?;
            let (header, rows) = evaluate::csv_table(&report);
            outcome
                .files
                .push(write_json(out, "evaluate.json", &report)?);
            outcome
                .files
                .push(write_csv(out, "evaluate.csv", &header, &rows)?);
        }
        Command::Tracking(_) => {
            let report = tracking::tracking(cfg, &problem)?;
            let (header, rows) = tracking::csv_table(&report);
            outcome
                .files
                .push(write_json(out, "tracking.json", &report)?);
            outcome
                .files
                .push(write_csv(out, "tracking.csv", &header, &rows)?);
        }
        Command::Audit(_) => {
            let report = audit::audit(cfg, &problem)?;
            outcome.audit_failed = !report.all_passed();
            outcome.files.push(write_json(out, "audit.json", &report)?);
        }
        Command::Diagnose(_) => {
            let report = diagnose::diagnose(cfg, &problem)?;
            outcome
                .files
                .push(write_json(out, "diagnose.json", &report)?);
        }
    }
    Ok(outcome)
}

/// Process exit code: 0 on success, 2 on invalid input, 3 when an audit
/// check fails, 1 otherwise.
pub fn exit_code(result: &Result<Outcome>) -> u8 {
    match result {
        Ok(outcome) if outcome.audit_failed => 3,
        Ok(_) => 0,
        Err(e) if e.is_validation() => 2,
        Err(_) => 1,
    }
}
