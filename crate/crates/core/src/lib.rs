//! Off-policy evaluation in layered finite-horizon MDPs by per-level
//! importance-weight matching (Q-MMR), with fitted-Q and importance-sampling
//! baselines and exact population diagnostics.

pub mod baselines;
pub mod dataset;
pub mod diagnostics;
pub mod error;
pub mod features;
pub mod fixtures;
pub mod linalg;
pub mod mdp;
pub mod qmmr;
pub mod rng;

pub use error::{QmmrError, Result};
