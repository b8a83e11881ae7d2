//! Fitted-Q evaluation (linear and tabular) and per-decision importance sampling.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::dataset::{EmpiricalMdp, TrajectoryDataset};
use crate::error::{QmmrError, Result};
use crate::features::{gram_matrix, FeatureMap};
use crate::linalg::SymmetricSpectrum;
use crate::mdp::{MdpShape, Policy};

/// Per-level coefficients and the resulting return estimate. For tabular FQE
/// the coefficients are the value tables themselves (coefficients of the
/// one-hot features).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FqeSolution {
    pub j_hat: f64,
    /// `coefficients[h]` for `h = 0..=H`; empty at level 0 for linear FQE.
    pub coefficients: Vec<Vec<f64>>,
    /// Pairs without data, per level (tabular only; their value is set to 0).
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub unvisited: Vec<Vec<usize>>,
}

/// Backward least-squares regression `Sigma_h theta_h = (1/n) sum_i phi_i (r_h + phi(s_{h+1}, pi)^T theta_{h+1})`
/// with `theta_{H+1} = 0`, solved by pseudo-inverse.
pub fn fqe_linear(
    ds: &TrajectoryDataset,
    shape: &MdpShape,
    features: &FeatureMap,
    pi: &Policy,
) -> Result<FqeSolution> {
    ds.validate(shape)?;
    features.validate(shape)?;
    pi.validate(shape)?;
    let horizon = shape.horizon();
    let n = ds.n() as f64;
    let mut coefficients = vec![Vec::new(); horizon + 1];
    // Q_{h+1}(s_{h+1}^(i), pi) for each trajectory; zero past the horizon.
    let mut next_values = vec![0.0; ds.n()];
    for h in (1..=horizon).rev() {
        let x = features.design(h, &ds.pairs(shape, h));
        let targets = DVector::from_iterator(
            ds.n(),
            ds.rewards(h).iter().zip(&next_values).map(|(r, v)| r + v),
        );
        let rhs = x.tr_mul(&targets) / n;
        let theta = SymmetricSpectrum::new(&gram_matrix(&x)).pinv() * rhs;
        let pf = features.policy_features(shape, pi, h);
        let v_states = &pf * &theta;
        next_values = ds
            .states(h)
            .iter()
            .map(|&s| v_states[shape.local(h, s).unwrap()])
            .collect();
        coefficients[h] = theta.data.into();
    }
    let j_hat = next_values.iter().sum::<f64>() / n;
    Ok(FqeSolution {
        j_hat,
        coefficients,
        unvisited: Vec::new(),
    })
}

/// Bellman evaluation of `pi` in the count-based empirical MDP.
pub fn fqe_tabular(ds: &TrajectoryDataset, shape: &MdpShape, pi: &Policy) -> Result<FqeSolution> {
    let emp = EmpiricalMdp::build(ds, shape)?;
    let q = emp.exact_q(pi)?;
    Ok(FqeSolution {
        j_hat: q.levels[0][0],
        coefficients: q.levels,
        unvisited: (0..=shape.horizon()).map(|h| emp.unvisited(h)).collect(),
    })
}

/// Per-decision importance sampling:
/// `sum_h (1/n) sum_i rho_{0:h}^(i) r_h^(i)` with `rho_{0:h} = prod_{t <= h} pi(a_t|s_t) / pi_b(a_t|s_t)`.
pub fn importance_sampling(
    ds: &TrajectoryDataset,
    shape: &MdpShape,
    pi: &Policy,
    pi_b: &Policy,
) -> Result<f64> {
    ds.validate(shape)?;
    pi.validate(shape)?;
    pi_b.validate(shape)?;
    let mut rho = vec![1.0; ds.n()];
    let mut total = 0.0;
    for h in 0..=shape.horizon() {
        for (i, ((&s, &a), r)) in ds
            .states(h)
            .iter()
            .zip(ds.actions(h))
            .zip(ds.rewards(h))
            .enumerate()
        {
            let local = shape.local(h, s).expect("validated dataset");
            let b = pi_b.prob(h, local, a);
            if b <= 0.0 {
                return Err(QmmrError::validation(format!(
                    "trajectory {i}: behavior probability of logged action {a} at level {h} is zero"
                )));
            }
            rho[i] *= pi.prob(h, local, a) / b;
            total += rho[i] * r;
        }
    }
    Ok(total / ds.n() as f64)
}
