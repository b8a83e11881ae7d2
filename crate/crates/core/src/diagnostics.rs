//! Exact population quantities behind the weights: data covariances, the
//! feature dynamical system `psi_{h+1} = B_h psi_h`, population weights,
//! coverage norms, leverage, multi-step stability constants and completeness
//! residuals. All expectations are computed by enumeration over the data
//! occupancy `d^D = exact_occupancy(mdp, pi_b)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::TrajectoryDataset;
use crate::error::{QmmrError, Result};
use crate::features::FeatureMap;
use crate::linalg::SymmetricSpectrum;
use crate::mdp::{exact_occupancy, policy_transition, LayeredMdp, MdpShape, Occupancy, Policy};
use crate::qmmr::WeightMatrix;

/// Relative distance from the range of `Sigma_h` beyond which a feature
/// vector counts as uncovered.
const OUT_OF_RANGE_TOL: f64 = 1e-8;

/// Second moments and the induced linear dynamics of the features.
#[derive(Debug, Clone)]
pub struct FeatureDynamics {
    pub data_occupancy: Occupancy,
    pub target_occupancy: Occupancy,
    /// `Sigma_h = E_D[phi_h phi_h^T]`, `h = 0..=H`.
    pub sigma: Vec<DMatrix<f64>>,
    /// `Sigma^cr_h = E_D[phi_h(s, a) phi_{h+1}(s', pi)^T]`, `h = 0..H`.
    pub cross: Vec<DMatrix<f64>>,
    /// `B_h = (Sigma^cr_h)^T Sigma_h^+`, `h = 0..H`.
    pub backup: Vec<DMatrix<f64>>,
    /// `psi_0 = phi_0(s_0, a_0)`, `psi_1 = E_D[phi_1(s_1, pi)]`, `psi_{h+1} = B_h psi_h`.
    pub psi: Vec<DVector<f64>>,
    /// `E_{d_h^pi}[phi_h]`.
    pub target_mean: Vec<DVector<f64>>,
    /// Levels whose `Sigma_h` is rank deficient at the pseudo-inverse cutoff.
    pub singular: Vec<bool>,
    spectra: Vec<SymmetricSpectrum>,
}

fn weighted_gram(phi: &DMatrix<f64>, weights: &[f64]) -> DMatrix<f64> {
    let scaled = DMatrix::from_fn(phi.nrows(), phi.ncols(), |r, c| phi[(r, c)] * weights[r]);
    phi.tr_mul(&scaled)
}

fn weighted_mean(phi: &DMatrix<f64>, weights: &[f64]) -> DVector<f64> {
    phi.tr_mul(&DVector::from_column_slice(weights))
}

pub fn compute_feature_dynamics(
    mdp: &LayeredMdp,
    pi: &Policy,
    pi_b: &Policy,
    features: &FeatureMap,
) -> Result<FeatureDynamics> {
    let shape = mdp.shape();
    features.validate(shape)?;
    let data_occupancy = exact_occupancy(mdp, pi_b)?;
    let target_occupancy = exact_occupancy(mdp, pi)?;
    let horizon = shape.horizon();
    let sigma: Vec<DMatrix<f64>> = (0..=horizon)
        .map(|h| weighted_gram(features.matrix(h), data_occupancy.level(h)))
        .collect();
    let spectra: Vec<SymmetricSpectrum> = sigma.iter().map(SymmetricSpectrum::new).collect();
    let mut cross = Vec::with_capacity(horizon);
    let mut backup = Vec::with_capacity(horizon);
    for h in 0..horizon {
        let d = data_occupancy.level(h);
        let step = policy_transition(mdp, pi, h) * features.matrix(h + 1);
        let phi = features.matrix(h);
        let scaled = DMatrix::from_fn(phi.nrows(), phi.ncols(), |r, c| phi[(r, c)] * d[r]);
        let cr = scaled.tr_mul(&step);
        backup.push(cr.transpose() * spectra[h].pinv());
        cross.push(cr);
    }
    let mut psi = vec![features.phi(0, 0)];
    for h in 1..=horizon {
        if h == 1 {
            // s_1 ~ P(. | s_0, a_0) regardless of the logging policy.
            let state_dist = mdp.transition_row(0, 0);
            let pf = features.policy_features(shape, pi, 1);
            psi.push(pf.tr_mul(&DVector::from_column_slice(state_dist)));
        } else {
            let next = &backup[h - 1] * &psi[h - 1];
            psi.push(next);
        }
    }
    let target_mean = (0..=horizon)
        .map(|h| weighted_mean(features.matrix(h), target_occupancy.level(h)))
        .collect();
    let singular = spectra.iter().map(|s| !s.is_full_rank()).collect();
    Ok(FeatureDynamics {
        data_occupancy,
        target_occupancy,
        sigma,
        cross,
        backup,
        psi,
        target_mean,
        singular,
        spectra,
    })
}

impl FeatureDynamics {
    pub fn horizon(&self) -> usize {
        self.sigma.len() - 1
    }

    pub fn spectrum(&self, h: usize) -> &SymmetricSpectrum {
        &self.spectra[h]
    }

    /// Coefficients `alpha_h = Sigma_h^+ psi_h` of `w*_h(s, a) = phi(s, a)^T alpha_h`.
    pub fn population_weights(&self) -> PopulationWeights {
        PopulationWeights {
            alpha: self
                .psi
                .iter()
                .zip(&self.spectra)
                .map(|(psi, sp)| sp.pinv() * psi)
                .collect(),
        }
    }

    fn sigma_norm(&self, h: usize, v: &DVector<f64>) -> f64 {
        v.dot(&(self.spectra[h].pinv() * v)).max(0.0).sqrt()
    }

    /// `||psi_h||_{Sigma^-1}`, `||E_{d^pi}[phi]||_{Sigma^-1}` and the
    /// quadrature `||w*_h||_{2, d^D}`.
    pub fn coverage_norms(&self, features: &FeatureMap) -> Vec<CoverageNorms> {
        let weights = self.population_weights();
        (0..=self.horizon())
            .map(|h| {
                let values = weights.values(features, h);
                let d = self.data_occupancy.level(h);
                let wstar = values
                    .iter()
                    .zip(d)
                    .map(|(w, p)| p * w * w)
                    .sum::<f64>()
                    .sqrt();
                CoverageNorms {
                    psi: self.sigma_norm(h, &self.psi[h]),
                    target_mean: self.sigma_norm(h, &self.target_mean[h]),
                    population_weight: wstar,
                }
            })
            .collect()
    }

    /// `kappa_h = max_{(s, a)} phi^T Sigma_h^+ phi`; `None` when some feature
    /// vector leaves the range of `Sigma_h` (unbounded leverage).
    pub fn leverage(&self, features: &FeatureMap, h: usize) -> Option<f64> {
        let sp = &self.spectra[h];
        let pinv = sp.pinv();
        let mut kappa: f64 = 0.0;
        for pair in 0..features.matrix(h).nrows() {
            let phi = features.phi(h, pair);
            let scale = phi.norm().max(1.0);
            if sp.out_of_range_norm(&phi) > OUT_OF_RANGE_TOL * scale {
                return None;
            }
            kappa = kappa.max(phi.dot(&(&pinv * &phi)));
        }
        Some(kappa)
    }

    /// `B_{h-1} ... B_t`, the identity when `t == h`.
    pub fn backup_product(&self, t: usize, h: usize) -> DMatrix<f64> {
        assert!(t <= h, "backup product needs t <= h");
        let mut m = DMatrix::identity(self.sigma[t].nrows(), self.sigma[t].nrows());
        for k in t..h {
            m = &self.backup[k] * m;
        }
        m
    }

    /// `sup_{(s_t, a_t)} ||Sigma_h^{-1/2} B_{h-1} ... B_t phi(s_t, a_t)||_2`, and 1 for `t == h`.
    pub fn rho_upper_bound(&self, features: &FeatureMap, t: usize, h: usize) -> f64 {
        if t == h {
            return 1.0;
        }
        let op = self.spectra[h].inv_sqrt() * self.backup_product(t, h);
        (0..features.matrix(t).nrows())
            .map(|pair| (&op * features.phi(t, pair)).norm())
            .fold(0.0, f64::max)
    }
}

/// Three coverage norms of one level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverageNorms {
    pub psi: f64,
    pub target_mean: f64,
    pub population_weight: f64,
}

/// Population weights `w*_h(s, a) = phi(s, a)^T alpha_h`.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationWeights {
    pub alpha: Vec<DVector<f64>>,
}

impl PopulationWeights {
    /// `w*_h` at every pair of level `h`.
    pub fn values(&self, features: &FeatureMap, h: usize) -> Vec<f64> {
        (features.matrix(h) * &self.alpha[h]).data.into()
    }

    /// `w*_h(s_h^(i), a_h^(i))` for every trajectory.
    pub fn on_data(
        &self,
        ds: &TrajectoryDataset,
        shape: &MdpShape,
        features: &FeatureMap,
        h: usize,
    ) -> Vec<f64> {
        let values = self.values(features, h);
        ds.pairs(shape, h).iter().map(|&p| values[p]).collect()
    }
}

/// `Delta_h = ||w_h - w*_h|_n||_[n]` for `h = 0..=H`.
pub fn tracking_error(
    weights: &WeightMatrix,
    wstar: &PopulationWeights,
    ds: &TrajectoryDataset,
    shape: &MdpShape,
    features: &FeatureMap,
) -> Result<Vec<f64>> {
    if weights.n() != ds.n() {
        return Err(QmmrError::mismatch(
            "weights vs dataset",
            ds.n(),
            weights.n(),
        ));
    }
    Ok((0..=shape.horizon())
        .map(|h| {
            let target = wstar.on_data(ds, shape, features, h);
            let sq: f64 = weights
                .level(h)
                .iter()
                .zip(&target)
                .map(|(w, v)| (w - v).powi(2))
                .sum();
            (sq / ds.n() as f64).sqrt()
        })
        .collect())
}

/// Largest row l1 norm, the exact `sup_{||f||_inf <= 1} ||M f||_inf`.
pub fn rho_from_operator(m: &DMatrix<f64>) -> f64 {
    m.row_iter()
        .map(|row| row.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Exact multi-step stability constant for the tabular class: the matrix
/// mapping values on level-`h` pairs to `K_t ... K_{h-1} f` on level-`t`
/// pairs is `(B_{h-1} ... B_t)^T` under one-hot features.
pub fn rho_exact_tabular(
    mdp: &LayeredMdp,
    pi: &Policy,
    pi_b: &Policy,
    t: usize,
    h: usize,
) -> Result<f64> {
    if t > h || h > mdp.horizon() {
        return Err(QmmrError::validation("rho needs t <= h <= H"));
    }
    if t == h {
        return Ok(1.0);
    }
    let one_hot = FeatureMap::one_hot(mdp.shape());
    let dynamics = compute_feature_dynamics(mdp, pi, pi_b, &one_hot)?;
    if dynamics.singular[t..h].iter().any(|&s| s) {
        return Err(QmmrError::validation(
            "exact tabular rho needs full data support",
        ));
    }
    Ok(rho_from_operator(
        &dynamics.backup_product(t, h).transpose(),
    ))
}

/// Largest relative residual, in `L2(weights)`, of projecting
/// `T^pi f_j = R_h + P^pi phi_{h+1, j}` onto the span of `phi_h` over the
/// coordinate functions `f_j` of level `h + 1` (only `R_H` at the last level).
pub fn check_completeness(
    mdp: &LayeredMdp,
    pi: &Policy,
    features: &FeatureMap,
    h: usize,
    weights: &[f64],
) -> Result<f64> {
    let shape = mdp.shape();
    features.validate(shape)?;
    pi.validate(shape)?;
    if weights.len() != shape.num_pairs(h) {
        return Err(QmmrError::mismatch(
            "projection weights",
            shape.num_pairs(h),
            weights.len(),
        ));
    }
    let reward = DVector::from_column_slice(mdp.rewards(h));
    let targets: Vec<DVector<f64>> = if h < shape.horizon() {
        let step = policy_transition(mdp, pi, h) * features.matrix(h + 1);
        step.column_iter().map(|c| &reward + c).collect()
    } else {
        vec![reward]
    };
    let sqrt_w: Vec<f64> = weights.iter().map(|w| w.max(0.0).sqrt()).collect();
    let phi = features.matrix(h);
    let a = DMatrix::from_fn(phi.nrows(), phi.ncols(), |r, c| phi[(r, c)] * sqrt_w[r]);
    let sp = SymmetricSpectrum::new(&a.tr_mul(&a));
    let proj = &a * sp.pinv() * a.transpose();
    let mut worst: f64 = 0.0;
    for g in targets {
        let gw = DVector::from_iterator(g.len(), g.iter().zip(&sqrt_w).map(|(v, s)| v * s));
        let norm = gw.norm();
        if norm > 0.0 {
            worst = worst.max((&gw - &proj * &gw).norm() / norm);
        }
    }
    Ok(worst)
}

/// Completeness residuals for levels `0..=H`, projected under `d_h^D` of `pi_b`.
pub fn completeness_residuals(
    mdp: &LayeredMdp,
    pi: &Policy,
    pi_b: &Policy,
    features: &FeatureMap,
) -> Result<Vec<f64>> {
    let occ = exact_occupancy(mdp, pi_b)?;
    (0..=mdp.horizon())
        .map(|h| check_completeness(mdp, pi, features, h, occ.level(h)))
        .collect()
}

/// Exact occupancy ratio `d_h^pi / d_h^D` on the support of `d_h^D`.
#[derive(Debug, Clone, PartialEq)]
pub struct MisRatio {
    ratios: Vec<Option<f64>>,
}

impl MisRatio {
    pub fn get(&self, pair: usize) -> Result<f64> {
        self.ratios
            .get(pair)
            .copied()
            .flatten()
            .ok_or_else(|| QmmrError::validation(format!("pair {pair} has no data support")))
    }

    pub fn supported(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.ratios
            .iter()
            .enumerate()
            .filter_map(|(p, r)| r.map(|v| (p, v)))
    }
}

pub fn mis_ratio_exact(mdp: &LayeredMdp, pi: &Policy, pi_b: &Policy, h: usize) -> Result<MisRatio> {
    let dpi = exact_occupancy(mdp, pi)?;
    let dd = exact_occupancy(mdp, pi_b)?;
    Ok(MisRatio {
        ratios: dpi
            .level(h)
            .iter()
            .zip(dd.level(h))
            .map(|(&p, &d)| (d > 0.0).then(|| p / d))
            .collect(),
    })
}

/// Per-level entries of the diagnostics report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelDiagnostics {
    pub level: usize,
    /// `None` when leverage is unbounded.
    pub kappa: Option<f64>,
    pub coverage_psi: f64,
    pub coverage_dpi: f64,
    pub coverage_wstar: f64,
    pub psi_gap: f64,
    /// `rho_{1:h}` upper bound.
    pub rho_upper: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rho_exact: Option<f64>,
    pub completeness_residual: f64,
    pub singular: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tracking_delta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub levels: Vec<LevelDiagnostics>,
}

/// Assembles the per-level report for levels `1..=H`. `rho_exact` is filled
/// when the features are one-hot and the data has full support.
pub fn diagnostics_report(
    mdp: &LayeredMdp,
    pi: &Policy,
    pi_b: &Policy,
    features: &FeatureMap,
    tracking: Option<&[f64]>,
) -> Result<DiagnosticsReport> {
    let dynamics = compute_feature_dynamics(mdp, pi, pi_b, features)?;
    let norms = dynamics.coverage_norms(features);
    let completeness = completeness_residuals(mdp, pi, pi_b, features)?;
    let one_hot = *features == FeatureMap::one_hot(mdp.shape());
    let levels = (1..=mdp.horizon())
        .map(|h| {
            let rho_exact = if one_hot && !dynamics.singular[1..h].iter().any(|&s| s) {
                rho_exact_tabular(mdp, pi, pi_b, 1, h).ok()
            } else {
                None
            };
            Ok(LevelDiagnostics {
                level: h,
                kappa: dynamics.leverage(features, h),
                coverage_psi: norms[h].psi,
                coverage_dpi: norms[h].target_mean,
                coverage_wstar: norms[h].population_weight,
                psi_gap: (&dynamics.psi[h] - &dynamics.target_mean[h]).norm(),
                rho_upper: dynamics.rho_upper_bound(features, 1, h),
                rho_exact,
                completeness_residual: completeness[h],
                singular: dynamics.singular[h],
                tracking_delta: tracking.map(|t| t[h]),
            })
        })
        .collect::<Result<_>>()?;
    Ok(DiagnosticsReport { levels })
}
