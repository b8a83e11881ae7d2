//! Feature maps and discriminator classes.
//!
//! A discriminator class at level `h` is parameterized linearly,
//! `f = M_h theta`, where `M_h` is a per-pair feature matrix and `theta`
//! ranges over a symmetric convex set: a Euclidean ball of radius `Theta`
//! for the linear class, or the box `[-V_max, V_max]^{pairs}` over one-hot
//! features for the tabular class. Every operation the estimators need is
//! expressed through a signed measure `m` over the pairs of one level, whose
//! pairing with `f` is `<f, m> = theta^T M_h^T m`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{QmmrError, Result};
use crate::linalg::SymmetricSpectrum;
use crate::mdp::{MdpShape, Policy};

/// Per-level feature matrices; row `pair` of level `h` is `phi_h(s, a)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "FeatureDocument", into = "FeatureDocument")]
pub struct FeatureMap {
    levels: Vec<DMatrix<f64>>,
}

#[derive(Serialize, Deserialize)]
struct FeatureDocument {
    /// `levels[h][pair]` is the feature row.
    levels: Vec<Vec<Vec<f64>>>,
}

impl From<FeatureMap> for FeatureDocument {
    fn from(map: FeatureMap) -> Self {
        FeatureDocument {
            levels: map
                .levels
                .iter()
                .map(|m| m.row_iter().map(|r| r.iter().copied().collect()).collect())
                .collect(),
        }
    }
}

impl TryFrom<FeatureDocument> for FeatureMap {
    type Error = QmmrError;

    fn try_from(doc: FeatureDocument) -> Result<Self> {
        let levels = doc
            .levels
            .into_iter()
            .enumerate()
            .map(|(h, rows)| {
                let d = rows.first().map_or(0, Vec::len);
                if d == 0 || rows.iter().any(|r| r.len() != d) {
                    return Err(QmmrError::validation(format!(
                        "feature rows at level {h} must be nonempty and of equal length"
                    )));
                }
                Ok(DMatrix::from_row_iterator(
                    rows.len(),
                    d,
                    rows.into_iter().flatten(),
                ))
            })
            .collect::<Result<_>>()?;
        Ok(FeatureMap { levels })
    }
}

impl FeatureMap {
    /// Wraps per-level matrices after checking them against `shape`.
    pub fn new(shape: &MdpShape, levels: Vec<DMatrix<f64>>) -> Result<Self> {
        let map = FeatureMap { levels };
        map.validate(shape)?;
        Ok(map)
    }

    /// Indicator features: `phi_h(s, a) = e_{(s, a)}`.
    pub fn one_hot(shape: &MdpShape) -> Self {
        FeatureMap {
            levels: (0..=shape.horizon())
                .map(|h| DMatrix::identity(shape.num_pairs(h), shape.num_pairs(h)))
                .collect(),
        }
    }

    pub fn validate(&self, shape: &MdpShape) -> Result<()> {
        if self.levels.len() != shape.horizon() + 1 {
            return Err(QmmrError::mismatch(
                "feature levels",
                shape.horizon() + 1,
                self.levels.len(),
            ));
        }
        for (h, m) in self.levels.iter().enumerate() {
            if m.nrows() != shape.num_pairs(h) {
                return Err(QmmrError::mismatch(
                    format!("feature rows at level {h}"),
                    shape.num_pairs(h),
                    m.nrows(),
                ));
            }
            if m.ncols() == 0 || m.iter().any(|v| !v.is_finite()) {
                return Err(QmmrError::validation(format!(
                    "features at level {h} must be finite with positive dimension"
                )));
            }
        }
        Ok(())
    }

    pub fn horizon(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn dim(&self, h: usize) -> usize {
        self.levels[h].ncols()
    }

    pub fn matrix(&self, h: usize) -> &DMatrix<f64> {
        &self.levels[h]
    }

    pub fn phi(&self, h: usize, pair: usize) -> DVector<f64> {
        self.levels[h].row(pair).transpose()
    }

    /// Rows `phi_h(s_i, a_i)` for a list of pair indices.
    pub fn design(&self, h: usize, pairs: &[usize]) -> DMatrix<f64> {
        self.levels[h].select_rows(pairs)
    }

    /// `phi_h(s, pi) = sum_a pi(a|s) phi_h(s, a)` for every local state of level `h`.
    pub fn policy_features(&self, shape: &MdpShape, pi: &Policy, h: usize) -> DMatrix<f64> {
        let m = &self.levels[h];
        let na = shape.num_actions(h);
        DMatrix::from_fn(shape.num_states(h), m.ncols(), |s, j| {
            pi.dist(h, s)
                .iter()
                .enumerate()
                .map(|(a, p)| p * m[(s * na + a, j)])
                .sum()
        })
    }

    /// Pulls a signed pair measure back to feature space: `M_h^T m`.
    pub fn moment(&self, h: usize, measure: &[f64]) -> DVector<f64> {
        self.levels[h].tr_mul(&DVector::from_column_slice(measure))
    }
}

/// Empirical second-moment matrix `(1/n) sum_i phi_i phi_i^T` of a design.
pub fn gram_matrix(design: &DMatrix<f64>) -> DMatrix<f64> {
    design.tr_mul(design) / design.nrows() as f64
}

/// `(1/n) sum_i w_i e_{pair_i}`.
pub fn data_measure(num_pairs: usize, pairs: &[usize], weights: &[f64]) -> Vec<f64> {
    let n = pairs.len() as f64;
    let mut m = vec![0.0; num_pairs];
    for (&p, &w) in pairs.iter().zip(weights) {
        m[p] += w / n;
    }
    m
}

/// `(1/n) sum_i w_i pi(a | s_i) e_{(s_i, a)}`: the measure whose pairing with
/// `f` is `(1/n) sum_i w_i f(s_i, pi)`.
pub fn policy_measure(
    shape: &MdpShape,
    pi: &Policy,
    h: usize,
    local_states: &[usize],
    weights: &[f64],
) -> Vec<f64> {
    let n = local_states.len() as f64;
    let na = shape.num_actions(h);
    let mut m = vec![0.0; shape.num_pairs(h)];
    for (&s, &w) in local_states.iter().zip(weights) {
        for (a, p) in pi.dist(h, s).iter().enumerate() {
            m[s * na + a] += w * p / n;
        }
    }
    m
}

/// Samples of one level as seen by the weight learner: the pair of each
/// trajectory and the local state it occupies. Rewards and next states are
/// deliberately absent.
#[derive(Debug, Clone)]
pub struct LevelDesign {
    pub h: usize,
    pub pairs: Vec<usize>,
    pub local_states: Vec<usize>,
}

impl LevelDesign {
    pub fn new(ds: &crate::dataset::TrajectoryDataset, shape: &MdpShape, h: usize) -> Self {
        let pairs = ds.pairs(shape, h);
        let local_states = pairs.iter().map(|&p| shape.unpair(h, p).0).collect();
        LevelDesign {
            h,
            pairs,
            local_states,
        }
    }

    pub fn n(&self) -> usize {
        self.pairs.len()
    }

    /// Signed measure `mu(w) - target(w_prev)` over the pairs of this level.
    pub fn discrepancy(
        &self,
        shape: &MdpShape,
        pi: &Policy,
        w: &[f64],
        w_prev: &[f64],
    ) -> Vec<f64> {
        let mut m = data_measure(shape.num_pairs(self.h), &self.pairs, w);
        let target = policy_measure(shape, pi, self.h, &self.local_states, w_prev);
        for (x, t) in m.iter_mut().zip(target) {
            *x -= t;
        }
        m
    }
}

/// Linear discriminators `f = phi^T theta` with `||theta||_2 <= theta_bound`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearClass {
    pub features: FeatureMap,
    pub theta_bound: f64,
}

impl LinearClass {
    pub fn new(features: FeatureMap, theta_bound: f64) -> Result<Self> {
        if !(theta_bound.is_finite() && theta_bound > 0.0) {
            return Err(QmmrError::validation(
                "theta_bound must be positive and finite",
            ));
        }
        Ok(LinearClass {
            features,
            theta_bound,
        })
    }
}

/// All functions of `(s, a)` bounded by `v_max` in absolute value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TabularClass {
    pub v_max: f64,
}

impl TabularClass {
    pub fn new(v_max: f64) -> Result<Self> {
        if !(v_max.is_finite() && v_max > 0.0) {
            return Err(QmmrError::validation("v_max must be positive and finite"));
        }
        Ok(TabularClass { v_max })
    }
}

/// Linear-optimization access to a symmetric discriminator class, in terms of
/// the parameter vector `theta` and signed pair measures `m`.
pub trait BestResponseOracle {
    /// Number of parameters at level `h`.
    fn num_params(&self, shape: &MdpShape, h: usize) -> usize;
    /// `f(s, a)` for every pair of level `h`.
    fn values(&self, h: usize, theta: &[f64]) -> Vec<f64>;
    /// Gradient of `theta -> <f_theta, m>`.
    fn gradient(&self, h: usize, measure: &[f64]) -> Vec<f64>;
    /// Euclidean projection onto the parameter set.
    fn project(&self, theta: &mut [f64]);
    /// A maximizer of `<f, m>` over the class.
    fn best_response(&self, h: usize, measure: &[f64]) -> Vec<f64>;
    /// `sup_f |<f, m>|`.
    fn sup(&self, h: usize, measure: &[f64]) -> f64;
    /// `sup_f sqrt((1/n) sum_i f(x_i)^2)` for data with pair frequencies `freq`.
    fn data_scale(&self, h: usize, freq: &[f64]) -> f64;
    /// Euclidean radius of the parameter set.
    fn param_radius(&self, shape: &MdpShape, h: usize) -> f64;
    /// `sup_{||theta||_2 <= 1} sqrt((1/n) sum_i f_theta(x_i)^2)`.
    fn gradient_scale(&self, h: usize, freq: &[f64]) -> f64;
}

impl BestResponseOracle for LinearClass {
    fn num_params(&self, _shape: &MdpShape, h: usize) -> usize {
        self.features.dim(h)
    }

    fn values(&self, h: usize, theta: &[f64]) -> Vec<f64> {
        (self.features.matrix(h) * DVector::from_column_slice(theta))
            .data
            .into()
    }

    fn gradient(&self, h: usize, measure: &[f64]) -> Vec<f64> {
        self.features.moment(h, measure).data.into()
    }

    fn project(&self, theta: &mut [f64]) {
        let norm = theta.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > self.theta_bound {
            let scale = self.theta_bound / norm;
            theta.iter_mut().for_each(|v| *v *= scale);
        }
    }

    fn best_response(&self, h: usize, measure: &[f64]) -> Vec<f64> {
        let g = self.features.moment(h, measure);
        let norm = g.norm();
        if norm == 0.0 {
            vec![0.0; g.len()]
        } else {
            (g * (self.theta_bound / norm)).data.into()
        }
    }

    fn sup(&self, h: usize, measure: &[f64]) -> f64 {
        self.theta_bound * self.features.moment(h, measure).norm()
    }

    fn data_scale(&self, h: usize, freq: &[f64]) -> f64 {
        self.theta_bound * self.gradient_scale(h, freq)
    }

    fn param_radius(&self, _shape: &MdpShape, _h: usize) -> f64 {
        self.theta_bound
    }

    fn gradient_scale(&self, h: usize, freq: &[f64]) -> f64 {
        let m = self.features.matrix(h);
        let weighted = DMatrix::from_fn(m.nrows(), m.ncols(), |r, c| m[(r, c)] * freq[r].sqrt());
        SymmetricSpectrum::new(&weighted.tr_mul(&weighted))
            .lambda_max()
            .max(0.0)
            .sqrt()
    }
}

impl BestResponseOracle for TabularClass {
    fn num_params(&self, shape: &MdpShape, h: usize) -> usize {
        shape.num_pairs(h)
    }

    fn values(&self, _h: usize, theta: &[f64]) -> Vec<f64> {
        theta.to_vec()
    }

    fn gradient(&self, _h: usize, measure: &[f64]) -> Vec<f64> {
        measure.to_vec()
    }

    fn project(&self, theta: &mut [f64]) {
        theta
            .iter_mut()
            .for_each(|v| *v = v.clamp(-self.v_max, self.v_max));
    }

    fn best_response(&self, _h: usize, measure: &[f64]) -> Vec<f64> {
        measure
            .iter()
            .map(|&m| {
                if m > 0.0 {
                    self.v_max
                } else if m < 0.0 {
                    -self.v_max
                } else {
                    0.0
                }
            })
            .collect()
    }

    fn sup(&self, _h: usize, measure: &[f64]) -> f64 {
        self.v_max * measure.iter().map(|m| m.abs()).sum::<f64>()
    }

    fn data_scale(&self, _h: usize, freq: &[f64]) -> f64 {
        if freq.iter().any(|&f| f > 0.0) {
            self.v_max
        } else {
            0.0
        }
    }

    fn param_radius(&self, shape: &MdpShape, h: usize) -> f64 {
        self.v_max * (shape.num_pairs(h) as f64).sqrt()
    }

    fn gradient_scale(&self, _h: usize, freq: &[f64]) -> f64 {
        freq.iter().cloned().fold(0.0, f64::max).sqrt()
    }
}

/// The discriminator classes the estimators accept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DiscriminatorClass {
    Linear(LinearClass),
    Tabular(TabularClass),
}

impl DiscriminatorClass {
    fn oracle(&self) -> &dyn BestResponseOracle {
        match self {
            DiscriminatorClass::Linear(c) => c,
            DiscriminatorClass::Tabular(c) => c,
        }
    }
}

impl BestResponseOracle for DiscriminatorClass {
    fn num_params(&self, shape: &MdpShape, h: usize) -> usize {
        self.oracle().num_params(shape, h)
    }
    fn values(&self, h: usize, theta: &[f64]) -> Vec<f64> {
        self.oracle().values(h, theta)
    }
    fn gradient(&self, h: usize, measure: &[f64]) -> Vec<f64> {
        self.oracle().gradient(h, measure)
    }
    fn project(&self, theta: &mut [f64]) {
        self.oracle().project(theta)
    }
    fn best_response(&self, h: usize, measure: &[f64]) -> Vec<f64> {
        self.oracle().best_response(h, measure)
    }
    fn sup(&self, h: usize, measure: &[f64]) -> f64 {
        self.oracle().sup(h, measure)
    }
    fn data_scale(&self, h: usize, freq: &[f64]) -> f64 {
        self.oracle().data_scale(h, freq)
    }
    fn param_radius(&self, shape: &MdpShape, h: usize) -> f64 {
        self.oracle().param_radius(shape, h)
    }
    fn gradient_scale(&self, h: usize, freq: &[f64]) -> f64 {
        self.oracle().gradient_scale(h, freq)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use rand::Rng;

    fn small_shape() -> MdpShape {
        MdpShape::new(vec![1, 3], 2).unwrap()
    }

    fn random_features(shape: &MdpShape, d: usize, seed: u64) -> FeatureMap {
        let mut rng = substream(seed, 0);
        let levels = (0..=shape.horizon())
            .map(|h| DMatrix::from_fn(shape.num_pairs(h), d, |_, _| rng.random::<f64>() - 0.5))
            .collect();
        FeatureMap::new(shape, levels).unwrap()
    }

    #[test]
    fn policy_features_average_rows() {
        let shape = small_shape();
        let map = random_features(&shape, 3, 1);
        let pi = Policy::softmax_random(&shape, 1.0, 4).unwrap();
        let pf = map.policy_features(&shape, &pi, 1);
        for s in 0..3 {
            let manual = map.phi(1, shape.pair(1, s, 0)) * pi.prob(1, s, 0)
                + map.phi(1, shape.pair(1, s, 1)) * pi.prob(1, s, 1);
            assert!((pf.row(s).transpose() - manual).norm() < 1e-14);
        }
    }

    #[test]
    fn json_round_trip() {
        let shape = small_shape();
        let map = random_features(&shape, 2, 3);
        let text = serde_json::to_string(&map).unwrap();
        let back: FeatureMap = serde_json::from_str(&text).unwrap();
        assert_eq!(map, back);
    }

    #[test]
    fn rejects_wrong_row_count() {
        let shape = small_shape();
        let levels = vec![DMatrix::zeros(1, 2), DMatrix::zeros(5, 2)];
        assert!(FeatureMap::new(&shape, levels).is_err());
    }

    #[test]
    fn linear_sup_dominates_random_probes() {
        let shape = small_shape();
        let class = LinearClass::new(random_features(&shape, 3, 5), 2.0).unwrap();
        let mut rng = substream(9, 0);
        let m: Vec<f64> = (0..6).map(|_| rng.random::<f64>() - 0.5).collect();
        let sup = class.sup(1, &m);
        let br = class.best_response(1, &m);
        let at_br: f64 = class
            .values(1, &br)
            .iter()
            .zip(&m)
            .map(|(f, x)| f * x)
            .sum();
        assert!((at_br - sup).abs() < 1e-12);
        for _ in 0..1000 {
            let mut theta: Vec<f64> = (0..3).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
            class.project(&mut theta);
            let v: f64 = class
                .values(1, &theta)
                .iter()
                .zip(&m)
                .map(|(f, x)| f * x)
                .sum();
            assert!(v.abs() <= sup + 1e-12);
        }
    }

    #[test]
    fn tabular_sup_is_scaled_l1() {
        let class = TabularClass::new(3.0).unwrap();
        let m = [0.1, -0.2, 0.0, 0.05];
        assert!((class.sup(1, &m) - 3.0 * 0.35).abs() < 1e-15);
        assert_eq!(class.best_response(1, &m), vec![3.0, -3.0, 0.0, 3.0]);
    }

    #[test]
    fn linear_data_scale_matches_design() {
        let shape = small_shape();
        let class = LinearClass::new(random_features(&shape, 3, 2), 1.5).unwrap();
        let pairs = [0, 0, 1, 4, 5, 5, 5, 2];
        let freq = data_measure(6, &pairs, &[1.0; 8]);
        let design = class.features.design(1, &pairs);
        let lmax = SymmetricSpectrum::new(&gram_matrix(&design)).lambda_max();
        assert!((class.data_scale(1, &freq) - 1.5 * lmax.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn discrepancy_pairs_to_weighted_difference() {
        let shape = small_shape();
        let map = random_features(&shape, 2, 8);
        let pi = Policy::softmax_random(&shape, 0.5, 1).unwrap();
        let design = LevelDesign {
            h: 1,
            pairs: vec![0, 3, 5, 2],
            local_states: vec![0, 1, 2, 1],
        };
        let w = [0.5, 1.0, 2.0, -1.0];
        let w_prev = [1.0, 1.0, 0.5, 2.0];
        let m = design.discrepancy(&shape, &pi, &w, &w_prev);
        let pf = map.policy_features(&shape, &pi, 1);
        let mut direct = DVector::zeros(2);
        for i in 0..4 {
            direct += map.phi(1, design.pairs[i]) * (w[i] / 4.0);
            direct -= pf.row(design.local_states[i]).transpose() * (w_prev[i] / 4.0);
        }
        assert!((map.moment(1, &m) - direct).norm() < 1e-14);
    }
}
