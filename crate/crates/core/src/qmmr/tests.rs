use super::*;
use crate::features::{FeatureMap, LinearClass, TabularClass};
use crate::mdp::{sample_trajectories, Policy};
use crate::test_support::random_mdp;

#[test]
fn weight_matrix_rejects_non_unit_root() {
    assert!(WeightMatrix::new(vec![vec![1.0, 0.5], vec![1.0, 1.0]], vec![0.0, 0.0]).is_err());
    assert!(WeightMatrix::new(vec![vec![1.0, 1.0], vec![1.0]], vec![0.0, 0.0]).is_err());
    let w = WeightMatrix::new(vec![vec![1.0, 1.0], vec![3.0, -1.0]], vec![0.0, 0.2]).unwrap();
    assert_eq!(w.second_moment(0), 1.0);
    assert!((w.second_moment(1) - 5f64.sqrt()).abs() < 1e-15);
}

#[test]
fn statistical_terms_regression_value() {
    // 3 levels, n = 100, V_max = 2, delta = 0.1, unit second moments:
    // 3 * 2 * sqrt(2 ln(60) / 100).
    let eps = statistical_terms(&[1.0, 1.0, 1.0], 2.0, 0.1, 100).unwrap();
    let total: f64 = eps.iter().sum();
    assert!((total - 1.716953139954586).abs() < 1e-12);
}

#[test]
fn statistical_terms_halve_with_four_times_n() {
    let a = statistical_terms(&[1.0, 2.0, 0.5], 3.0, 0.05, 250).unwrap();
    let b = statistical_terms(&[1.0, 2.0, 0.5], 3.0, 0.05, 1000).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!((x / y - 2.0).abs() < 1e-12);
    }
}

#[test]
fn delta_outside_unit_interval_is_rejected() {
    for delta in [0.0, 1.0, -0.1, 1.5, f64::NAN] {
        let err = statistical_terms(&[1.0], 1.0, delta, 10).unwrap_err();
        assert!(err.is_validation());
    }
}

#[test]
fn estimate_with_zero_and_unit_weights() {
    let mdp = random_mdp(3, 3, 2, 2);
    let pi = Policy::uniform(mdp.shape());
    let ds = sample_trajectories(&mdp, &pi, 80, 6).unwrap();
    let mut zero = vec![vec![0.0; 80]; 4];
    zero[0] = vec![1.0; 80];
    let zero = WeightMatrix::new(zero, vec![0.0; 4]).unwrap();
    assert_eq!(estimate_return(&ds, &zero), 0.0);
    let mean = (0..80).map(|i| ds.trajectory_return(i)).sum::<f64>() / 80.0;
    assert!((estimate_return(&ds, &WeightMatrix::ones(3, 80)) - mean).abs() < 1e-12);
}

#[test]
fn zero_weights_on_both_sides_have_zero_loss() {
    let mdp = random_mdp(2, 3, 2, 1);
    let shape = mdp.shape();
    let pi = Policy::uniform(shape);
    let ds = sample_trajectories(&mdp, &pi, 30, 0).unwrap();
    let design = LevelDesign::new(&ds, shape, 1);
    let class = LinearClass::new(FeatureMap::one_hot(shape), 1.0).unwrap();
    let zeros = vec![0.0; 30];
    assert_eq!(
        matching_loss(&design, shape, &class, &pi, &zeros, &zeros),
        0.0
    );
}

#[test]
fn zero_budget_minimax_returns_zero_weights() {
    let mdp = random_mdp(2, 3, 2, 3);
    let shape = mdp.shape();
    let pi = Policy::uniform(shape);
    let ds = sample_trajectories(&mdp, &pi, 40, 2).unwrap();
    let design = LevelDesign::new(&ds, shape, 1);
    let class = LinearClass::new(FeatureMap::one_hot(shape), 2.0).unwrap();
    let ones = vec![1.0; 40];
    for order in [RoleOrder::NoRegretOnW, RoleOrder::NoRegretOnF] {
        let cfg = MinimaxConfig {
            budget: 0.0,
            iterations: 10,
            step: StepSize::Auto,
            order,
        };
        let sol = solve_level_minimax(&design, shape, &class, &pi, &ones, &cfg).unwrap();
        assert!(sol.weights.iter().all(|&w| w == 0.0));
        let moments = LinearMoments::new(&design, shape, &class.features, &pi, &ones);
        assert!((sol.loss - 2.0 * moments.psi.norm()).abs() < 1e-12);
    }
}

#[test]
fn minimax_config_validation() {
    let bad = MinimaxConfig {
        budget: 1.0,
        iterations: 0,
        step: StepSize::Auto,
        order: RoleOrder::NoRegretOnW,
    };
    assert!(bad.validate().is_err());
    let bad_step = MinimaxConfig {
        step: StepSize::Fixed(-1.0),
        iterations: 5,
        ..bad
    };
    assert!(bad_step.validate().is_err());
}

#[test]
fn tabular_run_reports_mass_and_bound() {
    let mdp = random_mdp(2, 3, 2, 7);
    let shape = mdp.shape();
    let pi = Policy::uniform(shape);
    let ds = sample_trajectories(&mdp, &pi, 300, 1).unwrap();
    let class = DiscriminatorClass::Tabular(TabularClass::new(mdp.v_max()).unwrap());
    let run = run_qmmr(
        &ds,
        shape,
        &class,
        &pi,
        &SolverConfig::ClosedForm,
        mdp.v_max(),
        0.1,
    )
    .unwrap();
    let est = &run.estimate;
    let recomputed: f64 = est.per_level[1..].iter().map(|l| l.loss).sum::<f64>()
        + est.per_level.iter().map(|l| l.eps_stat).sum::<f64>();
    assert!((est.bound - recomputed).abs() < 1e-12);
    let contributions: f64 = est.per_level.iter().map(|l| l.reward_contribution).sum();
    assert!((est.j_hat - contributions).abs() < 1e-12);
    for sol in &run.levels {
        assert_eq!(sol.unmatched_mass, Some(0.0));
    }
}

#[test]
fn weights_csv_has_one_row_per_level() {
    let w = WeightMatrix::ones(2, 3);
    let mut buf = Vec::new();
    w.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().next().unwrap(), "level,w0,w1,w2");
    assert_eq!(text.lines().count(), 4);
}
