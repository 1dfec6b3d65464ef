mod common;

use common::{box_moments, box_probability, INF};
use orthant_core::estimators::{ghk, RunConfig};
use orthant_core::problem::{gen_ar1_problem, gen_probit_panel, gen_thurstonian, Ar1Spec, OrthantProblem, ProbitPanelSpec};
use proptest::prelude::*;

fn ghk_probability(p: &OrthantProblem, m: usize) -> f64 {
    ghk(p, &RunConfig::new(m, 1).with_timing(false)).unwrap().probability()
}

#[test]
fn ar1_covariance_and_probability() {
    let rho = 0.7;
    let p = gen_ar1_problem(&Ar1Spec::new(2, rho, 0.0, 15.0)).unwrap();
    let s = p.sigma().rows();
    let expected = [vec![1.0, rho], vec![rho, 1.0 + rho * rho]];
    for i in 0..2 {
        for j in 0..2 {
            assert!((s[i][j] - expected[i][j]).abs() < 1e-14);
        }
    }
    let truth = box_probability(&[0.0, 0.0], &[15.0, 15.0], &s);
    let est = ghk_probability(&p, 200_000);
    assert!((est - truth).abs() < 2e-3 * truth, "{est} vs {truth}");
}

#[test]
fn three_item_ranking_probability() {
    let truth = 0.5361516341260809;
    let s = vec![vec![2.0, -1.0], vec![-1.0, 2.0]];
    let (q, _) = box_moments(&[0.0, 0.0], &[INF, INF], &s, &[1.0, 1.0]);
    assert!((q - truth).abs() < 1e-9, "{q}");
    let p = gen_thurstonian(&[0.0, 1.0, 2.0], 1.0).unwrap();
    assert!(p.is_standardized());
    let est = ghk_probability(&p, 200_000);
    assert!((est - truth).abs() < 3e-3, "{est}");
}

#[test]
fn equal_items_rank_uniformly() {
    let p = gen_thurstonian(&[0.4; 4], 2.0).unwrap();
    let est = ghk_probability(&p, 200_000);
    assert!((est - 1.0 / 24.0).abs() < 1e-3, "{est}");
}

#[test]
fn probit_panel_shape() {
    let spec = ProbitPanelSpec::new(3, 2);
    let p = gen_probit_panel(&spec, 4).unwrap();
    assert_eq!(p.dim(), 4);
    assert!(p.lower().iter().all(|a| *a == f64::NEG_INFINITY));
    assert!(p.upper().iter().all(|b| b.is_finite()));
    let est = ghk_probability(&p, 50_000);
    assert!(est > 0.0 && est < 1.0);
}

#[test]
fn standardize_preserves_the_probability() {
    let p = OrthantProblem::new(vec![-0.5, 0.0], vec![1.0, INF], orthant_core::linalg::SymMatrix::from_rows(&[vec![1.0, 0.4], vec![0.4, 1.0]]).unwrap())
        .unwrap()
        .with_mean(vec![0.3, -0.7])
        .unwrap();
    let std = p.standardize();
    assert!(std.is_standardized());
    let a = ghk(&p, &RunConfig::new(1000, 3).with_timing(false)).unwrap();
    let b = ghk(&std, &RunConfig::new(1000, 3).with_timing(false)).unwrap();
    assert_eq!(a.log_prob, b.log_prob);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn json_round_trip_preserves_problems(d in 1usize..8, seed in 0u64..1000) {
        let p = orthant_core::problem::gen_cauchy_problem(d, seed).unwrap();
        let q = OrthantProblem::from_json(&p.to_json().unwrap()).unwrap();
        prop_assert_eq!(p.lower(), q.lower());
        prop_assert_eq!(p.upper(), q.upper());
        prop_assert_eq!(p.sigma().rows(), q.sigma().rows());
    }

    #[test]
    fn ar1_boxes_are_ordered(t in 1usize..30, rho in -0.95f64..0.95, upper in 0.5f64..20.0) {
        let p = gen_ar1_problem(&Ar1Spec::new(t, rho, 0.0, upper)).unwrap();
        prop_assert_eq!(p.dim(), t);
        for i in 0..t {
            prop_assert!(p.lower()[i] < p.upper()[i]);
        }
    }
}
