use collegial::mc::predicted_variance;
use collegial::search::{self, BaselineSpec, EfficiencyMetric};
use collegial::{LayerSpec, Readout, Topology};
use proptest::prelude::*;

fn bottleneck(n_in: usize, width: usize, spatial: usize) -> Topology {
    Topology::bottleneck(n_in, width, n_in, Some((spatial, spatial))).unwrap()
}

/// Grouped bottleneck: the middle conv has `groups` groups at every width
/// the grid visits.
fn grouped(width: usize, groups: usize) -> Topology {
    let layers = vec![
        LayerSpec::conv2d(64, width, 1, 1, true),
        LayerSpec::conv2d(width, width, 3, groups, true),
        LayerSpec::conv2d(width, 64, 1, 1, false),
    ];
    Topology::new(64, layers, vec![true, true, false], Some((4, 4)), Readout::Pooled).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn strong_duality_on_any_grid(
        alpha in 0.05f64..8.0,
        width in 4usize..160,
        mut grid in proptest::collection::vec(1usize..160, 1..40),
    ) {
        let b = BaselineSpec::new(bottleneck(256, width, 2), alpha).unwrap();
        grid.sort_unstable();
        grid.dedup();
        let r = search::grid_search(&b, Some(&grid), EfficiencyMetric::Params, None).unwrap();
        prop_assert_eq!(r.n_primal, r.n_dual);
        let best = r.curve.iter().map(|c| c.primal_objective).fold(f64::INFINITY, f64::min);
        prop_assert!(r.optimum().primal_objective <= best * (1.0 + 1e-12));
    }

    #[test]
    fn primal_budget_and_dual_constraint_hold(alpha in 0.05f64..6.0, n in 1usize..200) {
        let b = BaselineSpec::new(bottleneck(128, 64, 3), alpha).unwrap();
        let p = search::dual_point(n, &b, EfficiencyMetric::Params).unwrap();
        let t = b.topology.with_search_width(n).unwrap();
        prop_assert!((p.m_primal * p.beta_n as f64 - b.beta_s as f64).abs() <= 1e-9 * b.beta_s as f64);
        // predicted_variance with a real-valued m
        let v_n = (alpha * t.inverse_fanin_sum()).exp_m1() / p.m_dual;
        let v_base = predicted_variance(alpha, &b.topology, 1);
        prop_assert!((v_n - v_base).abs() <= 4.0 * f64::EPSILON * v_base);
    }

    #[test]
    fn argmin_is_invariant_to_cost_scaling(alpha in 0.1f64..5.0, spatial in 1usize..9) {
        // FLOPs are parameters times 2·H·W, a uniform rescaling of every cost.
        let b = BaselineSpec::new(bottleneck(256, 128, spatial), alpha).unwrap();
        let p = search::grid_search(&b, None, EfficiencyMetric::Params, None).unwrap();
        let f = search::grid_search(&b, None, EfficiencyMetric::Flops, None).unwrap();
        prop_assert_eq!(p.n_primal, f.n_primal);
        prop_assert_eq!(p.n_dual, f.n_dual);
        prop_assert!((p.m_primal - f.m_primal).abs() <= 1e-12 * p.m_primal);
    }
}

#[test]
fn grouped_baseline_searches_multiples_of_groups() {
    let b = BaselineSpec::new(grouped(64, 4), 1.6).unwrap();
    let grid: Vec<usize> = (1..=16).map(|k| 4 * k).collect();
    let r = search::grid_search(&b, Some(&grid), EfficiencyMetric::Params, None).unwrap();
    assert_eq!(r.n_primal, r.n_dual);
    assert_eq!(r.n_primal % 4, 0);
    // a width the groups do not divide is rejected
    assert!(search::primal_point(6, &b, EfficiencyMetric::Params).is_err());
}

#[test]
fn rounded_outputs_are_consistent() {
    let b = BaselineSpec::new(bottleneck(256, 128, 4), 1.6).unwrap();
    let r = search::grid_search(&b, None, EfficiencyMetric::Params, None).unwrap();
    let opt = r.optimum();
    assert_eq!(r.m_primal_int, opt.m_primal.round() as u64);
    assert_eq!(r.realized_budget, r.m_primal_int * opt.beta_n);
    assert_eq!(r.m_dual_int, opt.m_dual.round().max(1.0) as u64);
    assert_eq!(r.realized_rho, b.beta_s as f64 / (r.m_dual_int * opt.beta_n) as f64);
    assert_eq!(r.curve.len(), 128);
}
