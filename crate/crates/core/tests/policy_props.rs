mod common;

use common::rng;
use dyninfer_core::policy::{
    calibrate_thresholds, exit_distribution, exit_targets, expected_cost, replay, solve_q, sweep_budgets, ConfidenceMatrix,
    ExitModel, ExitPolicy, Regime,
};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

fn cost_table() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(1.0f64..1e6, 2..9).prop_map(|mut v| {
        // strictly increasing cumulative costs
        for i in 1..v.len() {
            v[i] += v[i - 1];
        }
        v
    })
}

#[test]
fn distribution_sums_to_one_for_1000_draws() {
    let mut rng = rng(31);
    for _ in 0..1000 {
        let q = 1.0 - rng.random::<f64>();
        let k = rng.random_range(1..=64);
        let m = exit_distribution(q, k).unwrap();
        assert!((m.probs.iter().sum::<f64>() - 1.0).abs() <= 1e-12, "q={q} K={k}");
    }
}

#[test]
fn closed_form_two_checkpoint_case() {
    let s = solve_q(1.5, &[1.0, 3.0]).unwrap();
    assert_eq!(s.regime, Regime::ExitProbability);
    assert!((s.q - 2.0 / 3.0).abs() <= 1e-9, "{}", s.q);
}

proptest! {
    #[test]
    fn successive_ratio_is_one_minus_q(q in 1e-6f64..1.0, k in 2usize..40) {
        let m = exit_distribution(q, k).unwrap();
        for w in m.probs.windows(2) {
            prop_assert!((w[1] / w[0] - (1.0 - q)).abs() <= 1e-10);
        }
        // normaliser from its own definition
        let z = 1.0 / (0..k).map(|i| (1.0 - q).powi(i as i32) * q).sum::<f64>();
        prop_assert!((m.z - z).abs() <= 1e-12 * z);
    }

    #[test]
    fn extended_family_agrees_on_unit_interval(q in 1e-6f64..=1.0, k in 1usize..20) {
        let a = exit_distribution(q, k).unwrap();
        let b = ExitModel::from_q_extended(q, k).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn extended_family_grows_by_one_minus_q(q in -50.0f64..0.0, k in 2usize..20) {
        let m = ExitModel::from_q_extended(q, k).unwrap();
        prop_assert!((m.probs.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        for w in m.probs.windows(2) {
            prop_assert!((w[1] / w[0] - (1.0 - q)).abs() <= 1e-9 * (1.0 - q));
        }
    }

    #[test]
    fn expected_cost_falls_as_q_rises(costs in cost_table(), a in 1e-4f64..1.0, b in 1e-4f64..1.0) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let c_lo = expected_cost(&exit_distribution(lo, costs.len()).unwrap(), &costs).unwrap();
        let c_hi = expected_cost(&exit_distribution(hi, costs.len()).unwrap(), &costs).unwrap();
        prop_assert!(c_hi <= c_lo * (1.0 + 1e-12));
    }

    #[test]
    fn solver_round_trips(costs in cost_table(), u in 0.0f64..1.0) {
        let k = costs.len();
        let budget = costs[0] + u * (costs[k - 1] - costs[0]);
        let s = solve_q(budget, &costs).unwrap();
        if s.regime != Regime::Saturated {
            let m = ExitModel::from_q_extended(s.q, k).unwrap();
            let c = expected_cost(&m, &costs).unwrap();
            prop_assert!((c - budget).abs() <= 1e-6 * costs[k - 1], "budget {} cost {}", budget, c);
        }
    }

    #[test]
    fn solved_q_is_monotone_in_budget(costs in cost_table(), u in 0.0f64..1.0, v in 0.0f64..1.0) {
        let k = costs.len();
        let at = |t: f64| solve_q(costs[0] + t * (costs[k - 1] - costs[0]), &costs).unwrap().q;
        let (lo, hi) = if u < v { (u, v) } else { (v, u) };
        prop_assert!(at(hi) <= at(lo));
    }

    #[test]
    fn infeasible_budgets_are_rejected(costs in cost_table(), f in 0.0f64..0.999) {
        prop_assert!(solve_q(costs[0] * f, &costs).is_err());
    }

    #[test]
    fn targets_partition_the_calibration_set(q in 1e-3f64..1.0, k in 1usize..10, d in 10usize..2000) {
        let t = exit_targets(d, &exit_distribution(q, k).unwrap());
        prop_assert_eq!(t.iter().sum::<usize>(), d);
    }
}

/// Distinct confidences in `(0, 1)` for `d` samples and `k` checkpoints.
fn distinct_confidences(d: usize, k: usize, seed: u64) -> ConfidenceMatrix {
    let mut rng = rng(seed);
    let mut levels: Vec<usize> = (1..=d * k).collect();
    levels.shuffle(&mut rng);
    let data = levels.iter().map(|&l| l as f64 / (d * k + 1) as f64).collect();
    ConfidenceMatrix::new(d, k, data).unwrap()
}

#[test]
fn replayed_counts_equal_targets_on_500_samples() {
    let mut rng = rng(32);
    for trial in 0..200 {
        let k = rng.random_range(2..=8);
        let conf = distinct_confidences(500, k, 1000 + trial);
        let q = if trial % 4 == 0 { -rng.random_range(0.0..0.6) } else { rng.random_range(0.01..1.0) };
        let model = ExitModel::from_q_extended(q, k).unwrap();
        let cal = calibrate_thresholds(&conf, &model).unwrap();
        let expect: Vec<usize> = {
            let mut left = 500usize;
            let mut v: Vec<usize> = model.probs[..k - 1]
                .iter()
                .map(|p| {
                    let n = ((500.0 * p).round_ties_even() as usize).min(left);
                    left -= n;
                    n
                })
                .collect();
            v.push(left);
            v
        };
        assert_eq!(cal.targets, expect);
        assert_eq!(replay(&conf, &cal.thresholds), expect, "trial {trial} q={q}");
    }
}

#[test]
fn reported_histogram_uses_the_table_ratio() {
    // mass grows by 1.2 per checkpoint; a 1.2 ratio between successive
    // exit counts is reproduced up to rounding
    let k = 6;
    let model = ExitModel::from_q_extended(-0.2, k).unwrap();
    let conf = distinct_confidences(20000, k, 9);
    let cal = calibrate_thresholds(&conf, &model).unwrap();
    let hist = replay(&conf, &cal.thresholds);
    for w in hist.windows(2) {
        assert!((w[1] as f64 / w[0] as f64 - 1.2).abs() < 2e-3, "{hist:?}");
    }
}

#[test]
fn calibrated_policy_average_cost_meets_budget() {
    let costs: Vec<u64> = vec![100, 250, 400, 800, 1000];
    let conf = distinct_confidences(500, costs.len(), 33);
    let budgets: Vec<f64> = (0..=20).map(|i| 100.0 + 45.0 * i as f64).collect();
    let out = sweep_budgets(&budgets, &conf, &costs);
    assert!(out.skipped.is_empty());
    for p in &out.policies {
        let hist = replay(&conf, &p.thresholds);
        let avg = hist.iter().zip(&costs).map(|(&n, &g)| n as f64 * g as f64).sum::<f64>() / 500.0;
        // rounding moves fewer than K samples, each by at most G_K
        assert!((avg - p.budget).abs() <= costs.len() as f64 * 1000.0 / 500.0 + 1e-9, "budget {} avg {avg}", p.budget);
    }
    let (p, _, _) = ExitPolicy::calibrate(100.0, &costs, &conf).unwrap();
    assert_eq!(replay(&conf, &p.thresholds)[0], 500);
}
