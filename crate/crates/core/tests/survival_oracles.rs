//! Kaplan-Meier and Cox estimates against hand calculations, a brute-force
//! likelihood maximiser, and values from an independent implementation
//! (statsmodels PHReg; see fixtures/oracles/cox_reference.py).

use cac_core::stats::{cox_two_group, km_estimate, StatsError, SurvivalObs};
use proptest::prelude::*;

fn obs(data: &[(f64, bool)]) -> Vec<SurvivalObs> {
    data.iter().map(|&(time, event)| SurvivalObs { time, event }).collect()
}

const REFERENCE: &[(f64, bool)] = &[
    (2.0, true),
    (3.0, true),
    (3.0, false),
    (5.0, true),
    (8.0, false),
    (9.0, true),
    (12.0, false),
    (12.0, true),
    (15.0, false),
];
const COMPARISON: &[(f64, bool)] = &[
    (1.0, true),
    (2.0, true),
    (3.0, true),
    (3.0, true),
    (4.0, false),
    (5.0, true),
    (6.0, true),
    (7.0, false),
    (10.0, true),
];

#[test]
fn km_hand_worked_example() {
    // n=9. t=2: 8/9. t=3: 1 death of 8 at risk (censored at 3 stays) → ·7/8.
    // t=5: 6 at risk → ·5/6. t=9: 4 at risk → ·3/4. t=12: 3 at risk → ·2/3.
    let curve = km_estimate(&obs(REFERENCE), &[0.0, 3.0, 10.0]).unwrap();
    let expected =
        [1.0, 8.0 / 9.0, 8.0 / 9.0 * 7.0 / 8.0, 7.0 / 9.0 * 5.0 / 6.0, 35.0 / 54.0 * 0.75, 35.0 / 72.0 * 2.0 / 3.0];
    assert_eq!(curve.times, vec![0.0, 2.0, 3.0, 5.0, 9.0, 12.0]);
    for (got, want) in curve.survival.iter().zip(expected) {
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }
    // Matches the independent implementation's printout too.
    for (got, want) in curve.survival[1..].iter().zip([
        0.888888888888889,
        0.777777777777778,
        0.648148148148148,
        0.486111111111111,
        0.324074074074074,
    ]) {
        assert!((got - want).abs() < 1e-12);
    }
    assert!((curve.survival_at(4.99) - 7.0 / 9.0).abs() < 1e-15);
    assert!((curve.survival_at(100.0) - 35.0 / 108.0).abs() < 1e-15);
    let rows: Vec<(usize, usize, usize)> = curve.table.iter().map(|r| (r.at_risk, r.censored, r.events)).collect();
    assert_eq!(rows, vec![(9, 0, 0), (8, 0, 1), (3, 2, 4)]);
}

#[test]
fn cox_matches_independent_efron_fit() {
    let fit = cox_two_group(&obs(REFERENCE), &obs(COMPARISON)).unwrap();
    assert!(fit.converged);
    assert!((fit.log_hr - 1.001876616622).abs() < 1e-8, "{}", fit.log_hr);
    assert!((fit.se - 0.640528252555).abs() < 1e-8, "{}", fit.se);
    assert!((fit.wald_z - 1.564141179761).abs() < 1e-7);
    assert!((fit.p_value - 1.177844170433e-01).abs() < 1e-9);
    assert!((fit.log_likelihood - -25.793279140509).abs() < 1e-8, "{}", fit.log_likelihood);
}

/// Breslow partial log-likelihood written directly from the definition;
/// equal to Efron when no event times are tied.
fn partial_log_likelihood(data: &[(f64, bool, f64)], beta: f64) -> f64 {
    data.iter()
        .filter(|d| d.1)
        .map(|&(t, _, x)| {
            let denom: f64 = data.iter().filter(|d| d.0 >= t).map(|d| (beta * d.2).exp()).sum();
            beta * x - denom.ln()
        })
        .sum()
}

#[test]
fn cox_matches_grid_search_on_six_subjects() {
    let reference = [(1.0, true), (4.0, false), (6.0, true)];
    let comparison = [(2.0, true), (3.0, true), (5.0, false)];
    let data: Vec<(f64, bool, f64)> =
        reference.iter().map(|&(t, e)| (t, e, 0.0)).chain(comparison.iter().map(|&(t, e)| (t, e, 1.0))).collect();
    let mut best = (f64::NEG_INFINITY, 0.0);
    let mut beta = -5.0;
    while beta <= 5.0 {
        let ll = partial_log_likelihood(&data, beta);
        if ll > best.0 {
            best = (ll, beta);
        }
        beta += 1e-4;
    }
    let fit = cox_two_group(&obs(&reference), &obs(&comparison)).unwrap();
    assert!((fit.log_hr - best.1).abs() < 1e-3, "{} vs grid {}", fit.log_hr, best.1);
    assert!((fit.log_likelihood - best.0).abs() < 1e-6);
}

#[test]
fn separation_is_reported_not_estimated() {
    let none = [(1.0, false), (2.0, false)];
    let some = [(1.5, true), (3.0, false)];
    assert!(matches!(cox_two_group(&obs(&none), &obs(&some)), Err(StatsError::Separation(_))));
    assert!(matches!(cox_two_group(&obs(&some), &obs(&none)), Err(StatsError::Separation(_))));
    assert_eq!(cox_two_group(&obs(&none), &obs(&none)), Err(StatsError::NoEvents));
    // Both groups have events, but the only reference event happens after
    // the comparison group has left the risk set.
    let late_reference = [(1.0, false), (11.0, true)];
    let early_comparison = [(1.0, true), (1.0, false)];
    assert!(matches!(cox_two_group(&obs(&late_reference), &obs(&early_comparison)), Err(StatsError::Separation(_))));
}

fn group() -> impl Strategy<Value = Vec<(u32, bool)>> {
    prop::collection::vec((1u32..60, any::<bool>()), 3..25)
}

fn to_obs(g: &[(u32, bool)], f: impl Fn(f64) -> f64) -> Vec<SurvivalObs> {
    g.iter().map(|&(t, e)| SurvivalObs { time: f(t as f64), event: e }).collect()
}

proptest! {
    #[test]
    fn cox_depends_only_on_time_ranks(a in group(), b in group()) {
        let plain = cox_two_group(&to_obs(&a, |t| t), &to_obs(&b, |t| t));
        let warped = cox_two_group(&to_obs(&a, |t| (t * 0.37).exp() + 3.0 * t), &to_obs(&b, |t| (t * 0.37).exp() + 3.0 * t));
        match (plain, warped) {
            (Ok(p), Ok(w)) => {
                prop_assert!((p.log_hr - w.log_hr).abs() < 1e-9);
                prop_assert!((p.se - w.se).abs() < 1e-9);
            }
            (p, w) => prop_assert_eq!(p.err(), w.err()),
        }
    }

    #[test]
    fn swapping_labels_inverts_hazard_ratio(a in group(), b in group()) {
        let (a, b) = (to_obs(&a, |t| t), to_obs(&b, |t| t));
        if let (Ok(ab), Ok(ba)) = (cox_two_group(&a, &b), cox_two_group(&b, &a)) {
            prop_assert!((ab.log_hr + ba.log_hr).abs() < 1e-9, "{} {}", ab.log_hr, ba.log_hr);
            prop_assert!((ab.se - ba.se).abs() < 1e-9);
            prop_assert!((ab.p_value - ba.p_value).abs() < 1e-9);
        }
    }

    #[test]
    fn km_is_nonincreasing_and_table_balances(a in group()) {
        let o = to_obs(&a, |t| t);
        let grid: Vec<f64> = (0..7).map(|k| k as f64 * 10.0).collect();
        let curve = km_estimate(&o, &grid).unwrap();
        prop_assert!(curve.survival.windows(2).all(|w| w[1] <= w[0]));
        for row in &curve.table {
            prop_assert_eq!(row.at_risk + row.censored + row.events, o.len());
        }
    }
}
