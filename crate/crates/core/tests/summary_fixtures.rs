//! Screening distribution and therapy-gap summaries on synthetic cohorts.

mod common;

use cac_core::summary::{screening_report, therapy_gap_report, TherapyPolicy, PANEL_ALL, PANEL_LIVING_OFF};

#[test]
fn screening_distribution_reproduces_published_percentages() {
    let subjects = common::screening_cohort();
    assert_eq!(subjects.len(), 8052);
    let report = screening_report(&subjects, None, &TherapyPolicy::default());
    let all = report.panel(PANEL_ALL).unwrap();
    assert_eq!(all.n, 8052);
    assert_eq!(all.counts, [1668, 1727, 1566, 3091]);
    assert_eq!(all.percent, [20.7, 21.4, 19.4, 38.4]);
    let csv = report.to_csv();
    assert!(csv.lines().nth(1).unwrap().starts_with("all,8052,1668,20.7,1727,21.4,1566,19.4,3091,38.4"));
}

#[test]
fn therapy_gap_reproduces_920_of_3007() {
    let (subjects, patients) = common::therapy_gap_cohort();
    let gap = therapy_gap_report(&subjects, &patients, &TherapyPolicy::default());
    assert_eq!(gap.n_living_gt400, 3007);
    assert_eq!(gap.n_untreated, 920);
    assert_eq!(gap.percent, Some(30.6));
    assert!(gap.untreated_patient_ids.iter().all(|id| id.starts_with("never-") || id.starts_with("lapsed-")));

    // The off-therapy panel agrees on the >400 column.
    let report = screening_report(&subjects, Some(&patients), &TherapyPolicy::default());
    assert_eq!(report.panel(PANEL_LIVING_OFF).unwrap().counts[3], 920);
    assert_eq!(report.unmatched_subjects, 0);
}

#[test]
fn a_longer_active_window_only_shrinks_the_gap() {
    let (subjects, patients) = common::therapy_gap_cohort();
    let default = therapy_gap_report(&subjects, &patients, &TherapyPolicy::default());
    let wide = therapy_gap_report(&subjects, &patients, &TherapyPolicy { active_window_days: 730 });
    assert!(wide.n_untreated < default.n_untreated);
    assert_eq!(wide.n_living_gt400, default.n_living_gt400);
}
