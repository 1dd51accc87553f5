//! Screening-cohort summaries: CAC bin distribution (optionally crossed
//! with lipid-lowering therapy status) and the untreated high-CAC list.

use std::collections::BTreeMap;
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::agatston::CacBin;
use crate::cohort::PatientRecord;

/// How "currently on therapy" is decided at the end of follow-up.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TherapyPolicy {
    /// A prescription issued within this many days up to and including
    /// follow-up end counts as active therapy.
    pub active_window_days: i64,
}

impl Default for TherapyPolicy {
    fn default() -> Self {
        Self { active_window_days: 365 }
    }
}

impl TherapyPolicy {
    pub fn is_active(&self, patient: &PatientRecord) -> bool {
        let end = patient.followup_end;
        patient.lipid_issue_dates.iter().any(|d| *d <= end && (end - *d).num_days() < self.active_window_days)
    }
}

/// One screened patient with the CAC bin of their screening scan.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScreeningSubject {
    pub patient_id: String,
    pub bin: CacBin,
}

/// `count / n` as a percentage rounded half-up to one decimal, computed in
/// integers so that values such as 20.65 round the same way everywhere.
pub fn percent_one_decimal(count: u64, n: u64) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let tenths = (2000 * count + n) / (2 * n);
    tenths as f64 / 10.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinDistribution {
    pub n: u64,
    /// Indexed by [`CacBin::index`].
    pub counts: [u64; 4],
    pub percent: [f64; 4],
}

impl BinDistribution {
    pub fn from_bins(bins: impl IntoIterator<Item = CacBin>) -> Self {
        let mut counts = [0u64; 4];
        for b in bins {
            counts[b.index()] += 1;
        }
        let n = counts.iter().sum();
        Self { n, counts, percent: counts.map(|c| percent_one_decimal(c, n)) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreeningPanel {
    pub panel: String,
    pub distribution: BinDistribution,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreeningReport {
    pub panels: Vec<ScreeningPanel>,
    /// Subjects without a patient record (therapy panels skip them).
    pub unmatched_subjects: usize,
}

impl ScreeningReport {
    pub fn panel(&self, name: &str) -> Option<&BinDistribution> {
        self.panels.iter().find(|p| p.panel == name).map(|p| &p.distribution)
    }

    /// One row per panel: panel, n, then count and percent for each bin.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("panel,n");
        for bin in CacBin::ALL {
            let _ = write!(out, ",count_{0},percent_{0}", bin.as_str());
        }
        out.push('\n');
        for p in &self.panels {
            let d = &p.distribution;
            let _ = write!(out, "{},{}", p.panel, d.n);
            for i in 0..4 {
                let _ = write!(out, ",{},{:.1}", d.counts[i], d.percent[i]);
            }
            out.push('\n');
        }
        out
    }
}

pub const PANEL_ALL: &str = "all";
pub const PANEL_EVER: &str = "ever_prescribed";
pub const PANEL_NEVER: &str = "never_prescribed";
pub const PANEL_LIVING_ON: &str = "living_on_therapy";
pub const PANEL_LIVING_OFF: &str = "living_off_therapy";

/// Bin distribution of a screening cohort. With patient records, four more
/// panels split it by therapy: ever / never prescribed, and living patients
/// on / off active therapy at follow-up end.
pub fn screening_report(
    subjects: &[ScreeningSubject],
    patients: Option<&[PatientRecord]>,
    policy: &TherapyPolicy,
) -> ScreeningReport {
    let mut panels = vec![ScreeningPanel {
        panel: PANEL_ALL.into(),
        distribution: BinDistribution::from_bins(subjects.iter().map(|s| s.bin)),
    }];
    let mut unmatched_subjects = 0;
    if let Some(patients) = patients {
        let by_id: BTreeMap<&str, &PatientRecord> = patients.iter().map(|p| (p.patient_id.as_str(), p)).collect();
        let mut matched = Vec::with_capacity(subjects.len());
        for s in subjects {
            match by_id.get(s.patient_id.as_str()) {
                Some(p) => matched.push((s.bin, *p)),
                None => unmatched_subjects += 1,
            }
        }
        let panel = |name: &str, keep: &dyn Fn(&PatientRecord) -> bool| ScreeningPanel {
            panel: name.into(),
            distribution: BinDistribution::from_bins(matched.iter().filter(|(_, p)| keep(p)).map(|(b, _)| *b)),
        };
        panels.push(panel(PANEL_EVER, &|p| !p.lipid_issue_dates.is_empty()));
        panels.push(panel(PANEL_NEVER, &|p| p.lipid_issue_dates.is_empty()));
        panels.push(panel(PANEL_LIVING_ON, &|p| p.is_living() && policy.is_active(p)));
        panels.push(panel(PANEL_LIVING_OFF, &|p| p.is_living() && !policy.is_active(p)));
    }
    ScreeningReport { panels, unmatched_subjects }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TherapyGapReport {
    pub n_living_gt400: u64,
    pub n_untreated: u64,
    /// `None` when there are no living >400 patients.
    pub proportion: Option<f64>,
    pub percent: Option<f64>,
    pub untreated_patient_ids: Vec<String>,
}

/// Living patients scoring >400 who are not on active lipid-lowering
/// therapy at the end of follow-up.
pub fn therapy_gap_report(
    subjects: &[ScreeningSubject],
    patients: &[PatientRecord],
    policy: &TherapyPolicy,
) -> TherapyGapReport {
    let by_id: BTreeMap<&str, &PatientRecord> = patients.iter().map(|p| (p.patient_id.as_str(), p)).collect();
    let mut living = 0u64;
    let mut untreated = Vec::new();
    for s in subjects.iter().filter(|s| s.bin == CacBin::Gt400) {
        let Some(p) = by_id.get(s.patient_id.as_str()) else { continue };
        if !p.is_living() {
            continue;
        }
        living += 1;
        if !policy.is_active(p) {
            untreated.push(s.patient_id.clone());
        }
    }
    untreated.sort();
    untreated.dedup();
    let n_untreated = untreated.len() as u64;
    TherapyGapReport {
        n_living_gt400: living,
        n_untreated,
        proportion: (living > 0).then(|| n_untreated as f64 / living as f64),
        percent: (living > 0).then(|| percent_one_decimal(n_untreated, living)),
        untreated_patient_ids: untreated,
    }
}
