//! Analysis cohort construction: gated/non-gated pairing, center-stratified
//! splits, screening dedup, and survival-ready rows.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use chrono::NaiveDate;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agatston::{CacBin, ScanScore};
use crate::volume::Sex;

pub const DEFAULT_WINDOW_DAYS: i64 = 365;

#[derive(Debug, Error)]
pub enum CohortError {
    #[error("patient {patient_id}: {what} on {date} precedes index date {index}")]
    NegativeDuration { patient_id: String, what: &'static str, date: NaiveDate, index: NaiveDate },
    #[error("patient {patient_id} appears in both {first} and {second}")]
    SharedPatients { patient_id: String, first: String, second: String },
    #[error("invalid ratio {0}")]
    InvalidRatio(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub patient_id: String,
    pub center_id: String,
    pub sex: Option<Sex>,
    pub birth_date: Option<NaiveDate>,
    pub death_date: Option<NaiveDate>,
    #[serde(default)]
    pub mi_dates: Vec<NaiveDate>,
    #[serde(default)]
    pub stroke_dates: Vec<NaiveDate>,
    #[serde(default)]
    pub lipid_issue_dates: Vec<NaiveDate>,
    pub followup_end: NaiveDate,
}

impl PatientRecord {
    pub fn is_living(&self) -> bool {
        self.death_date.is_none()
    }

    /// Earliest MI, stroke or death on or after `index`.
    pub fn first_composite_event(&self, index: NaiveDate) -> Option<NaiveDate> {
        self.mi_dates
            .iter()
            .chain(&self.stroke_dates)
            .chain(self.death_date.iter())
            .copied()
            .filter(|d| *d >= index)
            .min()
    }

    fn has_pre_index_mi_or_stroke(&self, index: NaiveDate) -> bool {
        self.mi_dates.iter().chain(&self.stroke_dates).any(|d| *d < index)
    }
}

/// An imaging study with the patient/center linkage needed for cohorts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScanRef {
    pub patient_id: String,
    pub study_uid: String,
    pub date: NaiveDate,
    pub center_id: String,
}

/// A gated scan with its report-extracted reference score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatedScan {
    pub scan: ScanRef,
    pub reference_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedStudy {
    pub patient_id: String,
    pub center_id: String,
    pub nongated_study_uid: String,
    pub gated_study_uid: String,
    pub nongated_date: NaiveDate,
    pub gated_date: NaiveDate,
    pub gap_days: i64,
    pub reference_score: f64,
    pub ai_score: Option<ScanScore>,
}

/// Keep, per patient, the temporally nearest non-gated/gated pair within
/// `window_days` (inclusive). Ties go to the earlier gated date, then the
/// smaller gated and non-gated study uids.
pub fn build_pairs(nongated: &[ScanRef], gated: &[GatedScan], window_days: i64) -> Vec<PairedStudy> {
    let mut gated_by_patient: HashMap<&str, Vec<&GatedScan>> = HashMap::new();
    for g in gated {
        gated_by_patient.entry(g.scan.patient_id.as_str()).or_default().push(g);
    }

    let mut best: BTreeMap<&str, PairedStudy> = BTreeMap::new();
    for ng in nongated {
        let Some(candidates) = gated_by_patient.get(ng.patient_id.as_str()) else {
            continue;
        };
        for g in candidates {
            let gap = (ng.date - g.scan.date).num_days().abs();
            if gap > window_days {
                continue;
            }
            let pair = PairedStudy {
                patient_id: ng.patient_id.clone(),
                center_id: ng.center_id.clone(),
                nongated_study_uid: ng.study_uid.clone(),
                gated_study_uid: g.scan.study_uid.clone(),
                nongated_date: ng.date,
                gated_date: g.scan.date,
                gap_days: gap,
                reference_score: g.reference_score,
                ai_score: None,
            };
            let key =
                |p: &PairedStudy| (p.gap_days, p.gated_date, p.gated_study_uid.clone(), p.nongated_study_uid.clone());
            match best.get(ng.patient_id.as_str()) {
                Some(current) if key(current) <= key(&pair) => {}
                _ => {
                    best.insert(ng.patient_id.as_str(), pair);
                }
            }
        }
    }
    best.into_values().collect()
}

/// Split pairs into (tune, test) by patient, stratified by center.
///
/// Centers are processed in sorted order; each center's patients are
/// shuffled with the seeded RNG and the tune side receives
/// `round(ratio × cumulative) − tune_so_far` of them. With `ratio = 0.5`
/// every center differs by at most one patient between sides, and so do
/// the totals.
pub fn split_by_center(
    pairs: &[PairedStudy],
    ratio: f64,
    seed: u64,
) -> Result<(Vec<PairedStudy>, Vec<PairedStudy>), CohortError> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(CohortError::InvalidRatio(ratio));
    }
    let mut by_center: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for p in pairs {
        by_center.entry(p.center_id.as_str()).or_default().insert(p.patient_id.as_str());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tune_ids: BTreeSet<&str> = BTreeSet::new();
    let mut seen = 0usize;
    let mut tune_total = 0usize;
    for patients in by_center.values() {
        let mut ids: Vec<&str> = patients.iter().copied().collect();
        ids.shuffle(&mut rng);
        seen += ids.len();
        let target = (ratio * seen as f64 + 0.5).floor() as usize;
        let take = target.saturating_sub(tune_total).min(ids.len());
        tune_total += take;
        tune_ids.extend(&ids[..take]);
    }

    let (tune, test) = pairs.iter().cloned().partition(|p| tune_ids.contains(p.patient_id.as_str()));
    Ok((tune, test))
}

/// One scan per patient: the oldest, ties on smaller study uid.
pub fn dedup_oldest(scans: &[ScanRef]) -> Vec<ScanRef> {
    let mut oldest: BTreeMap<&str, &ScanRef> = BTreeMap::new();
    for s in scans {
        oldest
            .entry(s.patient_id.as_str())
            .and_modify(|kept| {
                if (s.date, &s.study_uid) < (kept.date, &kept.study_uid) {
                    *kept = s;
                }
            })
            .or_insert(s);
    }
    oldest.into_values().cloned().collect()
}

pub fn exclude_training_centers(scans: &[ScanRef], train_centers: &BTreeSet<String>) -> Vec<ScanRef> {
    scans.iter().filter(|s| !train_centers.contains(&s.center_id)).cloned().collect()
}

/// Fail if any patient belongs to more than one named dataset.
pub fn assert_disjoint(datasets: &[(&str, Vec<String>)]) -> Result<(), CohortError> {
    let mut owner: HashMap<&str, &str> = HashMap::new();
    for (name, patients) in datasets {
        for p in patients {
            if let Some(first) = owner.insert(p.as_str(), name) {
                if first != *name {
                    return Err(CohortError::SharedPatients {
                        patient_id: p.clone(),
                        first: first.to_owned(),
                        second: (*name).to_owned(),
                    });
                }
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeKind {
    AllCauseDeath,
    CompositeMiCvaDeath,
}

/// How survival groups are labelled beyond the CAC bin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrataSpec {
    None,
    /// Any lipid-lowering prescription issued at any time.
    LipidEver,
    /// A prescription issued strictly before the first composite event
    /// (or by follow-up end when there is no event).
    LipidBeforeEvent,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SurvivalRow {
    pub patient_id: String,
    pub group_label: String,
    pub duration_days: i64,
    pub event: bool,
    pub outcome_kind: OutcomeKind,
}

/// Patients dropped while building survival rows, with the reason.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SurvivalExclusion {
    pub patient_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SurvivalTable {
    pub rows: Vec<SurvivalRow>,
    pub excluded: Vec<SurvivalExclusion>,
}

fn lipid_label(on: bool) -> &'static str {
    if on {
        "lipid"
    } else {
        "no_lipid"
    }
}

/// Build survival rows from index dates and per-patient CAC bins.
///
/// Patients lacking an index date or a bin are skipped silently; composite
/// outcome rows drop patients with MI or stroke strictly before the index.
pub fn make_survival_rows(
    patients: &[PatientRecord],
    index_dates: &HashMap<String, NaiveDate>,
    bins: &HashMap<String, CacBin>,
    outcome: OutcomeKind,
    strata: StrataSpec,
) -> Result<SurvivalTable, CohortError> {
    let mut table = SurvivalTable::default();
    for p in patients {
        let (Some(&index), Some(&bin)) = (index_dates.get(&p.patient_id), bins.get(&p.patient_id)) else {
            continue;
        };
        if p.followup_end < index {
            return Err(CohortError::NegativeDuration {
                patient_id: p.patient_id.clone(),
                what: "follow-up end",
                date: p.followup_end,
                index,
            });
        }

        let event_date = match outcome {
            OutcomeKind::AllCauseDeath => {
                if let Some(death) = p.death_date.filter(|d| *d < index) {
                    return Err(CohortError::NegativeDuration {
                        patient_id: p.patient_id.clone(),
                        what: "death",
                        date: death,
                        index,
                    });
                }
                p.death_date
            }
            OutcomeKind::CompositeMiCvaDeath => {
                if p.has_pre_index_mi_or_stroke(index) {
                    table.excluded.push(SurvivalExclusion {
                        patient_id: p.patient_id.clone(),
                        reason: "mi_or_stroke_before_index".into(),
                    });
                    continue;
                }
                if let Some(death) = p.death_date.filter(|d| *d < index) {
                    return Err(CohortError::NegativeDuration {
                        patient_id: p.patient_id.clone(),
                        what: "death",
                        date: death,
                        index,
                    });
                }
                p.first_composite_event(index)
            }
        };

        let end = event_date.unwrap_or(p.followup_end);
        let group_label = match strata {
            StrataSpec::None => bin.as_str().to_owned(),
            StrataSpec::LipidEver => format!("{}|{}", bin.as_str(), lipid_label(!p.lipid_issue_dates.is_empty())),
            StrataSpec::LipidBeforeEvent => {
                let cutoff = p.first_composite_event(index);
                let on = p.lipid_issue_dates.iter().any(|d| match cutoff {
                    Some(event) => *d < event,
                    None => *d <= p.followup_end,
                });
                format!("{}|{}", bin.as_str(), lipid_label(on))
            }
        };
        table.rows.push(SurvivalRow {
            patient_id: p.patient_id.clone(),
            group_label,
            duration_days: (end - index).num_days(),
            event: event_date.is_some(),
            outcome_kind: outcome,
        });
    }
    Ok(table)
}

/// For gated-report survival: the oldest report per patient supplies the score.
pub fn oldest_report_scores(reports: &[GatedScan]) -> BTreeMap<String, GatedScan> {
    let mut oldest: BTreeMap<String, GatedScan> = BTreeMap::new();
    for r in reports {
        match oldest.get(&r.scan.patient_id) {
            Some(kept) if (kept.scan.date, &kept.scan.study_uid) <= (r.scan.date, &r.scan.study_uid) => {}
            _ => {
                oldest.insert(r.scan.patient_id.clone(), r.clone());
            }
        }
    }
    oldest
}

/// ICD code prefixes for the outcome diagnoses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IcdMap {
    pub mi: Vec<String>,
    pub stroke: Vec<String>,
}

impl Default for IcdMap {
    fn default() -> Self {
        toml::from_str(include_str!("../rules/icd_map.toml")).expect("bundled ICD map parses")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiagnosisKind {
    Mi,
    Stroke,
}

impl IcdMap {
    pub fn classify(&self, code: &str) -> Option<DiagnosisKind> {
        let code = code.trim().to_uppercase().replace('.', "");
        let hit = |prefixes: &[String]| prefixes.iter().any(|p| code.starts_with(&p.to_uppercase().replace('.', "")));
        if hit(&self.mi) {
            Some(DiagnosisKind::Mi)
        } else if hit(&self.stroke) {
            Some(DiagnosisKind::Stroke)
        } else {
            None
        }
    }
}
