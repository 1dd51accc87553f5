//! Helpers shared by the integration tests.
#![allow(dead_code)]

pub mod oracle;

use cac_core::volume::{Dims, Orientation, SeriesMeta, Sex};
use cac_core::CtVolume;
use chrono::NaiveDate;

pub fn meta(study_uid: &str, series_uid: &str) -> SeriesMeta {
    SeriesMeta {
        study_uid: study_uid.into(),
        series_uid: series_uid.into(),
        description: "CHEST LUNG 3MM".into(),
        orientation: Orientation::Axial,
        contrast: false,
        slice_thickness_mm: 3.0,
        acquisition_timestamp: NaiveDate::from_ymd_opt(2018, 6, 1).unwrap().and_hms_opt(9, 30, 0).unwrap(),
        modality: "CT".into(),
        manufacturer: "GE".into(),
        kvp: Some(120.0),
        sex: Some(Sex::M),
        center_id: "c1".into(),
    }
}

pub fn volume(study_uid: &str, dims: Dims, spacing: (f64, f64), voxels: Vec<i16>) -> CtVolume {
    CtVolume::new(voxels, dims, spacing, 3.0, meta(study_uid, &format!("{study_uid}.1"))).unwrap()
}

pub fn date(s: &str) -> NaiveDate {
    s.parse().unwrap()
}

use cac_core::agatston::CacBin;
use cac_core::cohort::PatientRecord;
use cac_core::summary::ScreeningSubject;

/// Screening cohort of 8,052 subjects with bin counts 1668/1727/1566/3091
/// (20.7/21.4/19.4/38.4 %), in an interleaved order.
pub fn screening_cohort() -> Vec<ScreeningSubject> {
    let counts = [1668usize, 1727, 1566, 3091];
    let mut subjects = Vec::with_capacity(8052);
    for (bin, &count) in CacBin::ALL.iter().zip(&counts) {
        for k in 0..count {
            subjects.push(ScreeningSubject { patient_id: format!("{}-{k:05}", bin.as_str()), bin: *bin });
        }
    }
    // Deterministic interleave so the order carries no structure.
    subjects.sort_by_key(|s| (s.patient_id.len() * 7919 + s.patient_id.bytes().map(usize::from).sum::<usize>()) % 101);
    subjects
}

fn patient(id: &str, death: Option<NaiveDate>, rx: Vec<NaiveDate>) -> PatientRecord {
    PatientRecord {
        patient_id: id.into(),
        center_id: "c".into(),
        sex: None,
        birth_date: None,
        death_date: death,
        mi_dates: vec![],
        stroke_dates: vec![],
        lipid_issue_dates: rx,
        followup_end: date("2021-06-30"),
    }
}

/// 3,007 living >400 patients of whom 920 are off therapy at follow-up end
/// (600 never prescribed, 320 lapsed), plus deceased and lower-bin
/// distractors.
pub fn therapy_gap_cohort() -> (Vec<ScreeningSubject>, Vec<PatientRecord>) {
    let mut subjects = Vec::new();
    let mut patients = Vec::new();
    let mut add = |id: String, bin: CacBin, death: Option<NaiveDate>, rx: Vec<NaiveDate>| {
        subjects.push(ScreeningSubject { patient_id: id.clone(), bin });
        patients.push(patient(&id, death, rx));
    };
    for k in 0..2087 {
        // Active: last issue 0..=364 days before follow-up end.
        let last = date("2021-06-30") - chrono::Duration::days(k % 365);
        add(format!("treated-{k}"), CacBin::Gt400, None, vec![date("2014-01-01"), last]);
    }
    for k in 0..600 {
        add(format!("never-{k}"), CacBin::Gt400, None, vec![]);
    }
    for k in 0..320 {
        // Lapsed: last issue 365 days or more before follow-up end.
        let last = date("2021-06-30") - chrono::Duration::days(365 + k % 900);
        add(format!("lapsed-{k}"), CacBin::Gt400, None, vec![last]);
    }
    for k in 0..400 {
        add(format!("deceased-{k}"), CacBin::Gt400, Some(date("2019-01-01")), vec![]);
    }
    for k in 0..500 {
        add(format!("low-{k}"), CacBin::B101To400, None, vec![]);
    }
    (subjects, patients)
}
