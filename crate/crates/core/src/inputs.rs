//! Newline-delimited input records for cohort assembly.
//!
//! Four record files feed the cohort stages:
//!
//! | file          | fields                                                        |
//! |---------------|---------------------------------------------------------------|
//! | patients      | patient_id, center_id, sex?, birth_date?, death_date?, followup_end |
//! | diagnoses     | patient_id, code, date                                        |
//! | prescriptions | patient_id, drug_class, issue_date                            |
//! | scans         | patient_id, study_uid, date, center_id, kind                  |
//!
//! Dates are `YYYY-MM-DD`; `kind` is one of `non_gated`, `gated`, `ldct`.
//! `cac synth` (see [`crate::synth`]) writes a complete example set.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::{DiagnosisKind, IcdMap, PatientRecord, ScanRef};
use crate::volume::Sex;

/// Prescription drug classes counted as lipid-lowering therapy.
pub const LIPID_LOWERING_CLASSES: &[&str] = &["lipid_lowering", "statin", "ezetimibe", "pcsk9_inhibitor"];

#[derive(Debug, Error)]
pub enum InputError {
    #[error("{path}: {reason}")]
    Unreadable { path: PathBuf, reason: String },
    #[error("{path}:{line}: {reason}")]
    Malformed { path: PathBuf, line: usize, reason: String },
}

/// Read a newline-delimited JSON file; blank lines are skipped.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, InputError> {
    let file =
        File::open(path).map_err(|e| InputError::Unreadable { path: path.to_path_buf(), reason: e.to_string() })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| InputError::Unreadable { path: path.to_path_buf(), reason: e.to_string() })?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| InputError::Malformed {
            path: path.to_path_buf(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        out.push(record);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientInput {
    pub patient_id: String,
    pub center_id: String,
    #[serde(default)]
    pub sex: Option<Sex>,
    #[serde(default)]
    pub birth_date: Option<NaiveDate>,
    #[serde(default)]
    pub death_date: Option<NaiveDate>,
    pub followup_end: NaiveDate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosisInput {
    pub patient_id: String,
    pub code: String,
    pub date: NaiveDate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrescriptionInput {
    pub patient_id: String,
    pub drug_class: String,
    pub issue_date: NaiveDate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanKind {
    NonGated,
    Gated,
    Ldct,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanInput {
    pub patient_id: String,
    pub study_uid: String,
    pub date: NaiveDate,
    pub center_id: String,
    pub kind: ScanKind,
}

impl ScanInput {
    pub fn to_ref(&self) -> ScanRef {
        ScanRef {
            patient_id: self.patient_id.clone(),
            study_uid: self.study_uid.clone(),
            date: self.date,
            center_id: self.center_id.clone(),
        }
    }
}

pub fn is_lipid_lowering(drug_class: &str) -> bool {
    let class = drug_class.trim().to_ascii_lowercase();
    LIPID_LOWERING_CLASSES.contains(&class.as_str())
}

/// Join diagnoses and prescriptions onto patients.
///
/// Records for unknown patients are ignored, as are events dated after the
/// patient's follow-up end. Date lists come back sorted and deduplicated;
/// output is sorted by patient id.
pub fn assemble_patients(
    patients: &[PatientInput],
    diagnoses: &[DiagnosisInput],
    prescriptions: &[PrescriptionInput],
    icd: &IcdMap,
) -> Vec<PatientRecord> {
    let mut records: BTreeMap<&str, PatientRecord> = patients
        .iter()
        .map(|p| {
            let record = PatientRecord {
                patient_id: p.patient_id.clone(),
                center_id: p.center_id.clone(),
                sex: p.sex,
                birth_date: p.birth_date,
                death_date: p.death_date,
                mi_dates: vec![],
                stroke_dates: vec![],
                lipid_issue_dates: vec![],
                followup_end: p.followup_end,
            };
            (p.patient_id.as_str(), record)
        })
        .collect();

    for d in diagnoses {
        let Some(record) = records.get_mut(d.patient_id.as_str()) else { continue };
        if d.date > record.followup_end {
            continue;
        }
        match icd.classify(&d.code) {
            Some(DiagnosisKind::Mi) => record.mi_dates.push(d.date),
            Some(DiagnosisKind::Stroke) => record.stroke_dates.push(d.date),
            None => {}
        }
    }
    for rx in prescriptions {
        let Some(record) = records.get_mut(rx.patient_id.as_str()) else { continue };
        if rx.issue_date <= record.followup_end && is_lipid_lowering(&rx.drug_class) {
            record.lipid_issue_dates.push(rx.issue_date);
        }
    }
    records
        .into_values()
        .map(|mut r| {
            for dates in [&mut r.mi_dates, &mut r.stroke_dates, &mut r.lipid_issue_dates] {
                dates.sort();
                dates.dedup();
            }
            r
        })
        .collect()
}
