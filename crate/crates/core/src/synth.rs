//! Deterministic synthetic datasets for demos and end-to-end tests.
//!
//! [`write_dataset`] lays out everything a full pipeline run reads:
//!
//! ```text
//! <root>/studies/<dir>/<series>/{manifest,voxels.i16le}
//! <root>/masks/<study_uid>.mask
//! <root>/reports.jsonl        gated CT reports
//! <root>/patients.jsonl, diagnoses.jsonl, prescriptions.jsonl, scans.jsonl
//! <root>/config.toml          pipeline config using the files above
//! ```
//!
//! Paired patients get a non-gated study with calcified blobs sized to land
//! in a chosen CAC bin, plus a gated report whose score is the same burden
//! with measurement noise. Screening patients get LDCT studies. One center
//! (`c3`) plays the model-training site and is excluded downstream.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use chrono::{Duration, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::inputs::{DiagnosisInput, PatientInput, PrescriptionInput, ScanInput, ScanKind};
use crate::mask::{write_mask_file, CalciumMask};
use crate::report::ReportRecord;
use crate::volume::{write_volume_dir, Dims, Orientation, SeriesMeta, Sex};
use crate::CtVolume;

pub const TRAIN_CENTER: &str = "c3";
const CENTERS: [&str; 3] = ["c1", "c2", TRAIN_CENTER];
const MANUFACTURERS: [&str; 3] = ["GE", "Toshiba", "Siemens"];

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub seed: u64,
    /// Patients with a non-gated scan and a gated report.
    pub paired_patients: usize,
    /// Patients with LDCT screening scans only.
    pub screening_patients: usize,
    /// Extra study directories whose voxel data is truncated.
    pub corrupt_studies: usize,
    /// Leave this many mask files out of `masks/`.
    pub missing_masks: usize,
    pub dims: Dims,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            paired_patients: 48,
            screening_patients: 40,
            corrupt_studies: 0,
            missing_masks: 0,
            dims: Dims::new(6, 32, 32),
        }
    }
}

/// Paths of a written dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub root: PathBuf,
    pub config: PathBuf,
    pub studies: PathBuf,
    pub masks: PathBuf,
    /// Number of study directories, corrupt ones included.
    pub study_count: usize,
    pub study_uids: Vec<String>,
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> io::Result<()> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r).map_err(io::Error::other)?);
        out.push('\n');
    }
    fs::write(path, out)
}

#[allow(clippy::too_many_arguments)]
fn meta(
    study_uid: &str,
    series: &str,
    description: &str,
    thickness: f64,
    contrast: bool,
    date: NaiveDate,
    center: &str,
    manufacturer: &str,
    kvp: f64,
    sex: Sex,
) -> SeriesMeta {
    SeriesMeta {
        study_uid: study_uid.into(),
        series_uid: format!("{study_uid}.{series}"),
        description: description.into(),
        orientation: Orientation::Axial,
        contrast,
        slice_thickness_mm: thickness,
        acquisition_timestamp: date.and_hms_opt(9, 0, 0).expect("valid time"),
        modality: "CT".into(),
        manufacturer: manufacturer.into(),
        kvp: Some(kvp),
        sex: Some(sex),
        center_id: center.into(),
    }
}

/// Place calcified blobs so the scan lands in bin `bin` (0..4); returns the
/// voxels and the blob mask.
fn phantom(rng: &mut ChaCha8Rng, dims: Dims, bin: usize) -> (Vec<i16>, Vec<bool>) {
    let mut voxels: Vec<i16> = (0..dims.len()).map(|_| rng.gen_range(-60..90)).collect();
    let mut mask = vec![false; dims.len()];
    // (blob count, side in voxels, slices, peak HU range)
    let (count, side, depth, hu) = match bin {
        0 => (0, 0, 0, 0..1),
        1 => (1, rng.gen_range(2..=4), 2, 160..300),
        2 => (1, rng.gen_range(6..=8), 2, 400..520),
        _ => (rng.gen_range(2..=3), rng.gen_range(7..=9), 3, 450..700),
    };
    for _ in 0..count {
        let z0 = rng.gen_range(0..=dims.slices - depth);
        let y0 = rng.gen_range(0..=dims.rows - side);
        let x0 = rng.gen_range(0..=dims.cols - side);
        let peak: i16 = rng.gen_range(hu.clone());
        for z in z0..z0 + depth {
            for y in y0..y0 + side {
                for x in x0..x0 + side {
                    let i = dims.index(z, y, x);
                    voxels[i] = peak - rng.gen_range(0..20);
                    mask[i] = true;
                }
            }
        }
    }
    (voxels, mask)
}

struct StudyWriter<'a> {
    studies: &'a Path,
    masks: &'a Path,
    dims: Dims,
}

impl StudyWriter<'_> {
    /// Write a study with its scored series and two ineligible distractors.
    fn write(&self, rng: &mut ChaCha8Rng, main: SeriesMeta, bin: usize, with_mask: bool) -> io::Result<()> {
        let dir = self.studies.join(format!("study-{}", main.study_uid));
        let (voxels, dense) = phantom(rng, self.dims, bin);
        let volume = CtVolume::new(voxels, self.dims, (0.8, 0.8), main.slice_thickness_mm, main.clone())
            .map_err(io::Error::other)?;
        write_volume_dir(&volume, &dir.join("series-a"))?;
        for (name, description, thickness, contrast) in
            [("b", "LUNG 1MM THIN", 1.0, false), ("c", "CHEST WITH CONTRAST", 3.0, true)]
        {
            let mut m = main.clone();
            m.series_uid = format!("{}.{name}", main.study_uid);
            m.description = description.into();
            m.slice_thickness_mm = thickness;
            m.contrast = contrast;
            let v = CtVolume::new(vec![0; self.dims.len()], self.dims, (0.8, 0.8), thickness, m)
                .map_err(io::Error::other)?;
            write_volume_dir(&v, &dir.join(format!("series-{name}")))?;
        }
        if with_mask {
            let mask = CalciumMask::from_dense(&main.study_uid, &main.series_uid, self.dims, &dense)
                .map_err(io::Error::other)?;
            write_mask_file(&mask, &self.masks.join(format!("{}.mask", main.study_uid))).map_err(io::Error::other)?;
        }
        Ok(())
    }
}

fn report_text(rng: &mut ChaCha8Rng, score: u64) -> String {
    let phrasing = match rng.gen_range(0..4) {
        0 => format!("Total Agatston score: {score}."),
        1 => format!("The total coronary artery calcium score is {score}."),
        2 => format!("CAC score = {score}"),
        _ => format!("Agatston calcium score of {score}."),
    };
    format!("CT CARDIAC CALCIUM SCORING\nTECHNIQUE: ECG-gated non-contrast acquisition.\n{phrasing}\nIMPRESSION: See above.")
}

/// Nominal burden per bin used for the gated reports.
fn reference_score(rng: &mut ChaCha8Rng, bin: usize) -> u64 {
    match bin {
        0 => {
            if rng.gen_bool(0.85) {
                0
            } else {
                rng.gen_range(1..15)
            }
        }
        1 => rng.gen_range(5..110),
        2 => rng.gen_range(90..420),
        _ => rng.gen_range(380..2500),
    }
}

pub fn write_dataset(root: &Path, spec: &SynthSpec) -> io::Result<SynthDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let studies = root.join("studies");
    let masks = root.join("masks");
    fs::create_dir_all(&studies)?;
    fs::create_dir_all(&masks)?;
    let writer = StudyWriter { studies: &studies, masks: &masks, dims: spec.dims };
    let base = NaiveDate::from_ymd_opt(2014, 1, 6).expect("valid date");
    let followup_end = NaiveDate::from_ymd_opt(2023, 6, 30).expect("valid date");

    let mut patients = Vec::new();
    let mut diagnoses = Vec::new();
    let mut prescriptions = Vec::new();
    let mut scans = Vec::new();
    let mut reports = Vec::new();
    let mut study_uids = Vec::new();
    let mut masks_left_out = 0;

    let add_patient = |rng: &mut ChaCha8Rng,
                       id: &str,
                       center: &str,
                       sex: Sex,
                       index: NaiveDate,
                       bin: usize,
                       patients: &mut Vec<PatientInput>,
                       diagnoses: &mut Vec<DiagnosisInput>,
                       prescriptions: &mut Vec<PrescriptionInput>| {
        let risk = [0.08, 0.18, 0.3, 0.5][bin];
        let death =
            rng.gen_bool(risk).then(|| index + Duration::days(rng.gen_range(30..3000))).filter(|d| *d < followup_end);
        if rng.gen_bool(risk / 2.0) {
            diagnoses.push(DiagnosisInput {
                patient_id: id.into(),
                code: "I21.4".into(),
                date: index + Duration::days(rng.gen_range(10..2500)),
            });
        }
        if rng.gen_bool(0.05) {
            // History before the index scan: excluded from the composite outcome.
            diagnoses.push(DiagnosisInput {
                patient_id: id.into(),
                code: "I63.9".into(),
                date: index - Duration::days(rng.gen_range(30..900)),
            });
        }
        if rng.gen_bool(0.3 + 0.15 * bin as f64) {
            let first = index + Duration::days(rng.gen_range(-400..800));
            for k in 0..rng.gen_range(1..6) {
                prescriptions.push(PrescriptionInput {
                    patient_id: id.into(),
                    drug_class: "statin".into(),
                    issue_date: first + Duration::days(300 * k),
                });
            }
        }
        patients.push(PatientInput {
            patient_id: id.into(),
            center_id: center.into(),
            sex: Some(sex),
            birth_date: Some(
                NaiveDate::from_ymd_opt(rng.gen_range(1935..1975), 1 + rng.gen_range(0..12), 1).expect("valid date"),
            ),
            death_date: death,
            followup_end,
        });
    };

    for i in 0..spec.paired_patients {
        let id = format!("P{i:04}");
        let center = CENTERS[i % 3];
        let bin = (i / 3) % 4;
        let sex = if rng.gen_bool(0.85) { Sex::M } else { Sex::F };
        let date = base + Duration::days(rng.gen_range(0..1800));
        let uid = format!("1.2.826.0.1.{}.{i}", spec.seed);
        let manufacturer = MANUFACTURERS[rng.gen_range(0..3)];
        let kvp = if rng.gen_bool(0.8) { 120.0 } else { 100.0 };
        let leave_out_mask = masks_left_out < spec.missing_masks && i % 5 == 4;
        if leave_out_mask {
            masks_left_out += 1;
        }
        writer.write(
            &mut rng,
            meta(&uid, "a", "CHEST LUNG 3MM", 3.0, false, date, center, manufacturer, kvp, sex),
            bin,
            !leave_out_mask,
        )?;
        study_uids.push(uid.clone());
        scans.push(ScanInput {
            patient_id: id.clone(),
            study_uid: uid,
            date,
            center_id: center.into(),
            kind: ScanKind::NonGated,
        });

        let gated_uid = format!("1.2.826.0.2.{}.{i}", spec.seed);
        let gated_date = date + Duration::days(rng.gen_range(-300..300));
        scans.push(ScanInput {
            patient_id: id.clone(),
            study_uid: gated_uid.clone(),
            date: gated_date,
            center_id: center.into(),
            kind: ScanKind::Gated,
        });
        let text = if i % 17 == 16 {
            "CT CALCIUM SCORING\nStatus post LAD stent placement; calcium scoring was not performed.".to_owned()
        } else {
            let score = reference_score(&mut rng, bin);
            report_text(&mut rng, score)
        };
        reports.push(ReportRecord {
            report_id: format!("R{i:04}"),
            patient_id: id.clone(),
            study_uid: gated_uid,
            report_text: text,
            report_date: gated_date,
        });
        add_patient(&mut rng, &id, center, sex, date, bin, &mut patients, &mut diagnoses, &mut prescriptions);
    }

    for j in 0..spec.screening_patients {
        let id = format!("S{j:04}");
        let center = CENTERS[j % 3];
        let bin = rng.gen_range(0..4);
        let sex = if rng.gen_bool(0.9) { Sex::M } else { Sex::F };
        let date = base + Duration::days(rng.gen_range(0..2200));
        let n_scans = if j % 7 == 0 { 2 } else { 1 };
        for k in 0..n_scans {
            let uid = format!("1.2.826.0.3.{}.{j}.{k}", spec.seed);
            let scan_date = date + Duration::days(400 * k as i64);
            let m = meta(&uid, "a", "LOW DOSE LUNG SCREENING 3MM", 3.0, false, scan_date, center, "GE", 120.0, sex);
            writer.write(&mut rng, m, bin, true)?;
            study_uids.push(uid.clone());
            scans.push(ScanInput {
                patient_id: id.clone(),
                study_uid: uid,
                date: scan_date,
                center_id: center.into(),
                kind: ScanKind::Ldct,
            });
        }
        add_patient(&mut rng, &id, center, sex, date, bin, &mut patients, &mut diagnoses, &mut prescriptions);
    }

    for c in 0..spec.corrupt_studies {
        let uid = format!("1.2.826.0.9.{}.{c}", spec.seed);
        let m = meta(&uid, "a", "CHEST LUNG 3MM", 3.0, false, base, "c1", "GE", 120.0, Sex::M);
        writer.write(&mut rng, m, 1, true)?;
        let voxels = studies.join(format!("study-{uid}")).join("series-a").join(crate::volume::VOXELS_FILE);
        let bytes = fs::read(&voxels)?;
        fs::write(&voxels, &bytes[..bytes.len() / 2])?;
    }

    write_jsonl(&root.join("reports.jsonl"), &reports)?;
    write_jsonl(&root.join("patients.jsonl"), &patients)?;
    write_jsonl(&root.join("diagnoses.jsonl"), &diagnoses)?;
    write_jsonl(&root.join("prescriptions.jsonl"), &prescriptions)?;
    write_jsonl(&root.join("scans.jsonl"), &scans)?;

    let mut config = String::new();
    let _ = writeln!(config, "seed = {}\n", spec.seed);
    let _ = writeln!(config, "[inputs]");
    for (key, file) in [
        ("studies", "studies"),
        ("reports", "reports.jsonl"),
        ("patients", "patients.jsonl"),
        ("diagnoses", "diagnoses.jsonl"),
        ("prescriptions", "prescriptions.jsonl"),
        ("scans", "scans.jsonl"),
    ] {
        let _ = writeln!(config, "{key} = \"{file}\"");
    }
    let _ = writeln!(config, "\n[segment]\nmasks_dir = \"masks\"\n");
    let _ = writeln!(config, "[cohort]\ntrain_centers = [\"{TRAIN_CENTER}\"]\n");
    let _ = writeln!(config, "[evaluate]\nbootstrap_iterations = 200");
    let config_path = root.join("config.toml");
    fs::write(&config_path, config)?;

    Ok(SynthDataset {
        root: root.to_path_buf(),
        config: config_path,
        study_count: study_uids.len() + spec.corrupt_studies,
        study_uids,
        studies,
        masks,
    })
}
