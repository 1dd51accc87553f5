//! Pipeline stages over a [`ScoreStore`].
//!
//! ingest → segment → score → extract-reports → pair → split → evaluate →
//! survival-rows → survival, plus the screening summaries. Each stage
//! computes a fingerprint from its configuration, its input files and the
//! fingerprints of the stages it reads from. A stage whose fingerprint is
//! already recorded in the manifest is skipped; per-study stages also skip
//! individual studies already recorded under the current fingerprint, so
//! an interrupted run resumes where it stopped.
//!
//! Per-study failures become exclusions with a reason; only failures that
//! invalidate the whole stage abort it.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agatston::{bin_score, score_scan, CacBin, ScanScore, ScoringConfig};
use crate::cohort::{
    assert_disjoint, build_pairs, dedup_oldest, exclude_training_centers, make_survival_rows, split_by_center,
    GatedScan, OutcomeKind, PairedStudy, PatientRecord, StrataSpec, SurvivalExclusion, SurvivalRow,
    DEFAULT_WINDOW_DAYS,
};
use crate::inputs::{
    assemble_patients, read_jsonl, DiagnosisInput, PatientInput, PrescriptionInput, ScanInput, ScanKind,
};
use crate::mask::{
    baseline_segment, load_mask_file, run_external_model, write_mask_file, CalciumMask, ExternalRunnerConfig, RoiBox,
    CALCIUM_HU,
};
use crate::report::{extract_agatston, ExtractionResult, ExtractionStatus, ReportRecord, RulePack};
use crate::review::ReviewCandidate;
use crate::stats::classification::SubgroupPair;
use crate::stats::{
    bland_altman, bootstrap_ci, confusion_matrix, correlations, cox_two_group, icc_agreement, km_estimate,
    subgroup_evaluate, threshold_metrics, weighted_kappa, BootstrapOptions, SubgroupKey, SurvivalObs, ThresholdMetrics,
};
use crate::store::{fingerprint, Exclusion, RecordKind, ScoreStore, StoreError};
use crate::summary::{screening_report, therapy_gap_report, ScreeningSubject, TherapyPolicy};
use crate::volume::{
    parse_study_manifest, read_series_manifest, read_volume_dir, select_series, write_volume_dir, SelectionPolicy,
    SeriesMeta,
};

pub const STAGE_INGEST: &str = "ingest";
pub const STAGE_SEGMENT: &str = "segment";
pub const STAGE_SCORE: &str = "score";
pub const STAGE_EXTRACT: &str = "extract-reports";
pub const STAGE_PAIR: &str = "pair";
pub const STAGE_SPLIT: &str = "split";
pub const STAGE_EVALUATE: &str = "evaluate";
pub const STAGE_SURVIVAL_ROWS: &str = "survival-rows";
pub const STAGE_SURVIVAL: &str = "survival";
pub const STAGE_SCREENING: &str = "screening-report";

/// Studies processed per parallel batch before results are appended.
const BATCH: usize = 256;

#[derive(Debug, Error)]
#[error("stage {stage}{}: {message}", study_uid.as_ref().map(|s| format!(" (study {s})")).unwrap_or_default())]
pub struct PipelineError {
    pub stage: String,
    pub study_uid: Option<String>,
    pub message: String,
}

impl PipelineError {
    pub fn new(stage: &str, message: impl Into<String>) -> Self {
        Self { stage: stage.to_owned(), study_uid: None, message: message.into() }
    }

    pub fn for_study(stage: &str, study_uid: &str, message: impl Into<String>) -> Self {
        Self { stage: stage.to_owned(), study_uid: Some(study_uid.to_owned()), message: message.into() }
    }
}

fn store_err(stage: &'static str) -> impl Fn(StoreError) -> PipelineError {
    move |e| PipelineError::new(stage, e.to_string())
}

// ---------------------------------------------------------------- config

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputPaths {
    /// Directory of study directories, each holding series directories.
    pub studies: Option<PathBuf>,
    /// Gated CT report records.
    pub reports: Option<PathBuf>,
    /// Report rule pack; the bundled pack when absent.
    pub rules: Option<PathBuf>,
    pub patients: Option<PathBuf>,
    pub diagnoses: Option<PathBuf>,
    pub prescriptions: Option<PathBuf>,
    pub scans: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentMode {
    /// HU-threshold segmentation inside an ROI; for testing only.
    Baseline,
    /// Precomputed mask files named `<study_uid>.mask`.
    Masks,
    /// An external model process.
    Runner,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentConfig {
    /// Inferred from `masks_dir` / `runner` when absent.
    pub mode: Option<SegmentMode>,
    pub masks_dir: Option<PathBuf>,
    /// Command line of the external model; with `masks` mode it fills in
    /// studies whose mask file is missing.
    pub runner: Option<String>,
    /// Baseline ROI as `z0,y0,x0,z1,y1,x1`; the whole volume when absent.
    pub roi: Option<String>,
    pub threshold_hu: i32,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        Self { mode: None, masks_dir: None, runner: None, roi: None, threshold_hu: CALCIUM_HU }
    }
}

impl SegmentConfig {
    pub fn effective_mode(&self) -> Option<SegmentMode> {
        self.mode.or(if self.masks_dir.is_some() {
            Some(SegmentMode::Masks)
        } else if self.runner.is_some() {
            Some(SegmentMode::Runner)
        } else {
            None
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortConfig {
    pub window_days: i64,
    pub split_ratio: f64,
    pub train_centers: Vec<String>,
}

impl Default for CohortConfig {
    fn default() -> Self {
        Self { window_days: DEFAULT_WINDOW_DAYS, split_ratio: 0.5, train_centers: vec![] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    pub thresholds: Vec<u64>,
    pub subgroups: Vec<SubgroupKey>,
    pub bootstrap_iterations: usize,
    pub ci_level: f64,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self {
            thresholds: vec![1, 100, 400],
            subgroups: vec![SubgroupKey::Manufacturer, SubgroupKey::Sex, SubgroupKey::Kvp],
            bootstrap_iterations: 1000,
            ci_level: 0.95,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grid {
    Yearly,
    Monthly,
}

impl Grid {
    pub fn step_days(self) -> f64 {
        match self {
            Grid::Yearly => 365.25,
            Grid::Monthly => 365.25 / 12.0,
        }
    }

    /// Grid points from 0 through the first point at or past `max_days`.
    pub fn points(self, max_days: f64) -> Vec<f64> {
        let step = self.step_days();
        let n = (max_days / step).ceil().max(0.0) as usize;
        (0..=n).map(|i| i as f64 * step).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurvivalConfig {
    pub outcome: OutcomeKind,
    pub strata: StrataSpec,
    pub grid: Grid,
}

impl Default for SurvivalConfig {
    fn default() -> Self {
        Self { outcome: OutcomeKind::AllCauseDeath, strata: StrataSpec::None, grid: Grid::Yearly }
    }
}

/// Everything a full run needs; loaded from TOML.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: Option<u64>,
    pub inputs: InputPaths,
    pub selection: SelectionPolicy,
    pub scoring: ScoringConfig,
    pub segment: SegmentConfig,
    pub cohort: CohortConfig,
    pub evaluate: EvaluateConfig,
    pub survival: SurvivalConfig,
    pub therapy: TherapyPolicy,
}

impl PipelineConfig {
    /// Parse a TOML config; relative paths resolve against `base_dir`.
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self, toml::de::Error> {
        let mut cfg: Self = toml::from_str(text)?;
        let resolve = |p: &mut Option<PathBuf>| {
            if let Some(path) = p.as_mut() {
                if path.is_relative() {
                    *path = base_dir.join(&*path);
                }
            }
        };
        let i = &mut cfg.inputs;
        for p in [
            &mut i.studies,
            &mut i.reports,
            &mut i.rules,
            &mut i.patients,
            &mut i.diagnoses,
            &mut i.prescriptions,
            &mut i.scans,
        ] {
            resolve(p);
        }
        resolve(&mut cfg.segment.masks_dir);
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text =
            fs::read_to_string(path).map_err(|e| PipelineError::new("config", format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base).map_err(|e| PipelineError::new("config", format!("{}: {e}", path.display())))
    }
}

// ---------------------------------------------------------------- records

/// Output of ingest: the selected series of one study directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestedSeries {
    /// Study directory name under the input root.
    pub source: String,
    pub series: SeriesMeta,
}

/// Output of segment: a mask written to the store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskRecord {
    pub study_uid: String,
    pub series_uid: String,
    pub voxel_count: usize,
    pub positive_slices: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionRecord {
    pub report_id: String,
    pub patient_id: String,
    pub study_uid: String,
    pub report_date: NaiveDate,
    pub result: ExtractionResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: String,
    pub fingerprint: String,
    /// The stage had already run with this fingerprint.
    pub skipped: bool,
    pub produced: usize,
    pub excluded: usize,
}

// ---------------------------------------------------------------- helpers

/// Digest of a file or directory tree (names and contents, sorted).
pub fn hash_path(path: &Path) -> Result<String, std::io::Error> {
    fn walk(path: &Path, rel: &str, parts: &mut Vec<Vec<u8>>) -> Result<(), std::io::Error> {
        if path.is_dir() {
            let mut entries: Vec<_> = fs::read_dir(path)?.collect::<Result<_, _>>()?;
            entries.sort_by_key(|e| e.file_name());
            for e in entries {
                let name = e.file_name().to_string_lossy().into_owned();
                walk(&e.path(), &format!("{rel}/{name}"), parts)?;
            }
        } else {
            parts.push(rel.as_bytes().to_vec());
            parts.push(fs::read(path)?);
        }
        Ok(())
    }
    let mut parts = Vec::new();
    walk(path, "", &mut parts)?;
    let refs: Vec<&[u8]> = parts.iter().map(Vec::as_slice).collect();
    Ok(fingerprint(&refs))
}

fn hash_input(stage: &'static str, path: &Path) -> Result<String, PipelineError> {
    hash_path(path).map_err(|e| PipelineError::new(stage, format!("{}: {e}", path.display())))
}

fn json<T: Serialize>(value: &T) -> Vec<u8> {
    serde_json::to_vec(value).expect("config serializes")
}

fn upstream(store: &ScoreStore, stage: &'static str, needed: &str) -> Result<String, PipelineError> {
    store
        .stage_fingerprint(needed)
        .ok_or_else(|| PipelineError::new(stage, format!("stage {needed} has not been run on this store")))
}

fn skipped(stage: &str, fp: &str, produced: usize, excluded: usize) -> StageReport {
    StageReport { stage: stage.into(), fingerprint: fp.into(), skipped: true, produced, excluded }
}

fn fmt_opt_pct(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_owned(), |x| format!("{:.1}", 100.0 * x))
}

fn fmt_f(v: f64) -> String {
    format!("{v:.6}")
}

// ---------------------------------------------------------------- ingest

fn ingest_one(store: &ScoreStore, study_dir: &Path, policy: &SelectionPolicy) -> Result<SeriesMeta, String> {
    let candidates = parse_study_manifest(study_dir).map_err(|e| e.to_string())?;
    let selected = select_series(&candidates, policy).map_err(|e| e.to_string())?;
    let mut series_dirs: Vec<PathBuf> = fs::read_dir(study_dir)
        .map_err(|e| e.to_string())?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    series_dirs.sort();
    let dir = series_dirs
        .into_iter()
        .find(|d| matches!(read_series_manifest(d), Ok((m, _)) if m.series_uid == selected.series_uid))
        .ok_or_else(|| format!("series {} has no pixel data directory", selected.series_uid))?;
    let volume = read_volume_dir(&dir).map_err(|e| e.to_string())?;
    write_volume_dir(&volume, &store.volume_dir(&volume.meta.study_uid)).map_err(|e| e.to_string())?;
    Ok(volume.meta)
}

/// Select one series per study, load it and copy it into the store.
pub fn ingest(store: &ScoreStore, studies_dir: &Path, policy: &SelectionPolicy) -> Result<StageReport, PipelineError> {
    const S: &str = STAGE_INGEST;
    let fp = fingerprint(&[S.as_bytes(), hash_input(S, studies_dir)?.as_bytes(), &json(policy)]);
    let done: Vec<IngestedSeries> = store.read(RecordKind::Series, &fp).map_err(store_err(S))?;
    let excluded = store.stage_exclusions(S, &fp).map_err(store_err(S))?;
    if store.stage_fingerprint(S).as_deref() == Some(fp.as_str()) {
        return Ok(skipped(S, &fp, done.len(), excluded.len()));
    }

    let mut seen_sources: HashSet<String> = done.iter().map(|d| d.source.clone()).collect();
    seen_sources.extend(excluded.iter().map(|e| e.study_uid.clone()));
    let mut seen_uids: HashSet<String> = done.iter().map(|d| d.series.study_uid.clone()).collect();

    let mut study_dirs: Vec<(String, PathBuf)> = fs::read_dir(studies_dir)
        .map_err(|e| PipelineError::new(S, format!("{}: {e}", studies_dir.display())))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| (e.file_name().to_string_lossy().into_owned(), e.path()))
        .filter(|(name, _)| !seen_sources.contains(name))
        .collect();
    study_dirs.sort();

    let (mut produced, mut n_excluded) = (done.len(), excluded.len());
    for batch in study_dirs.chunks(BATCH) {
        let results: Vec<(String, Result<SeriesMeta, String>)> =
            batch.par_iter().map(|(name, dir)| (name.clone(), ingest_one(store, dir, policy))).collect();
        let mut records = Vec::new();
        let mut exclusions = Vec::new();
        for (source, result) in results {
            match result {
                Ok(series) if !seen_uids.insert(series.study_uid.clone()) => exclusions.push(Exclusion {
                    stage: S.into(),
                    study_uid: source,
                    reason: format!("duplicate study uid {}", series.study_uid),
                }),
                Ok(series) => records.push(IngestedSeries { source, series }),
                Err(reason) => exclusions.push(Exclusion { stage: S.into(), study_uid: source, reason }),
            }
        }
        store.append(RecordKind::Series, &fp, &records).map_err(store_err(S))?;
        store.log_exclusions(&fp, &exclusions).map_err(store_err(S))?;
        produced += records.len();
        n_excluded += exclusions.len();
    }
    store.set_stage_fingerprint(S, &fp).map_err(store_err(S))?;
    Ok(StageReport { stage: S.into(), fingerprint: fp, skipped: false, produced, excluded: n_excluded })
}

// ---------------------------------------------------------------- segment

enum SegmentOutcome {
    Mask(MaskRecord),
    Excluded(String),
}

fn segment_one(
    store: &ScoreStore,
    series: &SeriesMeta,
    cfg: &SegmentConfig,
    mode: SegmentMode,
) -> Result<SegmentOutcome, PipelineError> {
    let study = series.study_uid.as_str();
    let volume = match store.load_volume(study) {
        Ok(v) => v,
        Err(e) => return Ok(SegmentOutcome::Excluded(format!("stored volume unreadable: {e}"))),
    };
    let runner = cfg.runner.as_deref().and_then(ExternalRunnerConfig::from_command_line);
    let result = match mode {
        SegmentMode::Baseline => {
            let roi = match cfg.roi.as_deref() {
                Some(text) => RoiBox::parse(text)
                    .ok_or_else(|| PipelineError::new(STAGE_SEGMENT, format!("malformed ROI {text:?}")))?,
                None => RoiBox::whole(volume.dims),
            };
            baseline_segment(&volume, roi, cfg.threshold_hu)
        }
        SegmentMode::Masks => {
            let dir = cfg
                .masks_dir
                .as_ref()
                .ok_or_else(|| PipelineError::new(STAGE_SEGMENT, "masks mode without masks_dir"))?;
            let path = dir.join(format!("{study}.mask"));
            if path.exists() {
                load_mask_file(&path, &volume)
            } else if let Some(runner) = &runner {
                run_external_model(&volume, runner)
            } else {
                return Err(PipelineError::for_study(
                    STAGE_SEGMENT,
                    study,
                    format!("mask file {} is missing and no runner is configured", path.display()),
                ));
            }
        }
        SegmentMode::Runner => {
            let runner =
                runner.ok_or_else(|| PipelineError::new(STAGE_SEGMENT, "runner mode without a runner command"))?;
            run_external_model(&volume, &runner)
        }
    };
    let mask: CalciumMask = match result {
        Ok(m) => m,
        Err(e) => return Ok(SegmentOutcome::Excluded(e.to_string())),
    };
    write_mask_file(&mask, &store.mask_path(study))
        .map_err(|e| PipelineError::for_study(STAGE_SEGMENT, study, e.to_string()))?;
    Ok(SegmentOutcome::Mask(MaskRecord {
        study_uid: study.to_owned(),
        series_uid: mask.series_uid().to_owned(),
        voxel_count: mask.voxel_count(),
        positive_slices: mask.positive_slices(),
    }))
}

/// Produce one calcium mask per ingested study.
pub fn segment(store: &ScoreStore, cfg: &SegmentConfig) -> Result<StageReport, PipelineError> {
    const S: &str = STAGE_SEGMENT;
    let mode = cfg.effective_mode().ok_or_else(|| {
        PipelineError::new(S, "no masks directory, runner or baseline mode configured; cannot produce masks")
    })?;
    let ingest_fp = upstream(store, S, STAGE_INGEST)?;
    let masks_hash = match (&cfg.masks_dir, mode) {
        (Some(dir), SegmentMode::Masks) => hash_input(S, dir)?,
        _ => String::new(),
    };
    let fp = fingerprint(&[S.as_bytes(), ingest_fp.as_bytes(), &json(cfg), &json(&mode), masks_hash.as_bytes()]);
    let done: Vec<MaskRecord> = store.read(RecordKind::Masks, &fp).map_err(store_err(S))?;
    let excluded = store.stage_exclusions(S, &fp).map_err(store_err(S))?;
    if store.stage_fingerprint(S).as_deref() == Some(fp.as_str()) {
        return Ok(skipped(S, &fp, done.len(), excluded.len()));
    }
    let finished: HashSet<&str> =
        done.iter().map(|m| m.study_uid.as_str()).chain(excluded.iter().map(|e| e.study_uid.as_str())).collect();
    let series: Vec<IngestedSeries> = store.read(RecordKind::Series, &ingest_fp).map_err(store_err(S))?;
    let mut todo: Vec<&SeriesMeta> =
        series.iter().map(|s| &s.series).filter(|s| !finished.contains(s.study_uid.as_str())).collect();
    todo.sort_by(|a, b| a.study_uid.cmp(&b.study_uid));

    let (mut produced, mut n_excluded) = (done.len(), excluded.len());
    for batch in todo.chunks(BATCH) {
        let outcomes: Vec<Result<SegmentOutcome, PipelineError>> =
            batch.par_iter().map(|s| segment_one(store, s, cfg, mode)).collect();
        let mut records = Vec::new();
        let mut exclusions = Vec::new();
        for (s, outcome) in batch.iter().zip(outcomes) {
            match outcome? {
                SegmentOutcome::Mask(m) => records.push(m),
                SegmentOutcome::Excluded(reason) => {
                    exclusions.push(Exclusion { stage: S.into(), study_uid: s.study_uid.clone(), reason })
                }
            }
        }
        store.append(RecordKind::Masks, &fp, &records).map_err(store_err(S))?;
        store.log_exclusions(&fp, &exclusions).map_err(store_err(S))?;
        produced += records.len();
        n_excluded += exclusions.len();
    }
    store.set_stage_fingerprint(S, &fp).map_err(store_err(S))?;
    Ok(StageReport { stage: S.into(), fingerprint: fp, skipped: false, produced, excluded: n_excluded })
}

// ---------------------------------------------------------------- score

/// Agatston-score every segmented study.
pub fn score(store: &ScoreStore, config: &ScoringConfig) -> Result<StageReport, PipelineError> {
    const S: &str = STAGE_SCORE;
    config.validate().map_err(|e| PipelineError::new(S, e.to_string()))?;
    let segment_fp = upstream(store, S, STAGE_SEGMENT)?;
    let fp = fingerprint(&[S.as_bytes(), segment_fp.as_bytes(), config.fingerprint().as_bytes()]);
    let done: Vec<ScanScore> = store.read(RecordKind::Scores, &fp).map_err(store_err(S))?;
    let excluded = store.stage_exclusions(S, &fp).map_err(store_err(S))?;
    if store.stage_fingerprint(S).as_deref() == Some(fp.as_str()) {
        return Ok(skipped(S, &fp, done.len(), excluded.len()));
    }
    let finished: HashSet<&str> =
        done.iter().map(|s| s.study_uid.as_str()).chain(excluded.iter().map(|e| e.study_uid.as_str())).collect();
    let masks: Vec<MaskRecord> = store.read(RecordKind::Masks, &segment_fp).map_err(store_err(S))?;
    let mut todo: Vec<&MaskRecord> = masks.iter().filter(|m| !finished.contains(m.study_uid.as_str())).collect();
    todo.sort_by(|a, b| a.study_uid.cmp(&b.study_uid));

    let (mut produced, mut n_excluded) = (done.len(), excluded.len());
    for batch in todo.chunks(BATCH) {
        let results: Vec<Result<ScanScore, String>> = batch
            .par_iter()
            .map(|m| {
                let volume = store.load_volume(&m.study_uid).map_err(|e| e.to_string())?;
                let mask = load_mask_file(&store.mask_path(&m.study_uid), &volume).map_err(|e| e.to_string())?;
                score_scan(&volume, &mask, config).map_err(|e| e.to_string())
            })
            .collect();
        let mut records = Vec::new();
        let mut exclusions = Vec::new();
        for (m, r) in batch.iter().zip(results) {
            match r {
                Ok(s) => records.push(s),
                Err(reason) => exclusions.push(Exclusion { stage: S.into(), study_uid: m.study_uid.clone(), reason }),
            }
        }
        store.append(RecordKind::Scores, &fp, &records).map_err(store_err(S))?;
        store.log_exclusions(&fp, &exclusions).map_err(store_err(S))?;
        produced += records.len();
        n_excluded += exclusions.len();
    }
    store.set_stage_fingerprint(S, &fp).map_err(store_err(S))?;
    Ok(StageReport { stage: S.into(), fingerprint: fp, skipped: false, produced, excluded: n_excluded })
}

/// Score one stored volume against an arbitrary mask file and append the
/// result, stamped with the scoring configuration's fingerprint.
pub fn score_one(
    store: &ScoreStore,
    study_uid: &str,
    mask_file: &Path,
    config: &ScoringConfig,
) -> Result<ScanScore, PipelineError> {
    const S: &str = STAGE_SCORE;
    let err = |m: String| PipelineError::for_study(S, study_uid, m);
    config.validate().map_err(|e| err(e.to_string()))?;
    let volume = store.load_volume(study_uid).map_err(|e| err(e.to_string()))?;
    let mask = load_mask_file(mask_file, &volume).map_err(|e| err(e.to_string()))?;
    let result = score_scan(&volume, &mask, config).map_err(|e| err(e.to_string()))?;
    store.append(RecordKind::Scores, &config.fingerprint(), std::slice::from_ref(&result)).map_err(store_err(S))?;
    Ok(result)
}

/// Current-generation scores keyed by study uid.
pub fn current_scores(store: &ScoreStore) -> Result<BTreeMap<String, ScanScore>, StoreError> {
    let Some(fp) = store.stage_fingerprint(STAGE_SCORE) else {
        return Ok(BTreeMap::new());
    };
    Ok(store.read::<ScanScore>(RecordKind::Scores, &fp)?.into_iter().map(|s| (s.study_uid.clone(), s)).collect())
}

/// Review candidates: scored studies joined with their mask-positive slices.
pub fn review_candidates(store: &ScoreStore) -> Result<Vec<ReviewCandidate>, StoreError> {
    let scores = current_scores(store)?;
    let masks: Vec<MaskRecord> = match store.stage_fingerprint(STAGE_SEGMENT) {
        Some(fp) => store.read(RecordKind::Masks, &fp)?,
        None => vec![],
    };
    Ok(masks
        .into_iter()
        .filter_map(|m| {
            let s = scores.get(&m.study_uid)?;
            Some(ReviewCandidate {
                study_uid: m.study_uid,
                ai_score: s.rounded,
                bin: s.bin,
                positive_slice_indices: m.positive_slices,
            })
        })
        .collect())
}

// ---------------------------------------------------------------- reports

/// Extract reference scores from gated CT reports.
pub fn extract_reports(
    store: &ScoreStore,
    records_path: &Path,
    rules_path: Option<&Path>,
) -> Result<StageReport, PipelineError> {
    const S: &str = STAGE_EXTRACT;
    let (rules, rules_text) = match rules_path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| PipelineError::new(S, format!("{}: {e}", p.display())))?;
            (RulePack::from_toml(&text).map_err(|e| PipelineError::new(S, e.to_string()))?, text)
        }
        None => (RulePack::builtin(), String::from("builtin")),
    };
    let fp = fingerprint(&[S.as_bytes(), hash_input(S, records_path)?.as_bytes(), rules_text.as_bytes()]);
    if store.stage_fingerprint(S).as_deref() == Some(fp.as_str()) {
        let n = store.read::<ExtractionRecord>(RecordKind::Extractions, &fp).map_err(store_err(S))?.len();
        return Ok(skipped(S, &fp, n, 0));
    }
    let reports: Vec<ReportRecord> = read_jsonl(records_path).map_err(|e| PipelineError::new(S, e.to_string()))?;
    let records: Vec<ExtractionRecord> = reports
        .par_iter()
        .map(|r| ExtractionRecord {
            report_id: r.report_id.clone(),
            patient_id: r.patient_id.clone(),
            study_uid: r.study_uid.clone(),
            report_date: r.report_date,
            result: extract_agatston(&r.report_text, &rules),
        })
        .collect();
    if !store.has_generation(RecordKind::Extractions, &fp).map_err(store_err(S))? {
        store.append(RecordKind::Extractions, &fp, &records).map_err(store_err(S))?;
    }

    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for r in &records {
        let key = match (&r.result.status, &r.result.reason) {
            (ExtractionStatus::Extracted, _) => "extracted".to_owned(),
            (_, Some(reason)) => {
                serde_json::to_value(reason).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default()
            }
            _ => "not_extractable".to_owned(),
        };
        *counts.entry(key).or_default() += 1;
    }
    let mut csv = String::from("outcome,count\n");
    for (k, v) in &counts {
        let _ = writeln!(csv, "{k},{v}");
    }
    store.write_report("extraction/summary.csv", csv.as_bytes()).map_err(store_err(S))?;
    store.set_stage_fingerprint(S, &fp).map_err(store_err(S))?;
    Ok(StageReport { stage: S.into(), fingerprint: fp, skipped: false, produced: records.len(), excluded: 0 })
}

// ---------------------------------------------------------------- cohorts

fn read_scans(stage: &'static str, path: &Path) -> Result<Vec<ScanInput>, PipelineError> {
    read_jsonl(path).map_err(|e| PipelineError::new(stage, e.to_string()))
}

/// Pair each patient's non-gated scan with the nearest gated scan that has
/// an extracted reference score.
pub fn pair(store: &ScoreStore, scans_path: &Path, window_days: i64) -> Result<StageReport, PipelineError> {
    const S: &str = STAGE_PAIR;
    let extract_fp = upstream(store, S, STAGE_EXTRACT)?;
    let score_fp = store.stage_fingerprint(STAGE_SCORE).unwrap_or_default();
    let fp = fingerprint(&[
        S.as_bytes(),
        hash_input(S, scans_path)?.as_bytes(),
        &window_days.to_le_bytes(),
        extract_fp.as_bytes(),
        score_fp.as_bytes(),
    ]);
    if store.stage_fingerprint(S).as_deref() == Some(fp.as_str()) {
        let n = store.read::<PairedStudy>(RecordKind::Pairs, &fp).map_err(store_err(S))?.len();
        return Ok(skipped(S, &fp, n, 0));
    }
    let scans = read_scans(S, scans_path)?;
    let extractions: Vec<ExtractionRecord> = store.read(RecordKind::Extractions, &extract_fp).map_err(store_err(S))?;
    // Several reports on one gated study: the oldest extracted one wins.
    let mut reference: BTreeMap<&str, (&NaiveDate, &str, f64)> = BTreeMap::new();
    for e in &extractions {
        let Some(score) = e.result.score.filter(|_| e.result.is_extracted()) else { continue };
        let candidate = (&e.report_date, e.report_id.as_str(), score);
        reference
            .entry(e.study_uid.as_str())
            .and_modify(|kept| {
                if (candidate.0, candidate.1) < (kept.0, kept.1) {
                    *kept = candidate;
                }
            })
            .or_insert(candidate);
    }
    let nongated: Vec<_> = scans.iter().filter(|s| s.kind == ScanKind::NonGated).map(ScanInput::to_ref).collect();
    let gated: Vec<GatedScan> = scans
        .iter()
        .filter(|s| s.kind == ScanKind::Gated)
        .filter_map(|s| {
            reference.get(s.study_uid.as_str()).map(|r| GatedScan { scan: s.to_ref(), reference_score: r.2 })
        })
        .collect();
    let scores = current_scores(store).map_err(store_err(S))?;
    let mut pairs = build_pairs(&nongated, &gated, window_days);
    for p in &mut pairs {
        p.ai_score = scores.get(&p.nongated_study_uid).cloned();
    }
    if !store.has_generation(RecordKind::Pairs, &fp).map_err(store_err(S))? {
        store.append(RecordKind::Pairs, &fp, &pairs).map_err(store_err(S))?;
    }
    store.set_stage_fingerprint(S, &fp).map_err(store_err(S))?;
    Ok(StageReport { stage: S.into(), fingerprint: fp, skipped: false, produced: pairs.len(), excluded: 0 })
}

/// Center-stratified tune/test split of the pairs.
pub fn split(store: &ScoreStore, cfg: &CohortConfig, seed: u64) -> Result<StageReport, PipelineError> {
    const S: &str = STAGE_SPLIT;
    let pair_fp = upstream(store, S, STAGE_PAIR)?;
    let fp = fingerprint(&[S.as_bytes(), pair_fp.as_bytes(), &json(cfg), &seed.to_le_bytes()]);
    if store.stage_fingerprint(S).as_deref() == Some(fp.as_str()) {
        let n = store.read::<PairedStudy>(RecordKind::Test, &fp).map_err(store_err(S))?.len();
        return Ok(skipped(S, &fp, n, 0));
    }
    let pairs: Vec<PairedStudy> = store.read(RecordKind::Pairs, &pair_fp).map_err(store_err(S))?;
    let train: BTreeSet<String> = cfg.train_centers.iter().cloned().collect();
    let eligible: Vec<PairedStudy> = pairs.into_iter().filter(|p| !train.contains(&p.center_id)).collect();
    let (tune, test) =
        split_by_center(&eligible, cfg.split_ratio, seed).map_err(|e| PipelineError::new(S, e.to_string()))?;
    let ids = |v: &[PairedStudy]| v.iter().map(|p| p.patient_id.clone()).collect::<Vec<_>>();
    assert_disjoint(&[("tune", ids(&tune)), ("test", ids(&test))]).map_err(|e| PipelineError::new(S, e.to_string()))?;
    if !store.has_generation(RecordKind::Tune, &fp).map_err(store_err(S))? {
        store.append(RecordKind::Tune, &fp, &tune).map_err(store_err(S))?;
        store.append(RecordKind::Test, &fp, &test).map_err(store_err(S))?;
    }
    store.set_stage_fingerprint(S, &fp).map_err(store_err(S))?;
    Ok(StageReport { stage: S.into(), fingerprint: fp, skipped: false, produced: test.len(), excluded: 0 })
}

fn test_pairs(store: &ScoreStore, stage: &'static str) -> Result<Vec<PairedStudy>, PipelineError> {
    let split_fp = upstream(store, stage, STAGE_SPLIT)?;
    store.read(RecordKind::Test, &split_fp).map_err(store_err(stage))
}

fn metrics_row(prefix: &str, m: &ThresholdMetrics) -> String {
    let mut row = format!("{prefix},{},{},{},{},{}", m.n(), m.tp, m.fp, m.fn_, m.tn);
    for v in m.as_row() {
        row.push(',');
        row.push_str(&fmt_opt_pct(v));
    }
    row
}

const METRIC_COLUMNS: &str = "n,tp,fp,fn,tn,accuracy,ppv,npv,sensitivity,specificity,f1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub n: usize,
    pub weighted_kappa: Option<f64>,
    pub kappa_ci: Option<(f64, f64)>,
    pub ci_level: f64,
    pub bootstrap_iterations: usize,
    pub percent_agreement: Option<f64>,
    pub icc: Option<f64>,
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
    pub bland_altman_mean_diff: Option<f64>,
    pub bland_altman_limits: Option<(f64, f64)>,
    pub notes: Vec<String>,
}

/// Threshold metrics, subgroup tables, the bin confusion matrix and
/// agreement statistics on the test pairs.
pub fn evaluate(store: &ScoreStore, cfg: &EvaluateConfig, seed: u64) -> Result<StageReport, PipelineError> {
    const S: &str = STAGE_EVALUATE;
    let split_fp = upstream(store, S, STAGE_SPLIT)?;
    let ingest_fp = store.stage_fingerprint(STAGE_INGEST).unwrap_or_default();
    let fp = fingerprint(&[S.as_bytes(), split_fp.as_bytes(), ingest_fp.as_bytes(), &json(cfg), &seed.to_le_bytes()]);
    if store.stage_fingerprint(S).as_deref() == Some(fp.as_str())
        && store.reports_dir().join("evaluate/metrics.csv").exists()
    {
        return Ok(skipped(S, &fp, 0, 0));
    }
    let pairs: Vec<PairedStudy> = test_pairs(store, S)?.into_iter().filter(|p| p.ai_score.is_some()).collect();
    if pairs.is_empty() {
        return Err(PipelineError::new(S, "no test pairs carry an AI score"));
    }
    let rounded: Vec<(u64, u64)> = pairs
        .iter()
        .map(|p| (crate::agatston::round_half_up(p.reference_score), p.ai_score.as_ref().map_or(0, |s| s.rounded)))
        .collect();
    let stat_err = |e: crate::stats::StatsError| PipelineError::new(S, e.to_string());
    let write =
        |name: &str, body: &str| store.write_report(&format!("evaluate/{name}"), body.as_bytes()).map_err(store_err(S));

    let mut metrics = format!("threshold,{METRIC_COLUMNS}\n");
    for &t in &cfg.thresholds {
        let m = threshold_metrics(&rounded, t).map_err(stat_err)?;
        let _ = writeln!(metrics, "{}", metrics_row(&t.to_string(), &m));
    }
    write("metrics.csv", &metrics)?;

    let series: HashMap<String, SeriesMeta> = store
        .read::<IngestedSeries>(RecordKind::Series, &ingest_fp)
        .map_err(store_err(S))?
        .into_iter()
        .map(|s| (s.series.study_uid.clone(), s.series))
        .collect();
    let sub_pairs: Vec<SubgroupPair> = pairs
        .iter()
        .zip(&rounded)
        .filter_map(|(p, &(r, a))| {
            series.get(&p.nongated_study_uid).map(|meta| SubgroupPair {
                reference_rounded: r,
                predicted_rounded: a,
                meta,
            })
        })
        .collect();
    let sub = subgroup_evaluate(&sub_pairs, &cfg.subgroups, &cfg.thresholds).map_err(stat_err)?;
    let mut subgroups = format!("key,value,threshold,{METRIC_COLUMNS}\n");
    for row in &sub.rows {
        let _ = writeln!(
            subgroups,
            "{}",
            metrics_row(&format!("{},{},{}", row.key.as_str(), row.value, row.threshold), &row.metrics)
        );
    }
    write("subgroups.csv", &subgroups)?;
    let mut coverage = sub.coverage_notes.join("\n");
    if sub_pairs.len() < pairs.len() {
        let _ = write!(
            coverage,
            "{}{} pairs lack series metadata",
            if coverage.is_empty() { "" } else { "\n" },
            pairs.len() - sub_pairs.len()
        );
    }
    write("subgroup_coverage.txt", &(coverage + "\n"))?;

    let bins: Vec<(CacBin, CacBin)> = rounded.iter().map(|&(r, a)| (bin_score(r), bin_score(a))).collect();
    let matrix = confusion_matrix(&bins).map_err(stat_err)?;
    let mut confusion = String::from("reference\\predicted");
    for b in CacBin::ALL {
        let _ = write!(confusion, ",{}", b.label());
    }
    confusion.push('\n');
    for (i, b) in CacBin::ALL.iter().enumerate() {
        let _ = write!(confusion, "{}", b.label());
        for c in matrix.counts[i] {
            let _ = write!(confusion, ",{c}");
        }
        confusion.push('\n');
    }
    write("confusion.csv", &confusion)?;

    let raw: Vec<(f64, f64)> =
        pairs.iter().map(|p| (p.reference_score, p.ai_score.as_ref().map_or(0.0, |s| s.total))).collect();
    let mut notes = Vec::new();
    fn note(notes: &mut Vec<String>, what: &str, r: Result<f64, crate::stats::StatsError>) -> Option<f64> {
        r.map_err(|e| notes.push(format!("{what}: {e}"))).ok()
    }
    let kappa = note(&mut notes, "weighted_kappa", weighted_kappa(&matrix));
    let kappa_ci = match bootstrap_ci(
        &bins,
        |sample| confusion_matrix(sample).ok().and_then(|m| weighted_kappa(&m).ok()),
        BootstrapOptions { iterations: cfg.bootstrap_iterations, seed, level: cfg.ci_level },
    ) {
        Ok(ci) => Some((ci.lo, ci.hi)),
        Err(e) => {
            notes.push(format!("kappa bootstrap: {e}"));
            None
        }
    };
    let icc = note(&mut notes, "icc", icc_agreement(&raw));
    let (pearson, spearman) = match correlations(&raw) {
        Ok(c) => (Some(c.pearson), Some(c.spearman)),
        Err(e) => {
            notes.push(format!("correlations: {e}"));
            (None, None)
        }
    };
    let ba = bland_altman(&raw).ok();
    if let Some(ba) = &ba {
        let mut points = String::from("study_uid,mean,diff\n");
        for (p, pt) in pairs.iter().zip(&ba.points) {
            let _ = writeln!(points, "{},{},{}", p.nongated_study_uid, fmt_f(pt.mean), fmt_f(pt.diff));
        }
        write("bland_altman.csv", &points)?;
    } else {
        notes.push("bland_altman: needs at least two pairs".into());
    }
    let agreement = AgreementReport {
        n: pairs.len(),
        weighted_kappa: kappa,
        kappa_ci,
        ci_level: cfg.ci_level,
        bootstrap_iterations: cfg.bootstrap_iterations,
        percent_agreement: matrix.percent_agreement(),
        icc,
        pearson,
        spearman,
        bland_altman_mean_diff: ba.as_ref().map(|b| b.mean_diff),
        bland_altman_limits: ba.as_ref().map(|b| (b.lower, b.upper)),
        notes,
    };
    write("agreement.json", &(serde_json::to_string_pretty(&agreement).expect("serializes") + "\n"))?;
    store.set_stage_fingerprint(S, &fp).map_err(store_err(S))?;
    Ok(StageReport { stage: S.into(), fingerprint: fp, skipped: false, produced: pairs.len(), excluded: 0 })
}

// ---------------------------------------------------------------- survival

/// Load patients and join their diagnoses and prescriptions.
pub fn load_patients(inputs: &InputPaths, stage: &'static str) -> Result<(Vec<PatientRecord>, String), PipelineError> {
    let path = inputs.patients.as_ref().ok_or_else(|| PipelineError::new(stage, "no patients file configured"))?;
    let err = |e: crate::inputs::InputError| PipelineError::new(stage, e.to_string());
    let patients: Vec<PatientInput> = read_jsonl(path).map_err(err)?;
    let mut hashes = hash_input(stage, path)?;
    let diagnoses: Vec<DiagnosisInput> = match &inputs.diagnoses {
        Some(p) => {
            hashes += &hash_input(stage, p)?;
            read_jsonl(p).map_err(err)?
        }
        None => vec![],
    };
    let prescriptions: Vec<PrescriptionInput> = match &inputs.prescriptions {
        Some(p) => {
            hashes += &hash_input(stage, p)?;
            read_jsonl(p).map_err(err)?
        }
        None => vec![],
    };
    let records = assemble_patients(&patients, &diagnoses, &prescriptions, &crate::cohort::IcdMap::default());
    Ok((records, hashes))
}

/// Survival rows for the test cohort: index date is the non-gated scan,
/// group is the AI-CAC bin.
pub fn survival_rows(
    store: &ScoreStore,
    inputs: &InputPaths,
    cfg: &SurvivalConfig,
) -> Result<StageReport, PipelineError> {
    const S: &str = STAGE_SURVIVAL_ROWS;
    let split_fp = upstream(store, S, STAGE_SPLIT)?;
    let (patients, input_hash) = load_patients(inputs, S)?;
    let outcome_cfg = (cfg.outcome, cfg.strata);
    let fp = fingerprint(&[S.as_bytes(), split_fp.as_bytes(), input_hash.as_bytes(), &json(&outcome_cfg)]);
    if store.stage_fingerprint(S).as_deref() == Some(fp.as_str()) {
        let n = store.read::<SurvivalRow>(RecordKind::SurvivalRows, &fp).map_err(store_err(S))?.len();
        return Ok(skipped(S, &fp, n, 0));
    }
    let pairs = test_pairs(store, S)?;
    let mut index_dates = HashMap::new();
    let mut bins = HashMap::new();
    for p in &pairs {
        if let Some(ai) = &p.ai_score {
            index_dates.insert(p.patient_id.clone(), p.nongated_date);
            bins.insert(p.patient_id.clone(), ai.bin);
        }
    }
    let table = make_survival_rows(&patients, &index_dates, &bins, cfg.outcome, cfg.strata)
        .map_err(|e| PipelineError::new(S, e.to_string()))?;
    if !store.has_generation(RecordKind::SurvivalRows, &fp).map_err(store_err(S))? {
        store.append(RecordKind::SurvivalRows, &fp, &table.rows).map_err(store_err(S))?;
    }
    let mut excluded = String::from("patient_id,reason\n");
    for SurvivalExclusion { patient_id, reason } in &table.excluded {
        let _ = writeln!(excluded, "{patient_id},{reason}");
    }
    store.write_report("survival/excluded_patients.csv", excluded.as_bytes()).map_err(store_err(S))?;
    store.set_stage_fingerprint(S, &fp).map_err(store_err(S))?;
    Ok(StageReport {
        stage: S.into(),
        fingerprint: fp,
        skipped: false,
        produced: table.rows.len(),
        excluded: table.excluded.len(),
    })
}

/// Order groups by bin, then by stratum label.
fn group_order(label: &str) -> (usize, String) {
    let (bin, rest) = label.split_once('|').unwrap_or((label, ""));
    (CacBin::parse(bin).map_or(usize::MAX, CacBin::index), rest.to_owned())
}

/// KM curves and at-risk tables per group, and Cox fits of every group
/// against the lowest-bin group of the same stratum.
pub fn survival(store: &ScoreStore, grid: Grid) -> Result<StageReport, PipelineError> {
    const S: &str = STAGE_SURVIVAL;
    let rows_fp = upstream(store, S, STAGE_SURVIVAL_ROWS)?;
    let fp = fingerprint(&[S.as_bytes(), rows_fp.as_bytes(), &json(&grid)]);
    if store.stage_fingerprint(S).as_deref() == Some(fp.as_str())
        && store.reports_dir().join("survival/cox.csv").exists()
    {
        return Ok(skipped(S, &fp, 0, 0));
    }
    let rows: Vec<SurvivalRow> = store.read(RecordKind::SurvivalRows, &rows_fp).map_err(store_err(S))?;
    let mut groups: BTreeMap<(usize, String), (String, Vec<SurvivalObs>)> = BTreeMap::new();
    for r in &rows {
        groups
            .entry(group_order(&r.group_label))
            .or_insert_with(|| (r.group_label.clone(), vec![]))
            .1
            .push(SurvivalObs::from(r));
    }
    let max_t = rows.iter().map(|r| r.duration_days).max().unwrap_or(0) as f64;
    let points = grid.points(max_t);

    let mut km = String::from("group,time_days,survival\n");
    let mut at_risk = String::from("group,time_days,at_risk,censored,events\n");
    let mut fractions = String::from("group,n,final_event_fraction\n");
    for (label, obs) in groups.values() {
        let curve = km_estimate(obs, &points).map_err(|e| PipelineError::new(S, format!("{label}: {e}")))?;
        for (t, s) in curve.times.iter().zip(&curve.survival) {
            let _ = writeln!(km, "{label},{},{}", fmt_f(*t), fmt_f(*s));
        }
        for row in &curve.table {
            let _ = writeln!(at_risk, "{label},{},{},{},{}", fmt_f(row.time), row.at_risk, row.censored, row.events);
        }
        let _ = writeln!(fractions, "{label},{},{}", curve.n, fmt_f(curve.final_event_fraction()));
    }

    let mut cox = String::from("group,reference,hr,log_hr,se,wald_z,p_value,converged,iterations,error\n");
    let mut references: BTreeMap<&str, &(String, Vec<SurvivalObs>)> = BTreeMap::new();
    for (key, group) in &groups {
        references.entry(key.1.as_str()).or_insert(group);
    }
    for (key, (label, obs)) in &groups {
        let (ref_label, ref_obs) = references[key.1.as_str()];
        if ref_label == label {
            continue;
        }
        match cox_two_group(ref_obs, obs) {
            Ok(f) => {
                let _ = writeln!(
                    cox,
                    "{label},{ref_label},{},{},{},{},{},{},{},",
                    fmt_f(f.hr),
                    fmt_f(f.log_hr),
                    fmt_f(f.se),
                    fmt_f(f.wald_z),
                    f.p_value,
                    f.converged,
                    f.iterations
                );
            }
            Err(e) => {
                let _ = writeln!(cox, "{label},{ref_label},NA,NA,NA,NA,NA,false,0,{e}");
            }
        }
    }
    for (name, body) in [("km.csv", km), ("at_risk.csv", at_risk), ("event_fractions.csv", fractions), ("cox.csv", cox)]
    {
        store.write_report(&format!("survival/{name}"), body.as_bytes()).map_err(store_err(S))?;
    }
    store.set_stage_fingerprint(S, &fp).map_err(store_err(S))?;
    Ok(StageReport { stage: S.into(), fingerprint: fp, skipped: false, produced: groups.len(), excluded: 0 })
}

// ---------------------------------------------------------------- screening

/// Screening distribution and therapy gap over the screening (LDCT) scans:
/// oldest scan per patient, training centers removed, scored studies only.
pub fn screening(
    store: &ScoreStore,
    inputs: &InputPaths,
    train_centers: &[String],
    policy: &TherapyPolicy,
) -> Result<StageReport, PipelineError> {
    const S: &str = STAGE_SCREENING;
    let scans_path = inputs.scans.as_ref().ok_or_else(|| PipelineError::new(S, "no scans file configured"))?;
    let scans = read_scans(S, scans_path)?;
    let ldct: Vec<_> = scans.iter().filter(|s| s.kind == ScanKind::Ldct).map(ScanInput::to_ref).collect();
    let train: BTreeSet<String> = train_centers.iter().cloned().collect();
    let cohort = exclude_training_centers(&dedup_oldest(&ldct), &train);
    let scores = current_scores(store).map_err(store_err(S))?;
    let mut subjects = Vec::new();
    let mut unscored = Vec::new();
    for scan in &cohort {
        match scores.get(&scan.study_uid) {
            Some(s) => subjects.push(ScreeningSubject { patient_id: scan.patient_id.clone(), bin: s.bin }),
            None => unscored.push(scan.study_uid.clone()),
        }
    }
    let patients = match inputs.patients {
        Some(_) => Some(load_patients(inputs, S)?.0),
        None => None,
    };
    let report = screening_report(&subjects, patients.as_deref(), policy);
    let write = |name: &str, body: String| {
        store.write_report(&format!("screening/{name}"), body.as_bytes()).map_err(store_err(S))
    };
    write("distribution.csv", report.to_csv())?;
    write("distribution.json", serde_json::to_string_pretty(&report).expect("serializes") + "\n")?;
    write("unscored_studies.txt", unscored.iter().map(|u| format!("{u}\n")).collect())?;
    if let Some(patients) = &patients {
        let gap = therapy_gap_report(&subjects, patients, policy);
        write("therapy_gap.json", serde_json::to_string_pretty(&gap).expect("serializes") + "\n")?;
        write(
            "therapy_gap_patients.csv",
            std::iter::once("patient_id\n".to_owned())
                .chain(gap.untreated_patient_ids.iter().map(|p| format!("{p}\n")))
                .collect(),
        )?;
    }
    Ok(StageReport {
        stage: S.into(),
        fingerprint: String::new(),
        skipped: false,
        produced: subjects.len(),
        excluded: unscored.len(),
    })
}

// ---------------------------------------------------------------- full run

/// Input studies versus scored and excluded studies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Accounting {
    pub input_studies: usize,
    pub scored: usize,
    pub excluded: usize,
    pub excluded_by_stage: BTreeMap<String, usize>,
}

impl Accounting {
    pub fn balanced(&self) -> bool {
        self.input_studies == self.scored + self.excluded
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub stages: Vec<StageReport>,
    pub accounting: Option<Accounting>,
}

impl RunReport {
    pub fn has_exclusions(&self) -> bool {
        self.accounting.as_ref().is_some_and(|a| a.excluded > 0)
    }
}

fn accounting(store: &ScoreStore, studies_dir: &Path) -> Result<Accounting, PipelineError> {
    const S: &str = "run";
    let input_studies = fs::read_dir(studies_dir)
        .map_err(|e| PipelineError::new(S, e.to_string()))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .count();
    let mut excluded_by_stage = BTreeMap::new();
    let mut excluded = 0;
    for stage in [STAGE_INGEST, STAGE_SEGMENT, STAGE_SCORE] {
        let n = match store.stage_fingerprint(stage) {
            Some(fp) => store.stage_exclusions(stage, &fp).map_err(store_err(S))?.len(),
            None => 0,
        };
        excluded += n;
        excluded_by_stage.insert(stage.to_owned(), n);
    }
    let scored = current_scores(store).map_err(store_err(S))?.len();
    Ok(Accounting { input_studies, scored, excluded, excluded_by_stage })
}

/// Run every configured stage in order. Stages whose inputs are not
/// configured are left out.
pub fn run_pipeline(store: &ScoreStore, cfg: &PipelineConfig) -> Result<RunReport, PipelineError> {
    let mut stages = Vec::new();
    let mut acct = None;
    if let Some(studies) = &cfg.inputs.studies {
        stages.push(ingest(store, studies, &cfg.selection)?);
        stages.push(segment(store, &cfg.segment)?);
        stages.push(score(store, &cfg.scoring)?);
        let a = accounting(store, studies)?;
        if !a.balanced() {
            return Err(PipelineError::new(
                "run",
                format!("{} input studies but {} scored + {} excluded", a.input_studies, a.scored, a.excluded),
            ));
        }
        acct = Some(a);
    }
    if let Some(reports) = &cfg.inputs.reports {
        stages.push(extract_reports(store, reports, cfg.inputs.rules.as_deref())?);
        if let Some(scans) = &cfg.inputs.scans {
            stages.push(pair(store, scans, cfg.cohort.window_days)?);
            let split_seed = store.seed_for("split").map_err(store_err(STAGE_SPLIT))?;
            stages.push(split(store, &cfg.cohort, split_seed)?);
            let boot_seed = store.seed_for("bootstrap").map_err(store_err(STAGE_EVALUATE))?;
            stages.push(evaluate(store, &cfg.evaluate, boot_seed)?);
            if cfg.inputs.patients.is_some() {
                stages.push(survival_rows(store, &cfg.inputs, &cfg.survival)?);
                stages.push(survival(store, cfg.survival.grid)?);
            }
        }
    }
    if let Some(scans) = &cfg.inputs.scans {
        let has_ldct = read_scans(STAGE_SCREENING, scans)?.iter().any(|s| s.kind == ScanKind::Ldct);
        if has_ldct {
            stages.push(screening(store, &cfg.inputs, &cfg.cohort.train_centers, &cfg.therapy)?);
        }
    }
    let report = RunReport { stages, accounting: acct };
    // Stage reports record whether work was skipped, which differs between
    // a first run and a rerun; only the accounting goes into the bundle.
    store
        .write_report(
            "run/accounting.json",
            (serde_json::to_string_pretty(&report.accounting).expect("serializes") + "\n").as_bytes(),
        )
        .map_err(store_err("run"))?;
    let mut excl = String::from("stage,study_uid,reason\n");
    for stage in [STAGE_INGEST, STAGE_SEGMENT, STAGE_SCORE] {
        if let Some(fp) = store.stage_fingerprint(stage) {
            let mut list = store.stage_exclusions(stage, &fp).map_err(store_err("run"))?;
            list.sort();
            for e in list {
                let _ = writeln!(excl, "{},{},{}", e.stage, e.study_uid, e.reason.replace([',', '\n'], ";"));
            }
        }
    }
    store.write_report("run/exclusions.csv", excl.as_bytes()).map_err(store_err("run"))?;
    Ok(report)
}
