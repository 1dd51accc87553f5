//! Calcium masks and the segmentation-model boundary.
//!
//! Masks travel as run-length lists over the flattened slice-major voxel
//! index. The text interchange format is
//!
//! ```text
//! CACMASK 1 <study_uid> <series_uid> <n_slices> <n_rows> <n_cols>
//! <start> <length>
//! ...
//! ```
//!
//! with runs sorted ascending, non-overlapping and non-adjacent.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::volume::{write_volume_dir, CtVolume, Dims};

const MAGIC: &str = "CACMASK";
const VERSION: &str = "1";

/// HU threshold for calcium candidates (inclusive).
pub const CALCIUM_HU: i32 = 130;

#[derive(Debug, Error)]
pub enum MaskError {
    #[error("mask dims {mask:?} do not match volume dims {volume:?}")]
    DimsMismatch { mask: Dims, volume: Dims },
    #[error("mask uids ({mask_study}, {mask_series}) do not match volume ({study}, {series})")]
    UidMismatch { mask_study: String, mask_series: String, study: String, series: String },
    #[error("malformed runs: {0}")]
    MalformedRuns(String),
    #[error("malformed mask file: {0}")]
    MalformedFile(String),
    #[error("roi {roi:?} outside volume {dims:?}")]
    RoiOutOfBounds { roi: RoiBox, dims: Dims },
    #[error("external runner failed ({status}): {diagnostics}")]
    RunnerFailed { status: String, diagnostics: String },
    #[error("invalid model output: {0}")]
    InvalidModelOutput(String),
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

/// A run of set voxels `[start, start + len)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Run {
    pub start: usize,
    pub len: usize,
}

impl Run {
    pub fn end(&self) -> usize {
        self.start + self.len
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CalciumMask {
    study_uid: String,
    series_uid: String,
    dims: Dims,
    runs: Vec<Run>,
}

impl CalciumMask {
    /// Build a mask from arbitrary-order runs. Overlapping or out-of-range
    /// runs are rejected; adjacent runs are merged; empty runs dropped.
    pub fn from_runs(
        study_uid: impl Into<String>,
        series_uid: impl Into<String>,
        dims: Dims,
        mut runs: Vec<Run>,
    ) -> Result<Self, MaskError> {
        runs.retain(|r| r.len > 0);
        runs.sort_unstable();
        let total = dims.len();
        let mut merged: Vec<Run> = Vec::with_capacity(runs.len());
        for run in runs {
            if run.start.checked_add(run.len).is_none_or(|end| end > total) {
                return Err(MaskError::MalformedRuns(format!(
                    "run ({}, {}) exceeds {} voxels",
                    run.start, run.len, total
                )));
            }
            match merged.last_mut() {
                Some(last) if run.start < last.end() => {
                    return Err(MaskError::MalformedRuns(format!(
                        "run ({}, {}) overlaps ({}, {})",
                        run.start, run.len, last.start, last.len
                    )));
                }
                Some(last) if run.start == last.end() => last.len += run.len,
                _ => merged.push(run),
            }
        }
        Ok(Self { study_uid: study_uid.into(), series_uid: series_uid.into(), dims, runs: merged })
    }

    pub fn empty(study_uid: impl Into<String>, series_uid: impl Into<String>, dims: Dims) -> Self {
        Self { study_uid: study_uid.into(), series_uid: series_uid.into(), dims, runs: Vec::new() }
    }

    pub fn for_volume(volume: &CtVolume, runs: Vec<Run>) -> Result<Self, MaskError> {
        Self::from_runs(volume.meta.study_uid.clone(), volume.meta.series_uid.clone(), volume.dims, runs)
    }

    /// Build from a dense boolean grid of `dims.len()` entries.
    pub fn from_dense(
        study_uid: impl Into<String>,
        series_uid: impl Into<String>,
        dims: Dims,
        dense: &[bool],
    ) -> Result<Self, MaskError> {
        if dense.len() != dims.len() {
            return Err(MaskError::MalformedRuns(format!("dense mask of {} voxels for dims {:?}", dense.len(), dims)));
        }
        let mut runs = Vec::new();
        let mut i = 0;
        while i < dense.len() {
            if dense[i] {
                let start = i;
                while i < dense.len() && dense[i] {
                    i += 1;
                }
                runs.push(Run { start, len: i - start });
            } else {
                i += 1;
            }
        }
        Ok(Self { study_uid: study_uid.into(), series_uid: series_uid.into(), dims, runs })
    }

    pub fn study_uid(&self) -> &str {
        &self.study_uid
    }

    pub fn series_uid(&self) -> &str {
        &self.series_uid
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn runs(&self) -> &[Run] {
        &self.runs
    }

    pub fn is_empty(&self) -> bool {
        self.runs.is_empty()
    }

    pub fn voxel_count(&self) -> usize {
        self.runs.iter().map(|r| r.len).sum()
    }

    pub fn to_dense(&self) -> Vec<bool> {
        let mut dense = vec![false; self.dims.len()];
        for run in &self.runs {
            dense[run.start..run.end()].fill(true);
        }
        dense
    }

    /// Set voxel indices in ascending order.
    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.runs.iter().flat_map(|r| r.start..r.end())
    }

    pub fn contains(&self, index: usize) -> bool {
        match self.runs.binary_search_by(|r| r.start.cmp(&index)) {
            Ok(_) => true,
            Err(0) => false,
            Err(pos) => index < self.runs[pos - 1].end(),
        }
    }

    /// Slice indices with at least one set voxel, ascending.
    pub fn positive_slices(&self) -> Vec<usize> {
        let plane = self.dims.slice_len();
        let mut slices: Vec<usize> = Vec::new();
        for run in &self.runs {
            let first = run.start / plane;
            let last = (run.end() - 1) / plane;
            for s in first..=last {
                if slices.last() != Some(&s) {
                    slices.push(s);
                }
            }
        }
        slices
    }

    /// Serialize to the `CACMASK 1` text format.
    pub fn serialize(&self) -> Result<String, MaskError> {
        for uid in [&self.study_uid, &self.series_uid] {
            if uid.is_empty() || uid.chars().any(char::is_whitespace) {
                return Err(MaskError::MalformedFile(format!("uid {uid:?} is not a single token")));
            }
        }
        let d = self.dims;
        let mut out =
            format!("{MAGIC} {VERSION} {} {} {} {} {}\n", self.study_uid, self.series_uid, d.slices, d.rows, d.cols);
        for run in &self.runs {
            let _ = writeln!(out, "{} {}", run.start, run.len);
        }
        Ok(out)
    }

    /// Parse the `CACMASK 1` text format without checking against a volume.
    pub fn parse(text: &str) -> Result<Self, MaskError> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| MaskError::MalformedFile("empty file".into()))?;
        let fields: Vec<&str> = header.split(' ').collect();
        if fields.len() != 7 || fields[0] != MAGIC || fields[1] != VERSION {
            return Err(MaskError::MalformedFile(format!("bad header {header:?}")));
        }
        let dim = |s: &str| s.parse::<usize>().map_err(|_| MaskError::MalformedFile(format!("bad dimension {s:?}")));
        let dims = Dims::new(dim(fields[4])?, dim(fields[5])?, dim(fields[6])?);
        let mut runs = Vec::new();
        for (lineno, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split(' ');
            let (Some(a), Some(b), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(MaskError::MalformedFile(format!("line {}: {line:?}", lineno + 2)));
            };
            let num = |s: &str| {
                s.parse::<usize>().map_err(|_| MaskError::MalformedFile(format!("line {}: {line:?}", lineno + 2)))
            };
            runs.push(Run { start: num(a)?, len: num(b)? });
        }
        Self::from_runs(fields[2], fields[3], dims, runs)
    }

    /// Check this mask against its target volume.
    pub fn validate_against(&self, volume: &CtVolume) -> Result<(), MaskError> {
        if self.dims != volume.dims {
            return Err(MaskError::DimsMismatch { mask: self.dims, volume: volume.dims });
        }
        if self.study_uid != volume.meta.study_uid || self.series_uid != volume.meta.series_uid {
            return Err(MaskError::UidMismatch {
                mask_study: self.study_uid.clone(),
                mask_series: self.series_uid.clone(),
                study: volume.meta.study_uid.clone(),
                series: volume.meta.series_uid.clone(),
            });
        }
        Ok(())
    }
}

/// Parse mask text and validate it against `volume`.
pub fn load_mask(text: &str, volume: &CtVolume) -> Result<CalciumMask, MaskError> {
    let mask = CalciumMask::parse(text)?;
    mask.validate_against(volume)?;
    Ok(mask)
}

pub fn load_mask_file(path: &Path, volume: &CtVolume) -> Result<CalciumMask, MaskError> {
    let text = fs::read_to_string(path).map_err(|source| MaskError::Io { path: path.into(), source })?;
    load_mask(&text, volume)
}

pub fn write_mask_file(mask: &CalciumMask, path: &Path) -> Result<(), MaskError> {
    let text = mask.serialize()?;
    fs::write(path, text).map_err(|source| MaskError::Io { path: path.into(), source })
}

/// Half-open voxel box `[z0, z1) × [y0, y1) × [x0, x1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoiBox {
    pub z0: usize,
    pub y0: usize,
    pub x0: usize,
    pub z1: usize,
    pub y1: usize,
    pub x1: usize,
}

impl RoiBox {
    pub fn whole(dims: Dims) -> Self {
        Self { z0: 0, y0: 0, x0: 0, z1: dims.slices, y1: dims.rows, x1: dims.cols }
    }

    /// Parse `z0,y0,x0,z1,y1,x1`.
    pub fn parse(text: &str) -> Option<Self> {
        let v: Vec<usize> = text.split(',').map(|s| s.trim().parse().ok()).collect::<Option<_>>()?;
        match v.as_slice() {
            &[z0, y0, x0, z1, y1, x1] => Some(Self { z0, y0, x0, z1, y1, x1 }),
            _ => None,
        }
    }

    fn fits(&self, dims: Dims) -> bool {
        self.z0 <= self.z1
            && self.y0 <= self.y1
            && self.x0 <= self.x1
            && self.z1 <= dims.slices
            && self.y1 <= dims.rows
            && self.x1 <= dims.cols
    }
}

/// Threshold segmenter for tests and smoke runs: every voxel inside `roi`
/// with HU ≥ `threshold`.
pub fn baseline_segment(volume: &CtVolume, roi: RoiBox, threshold: i32) -> Result<CalciumMask, MaskError> {
    let dims = volume.dims;
    if !roi.fits(dims) {
        return Err(MaskError::RoiOutOfBounds { roi, dims });
    }
    let mut runs = Vec::new();
    for z in roi.z0..roi.z1 {
        for y in roi.y0..roi.y1 {
            let row_start = dims.index(z, y, 0);
            let mut x = roi.x0;
            while x < roi.x1 {
                if i32::from(volume.voxels[row_start + x]) >= threshold {
                    let start = x;
                    while x < roi.x1 && i32::from(volume.voxels[row_start + x]) >= threshold {
                        x += 1;
                    }
                    runs.push(Run { start: row_start + start, len: x - start });
                } else {
                    x += 1;
                }
            }
        }
    }
    CalciumMask::for_volume(volume, runs)
}

/// External inference process.
///
/// The runner is invoked as `program args... <volume_dir> <mask_out>`
/// where `volume_dir` holds the volume in the fixture format and the
/// process must write a `CACMASK 1` file to `mask_out`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExternalRunnerConfig {
    pub program: String,
    #[serde(default)]
    pub args: Vec<String>,
}

impl ExternalRunnerConfig {
    /// Split a command line on whitespace.
    pub fn from_command_line(cmd: &str) -> Option<Self> {
        let mut parts = cmd.split_whitespace().map(str::to_owned);
        let program = parts.next()?;
        Some(Self { program, args: parts.collect() })
    }
}

pub fn run_external_model(volume: &CtVolume, runner: &ExternalRunnerConfig) -> Result<CalciumMask, MaskError> {
    let scratch = tempfile::tempdir().map_err(|source| MaskError::Io { path: std::env::temp_dir(), source })?;
    let volume_dir = scratch.path().join("volume");
    let mask_path = scratch.path().join("mask.cacmask");
    write_volume_dir(volume, &volume_dir).map_err(|source| MaskError::Io { path: volume_dir.clone(), source })?;

    let output = Command::new(&runner.program)
        .args(&runner.args)
        .arg(&volume_dir)
        .arg(&mask_path)
        .output()
        .map_err(|e| MaskError::RunnerFailed { status: "spawn failed".into(), diagnostics: e.to_string() })?;
    if !output.status.success() {
        let mut diagnostics = String::from_utf8_lossy(&output.stderr).into_owned();
        if diagnostics.trim().is_empty() {
            diagnostics = String::from_utf8_lossy(&output.stdout).into_owned();
        }
        return Err(MaskError::RunnerFailed { status: output.status.to_string(), diagnostics });
    }

    let text =
        fs::read_to_string(&mask_path).map_err(|e| MaskError::InvalidModelOutput(format!("no mask written: {e}")))?;
    load_mask(&text, volume).map_err(|e| MaskError::InvalidModelOutput(e.to_string()))
}
