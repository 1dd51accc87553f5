//! Agatston scoring from a CT volume and a calcium mask.
//!
//! Candidate voxels are mask voxels at or above the HU threshold. They are
//! grouped into lesions by connected-component labelling; each lesion is
//! then scored slice by slice as `area_mm2 × density_weight`, where the
//! weight comes from the lesion's peak HU on that slice.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::mask::{CalciumMask, CALCIUM_HU};
use crate::volume::{CtVolume, Dims};

#[derive(Debug, Error)]
pub enum ScoringError {
    #[error("mask dims {mask:?} do not match volume dims {volume:?}")]
    DimsMismatch { mask: Dims, volume: Dims },
    #[error("invalid scoring config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Connectivity {
    /// 26-neighbourhood across slices.
    Conn26_3d,
    /// 8-neighbourhood within a slice.
    Conn8_2d,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThicknessNormalization {
    None,
    /// Multiply slice scores by `slice_thickness_mm / 3.0`.
    Ratio3mm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoringConfig {
    pub hu_threshold: i32,
    pub connectivity: Connectivity,
    pub min_slice_area_mm2: f64,
    pub thickness_normalization: ThicknessNormalization,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self {
            hu_threshold: CALCIUM_HU,
            connectivity: Connectivity::Conn26_3d,
            min_slice_area_mm2: 1.0,
            thickness_normalization: ThicknessNormalization::None,
        }
    }
}

impl ScoringConfig {
    pub fn validate(&self) -> Result<(), ScoringError> {
        if self.hu_threshold < 0 {
            return Err(ScoringError::InvalidConfig("hu_threshold must be >= 0".into()));
        }
        if self.min_slice_area_mm2.is_nan() || self.min_slice_area_mm2 < 0.0 {
            return Err(ScoringError::InvalidConfig("min_slice_area_mm2 must be >= 0".into()));
        }
        Ok(())
    }

    /// Short stable hash of the config, stamped on every score record.
    pub fn fingerprint(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        hex::encode(&digest[..8])
    }

    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }
}

/// Agatston density weight for a peak HU; 0 below 130 HU.
pub fn density_weight(peak_hu: i32) -> u32 {
    match peak_hu {
        i32::MIN..=129 => 0,
        130..=199 => 1,
        200..=299 => 2,
        300..=399 => 3,
        _ => 4,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceEntry {
    pub slice_index: usize,
    pub voxel_count: usize,
    pub area_mm2: f64,
    pub peak_hu: i32,
    pub weight: u32,
    pub slice_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lesion {
    pub lesion_id: u32,
    /// Flattened voxel indices, ascending.
    pub voxel_indices: Vec<usize>,
    /// Retained per-slice entries, ascending slice index.
    pub per_slice: Vec<SliceEntry>,
}

impl Lesion {
    fn weighted_voxels(&self) -> u64 {
        self.per_slice.iter().map(|e| e.voxel_count as u64 * u64::from(e.weight)).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CacBin {
    #[serde(rename = "zero")]
    Zero,
    #[serde(rename = "b1_100")]
    B1To100,
    #[serde(rename = "b101_400")]
    B101To400,
    #[serde(rename = "gt400")]
    Gt400,
}

impl CacBin {
    pub const ALL: [CacBin; 4] = [CacBin::Zero, CacBin::B1To100, CacBin::B101To400, CacBin::Gt400];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// Machine label used in records and group labels.
    pub fn as_str(self) -> &'static str {
        match self {
            CacBin::Zero => "zero",
            CacBin::B1To100 => "b1_100",
            CacBin::B101To400 => "b101_400",
            CacBin::Gt400 => "gt400",
        }
    }

    /// Human label as used in tables: `0`, `1-100`, `101-400`, `>400`.
    pub fn label(self) -> &'static str {
        match self {
            CacBin::Zero => "0",
            CacBin::B1To100 => "1-100",
            CacBin::B101To400 => "101-400",
            CacBin::Gt400 => ">400",
        }
    }

    pub fn parse(text: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|b| b.as_str() == text || b.label() == text)
    }
}

impl std::fmt::Display for CacBin {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

pub fn bin_score(rounded: u64) -> CacBin {
    match rounded {
        0 => CacBin::Zero,
        1..=100 => CacBin::B1To100,
        101..=400 => CacBin::B101To400,
        _ => CacBin::Gt400,
    }
}

/// `true` when the rounded score is at or above `threshold`.
pub fn threshold_class(rounded: u64, threshold: u64) -> bool {
    rounded >= threshold
}

/// Round a nonnegative score half-up to an integer.
pub fn round_half_up(score: f64) -> u64 {
    if score <= 0.0 {
        0
    } else {
        (score + 0.5).floor() as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanScore {
    pub study_uid: String,
    pub total: f64,
    pub rounded: u64,
    pub bin: CacBin,
    pub lesions: Vec<Lesion>,
    pub config_fingerprint: String,
}

fn neighbour_offsets(connectivity: Connectivity) -> Vec<(isize, isize, isize)> {
    let dz_range: &[isize] = match connectivity {
        Connectivity::Conn26_3d => &[-1, 0, 1],
        Connectivity::Conn8_2d => &[0],
    };
    let mut offsets = Vec::new();
    for &dz in dz_range {
        for dy in -1..=1 {
            for dx in -1..=1 {
                if (dz, dy, dx) != (0, 0, 0) {
                    offsets.push((dz, dy, dx));
                }
            }
        }
    }
    offsets
}

fn check_dims(volume: &CtVolume, mask: &CalciumMask) -> Result<(), ScoringError> {
    if mask.dims() != volume.dims {
        return Err(ScoringError::DimsMismatch { mask: mask.dims(), volume: volume.dims });
    }
    Ok(())
}

/// Label candidate voxels into lesions and score each lesion per slice.
///
/// Lesion ids follow ascending minimum flattened index among the lesions
/// that keep at least one slice entry.
pub fn extract_lesions(
    volume: &CtVolume,
    mask: &CalciumMask,
    config: &ScoringConfig,
) -> Result<Vec<Lesion>, ScoringError> {
    check_dims(volume, mask)?;
    config.validate()?;
    let dims = volume.dims;
    let threshold = config.hu_threshold;

    // 0 = not a candidate, 1 = unvisited candidate, 2 = visited.
    let mut state = vec![0u8; dims.len()];
    let mut seeds = Vec::new();
    for idx in mask.indices() {
        if i32::from(volume.voxels[idx]) >= threshold {
            state[idx] = 1;
            seeds.push(idx);
        }
    }

    let offsets = neighbour_offsets(config.connectivity);
    let voxel_area = volume.voxel_area_mm2();
    let mut lesions = Vec::new();
    let mut queue = VecDeque::new();

    for seed in seeds {
        if state[seed] != 1 {
            continue;
        }
        state[seed] = 2;
        queue.push_back(seed);
        let mut component = Vec::new();
        while let Some(idx) = queue.pop_front() {
            component.push(idx);
            let (z, y, x) = dims.coords(idx);
            for &(dz, dy, dx) in &offsets {
                let (nz, ny, nx) = (z as isize + dz, y as isize + dy, x as isize + dx);
                if nz < 0 || ny < 0 || nx < 0 {
                    continue;
                }
                let (nz, ny, nx) = (nz as usize, ny as usize, nx as usize);
                if nz >= dims.slices || ny >= dims.rows || nx >= dims.cols {
                    continue;
                }
                let n = dims.index(nz, ny, nx);
                if state[n] == 1 {
                    state[n] = 2;
                    queue.push_back(n);
                }
            }
        }
        component.sort_unstable();

        let mut per_slice: Vec<SliceEntry> = Vec::new();
        let plane = dims.slice_len();
        for &idx in &component {
            let slice_index = idx / plane;
            let hu = i32::from(volume.voxels[idx]);
            match per_slice.last_mut() {
                Some(entry) if entry.slice_index == slice_index => {
                    entry.voxel_count += 1;
                    entry.peak_hu = entry.peak_hu.max(hu);
                }
                _ => per_slice.push(SliceEntry {
                    slice_index,
                    voxel_count: 1,
                    area_mm2: 0.0,
                    peak_hu: hu,
                    weight: 0,
                    slice_score: 0.0,
                }),
            }
        }
        let factor = thickness_factor(volume, config);
        per_slice.retain_mut(|entry| {
            entry.area_mm2 = entry.voxel_count as f64 * voxel_area;
            entry.weight = density_weight(entry.peak_hu);
            entry.slice_score = entry.area_mm2 * f64::from(entry.weight) * factor;
            entry.weight > 0 && entry.area_mm2 >= config.min_slice_area_mm2
        });
        if !per_slice.is_empty() {
            lesions.push(Lesion { lesion_id: lesions.len() as u32 + 1, voxel_indices: component, per_slice });
        }
    }
    Ok(lesions)
}

fn thickness_factor(volume: &CtVolume, config: &ScoringConfig) -> f64 {
    match config.thickness_normalization {
        ThicknessNormalization::None => 1.0,
        ThicknessNormalization::Ratio3mm => volume.slice_thickness_mm / 3.0,
    }
}

/// Scan-level Agatston score.
///
/// The total is accumulated as an integer count of weighted voxels times the
/// voxel area, so it equals the sum of slice scores without any dependence on
/// summation order.
pub fn score_scan(volume: &CtVolume, mask: &CalciumMask, config: &ScoringConfig) -> Result<ScanScore, ScoringError> {
    let lesions = extract_lesions(volume, mask, config)?;
    let weighted: u64 = lesions.iter().map(Lesion::weighted_voxels).sum();
    let total = weighted as f64 * volume.voxel_area_mm2() * thickness_factor(volume, config);
    let rounded = round_half_up(total);
    Ok(ScanScore {
        study_uid: volume.meta.study_uid.clone(),
        total,
        rounded,
        bin: bin_score(rounded),
        lesions,
        config_fingerprint: config.fingerprint(),
    })
}
