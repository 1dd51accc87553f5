//! Study metadata, series selection and HU volume loading.
//!
//! Two input routes feed this module. DICOM readers can build
//! [`SeriesMeta`] and [`RawSlice`] values directly; the bundled fixture
//! format is a per-series directory holding a TOML `manifest` plus a
//! `voxels.i16le` file of raw (un-rescaled) little-endian `i16` values in
//! slice-major, row-major order.

use std::cmp::Ordering;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Lowest HU kept after rescale; air and padding values are clamped here.
pub const HU_MIN: i32 = -1024;
/// Highest HU representable in the volume.
pub const HU_MAX: i32 = 32767;

/// File names inside a fixture series directory.
pub const MANIFEST_FILE: &str = "manifest";
pub const VOXELS_FILE: &str = "voxels.i16le";
const TIMESTAMP_FORMAT: &str = "%Y-%m-%dT%H:%M:%S";

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("series {series_uid}: missing mandatory tag `{tag}`")]
    MissingMandatoryTag { series_uid: String, tag: &'static str },
    #[error("unreadable source {path}: {reason}")]
    UnreadableSource { path: PathBuf, reason: String },
    #[error("study {study_uid}: no eligible series")]
    NoEligibleSeries { study_uid: String },
    #[error("candidates span several studies ({first} and {other})")]
    MixedStudies { first: String, other: String },
    #[error("series {series_uid}: inconsistent geometry: {reason}")]
    InconsistentGeometry { series_uid: String, reason: String },
    #[error("series {series_uid}: missing slices between {from_mm} mm and {to_mm} mm")]
    MissingSlices { series_uid: String, from_mm: f64, to_mm: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    Axial,
    NonAxial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Sex {
    M,
    F,
}

impl Sex {
    pub fn as_str(self) -> &'static str {
        match self {
            Sex::M => "M",
            Sex::F => "F",
        }
    }
}

/// Per-series metadata consumed by selection, scoring and subgroup analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesMeta {
    pub study_uid: String,
    pub series_uid: String,
    pub description: String,
    pub orientation: Orientation,
    pub contrast: bool,
    pub slice_thickness_mm: f64,
    #[serde(with = "timestamp")]
    pub acquisition_timestamp: NaiveDateTime,
    pub modality: String,
    pub manufacturer: String,
    pub kvp: Option<f64>,
    pub sex: Option<Sex>,
    pub center_id: String,
}

mod timestamp {
    use super::TIMESTAMP_FORMAT;
    use chrono::NaiveDateTime;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(ts: &NaiveDateTime, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&ts.format(TIMESTAMP_FORMAT).to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<NaiveDateTime, D::Error> {
        let raw = String::deserialize(d)?;
        NaiveDateTime::parse_from_str(&raw, TIMESTAMP_FORMAT).map_err(serde::de::Error::custom)
    }
}

/// Voxel grid shape, index order (slice, row, col).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub slices: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Dims {
    pub fn new(slices: usize, rows: usize, cols: usize) -> Self {
        Self { slices, rows, cols }
    }

    pub fn len(&self) -> usize {
        self.slices * self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn slice_len(&self) -> usize {
        self.rows * self.cols
    }

    #[inline]
    pub fn index(&self, slice: usize, row: usize, col: usize) -> usize {
        (slice * self.rows + row) * self.cols + col
    }

    #[inline]
    pub fn coords(&self, index: usize) -> (usize, usize, usize) {
        let plane = self.slice_len();
        (index / plane, (index % plane) / self.cols, index % self.cols)
    }
}

/// A loaded CT series in Hounsfield units.
#[derive(Debug, Clone, PartialEq)]
pub struct CtVolume {
    pub voxels: Vec<i16>,
    pub dims: Dims,
    /// (row spacing, column spacing) in millimetres.
    pub pixel_spacing_mm: (f64, f64),
    pub slice_thickness_mm: f64,
    pub slice_spacing_mm: f64,
    pub meta: SeriesMeta,
}

impl CtVolume {
    pub fn new(
        voxels: Vec<i16>,
        dims: Dims,
        pixel_spacing_mm: (f64, f64),
        slice_spacing_mm: f64,
        meta: SeriesMeta,
    ) -> Result<Self, IngestError> {
        let bad = |reason: String| IngestError::InconsistentGeometry { series_uid: meta.series_uid.clone(), reason };
        if dims.is_empty() {
            return Err(bad(format!("empty grid {dims:?}")));
        }
        if voxels.len() != dims.len() {
            return Err(bad(format!("{} voxels for grid {:?}", voxels.len(), dims)));
        }
        if !(pixel_spacing_mm.0 > 0.0 && pixel_spacing_mm.1 > 0.0 && slice_spacing_mm > 0.0) {
            return Err(bad("non-positive spacing".into()));
        }
        if voxels.iter().any(|&v| i32::from(v) < HU_MIN) {
            return Err(bad(format!("HU below {HU_MIN}")));
        }
        Ok(Self { voxels, dims, pixel_spacing_mm, slice_thickness_mm: meta.slice_thickness_mm, slice_spacing_mm, meta })
    }

    #[inline]
    pub fn hu(&self, slice: usize, row: usize, col: usize) -> i16 {
        self.voxels[self.dims.index(slice, row, col)]
    }

    pub fn slice(&self, index: usize) -> Option<&[i16]> {
        if index >= self.dims.slices {
            return None;
        }
        let plane = self.dims.slice_len();
        Some(&self.voxels[index * plane..(index + 1) * plane])
    }

    /// In-plane area of one voxel in mm².
    pub fn voxel_area_mm2(&self) -> f64 {
        self.pixel_spacing_mm.0 * self.pixel_spacing_mm.1
    }
}

/// Series selection rules. Defaults follow the conventional CAC protocol
/// window: axial, non-contrast, 2.5–5.0 mm (inclusive) slices, keyword
/// preference cardiac > calcium > lung.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionPolicy {
    pub min_thickness_mm: f64,
    pub max_thickness_mm: f64,
    /// Description keywords in preference order, matched case-insensitively.
    pub keywords: Vec<String>,
}

impl Default for SelectionPolicy {
    fn default() -> Self {
        Self {
            min_thickness_mm: 2.5,
            max_thickness_mm: 5.0,
            keywords: vec!["cardiac".into(), "calcium".into(), "lung".into()],
        }
    }
}

impl SelectionPolicy {
    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn is_eligible(&self, series: &SeriesMeta) -> bool {
        series.orientation == Orientation::Axial
            && !series.contrast
            && series.slice_thickness_mm >= self.min_thickness_mm
            && series.slice_thickness_mm <= self.max_thickness_mm
    }

    /// Keyword tier: index of the first matching keyword, or `keywords.len()`.
    fn tier(&self, series: &SeriesMeta) -> usize {
        let description = series.description.to_lowercase();
        self.keywords.iter().position(|k| description.contains(&k.to_lowercase())).unwrap_or(self.keywords.len())
    }
}

fn protocol_key(description: &str) -> String {
    description.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// Pick the single series to score for a study.
///
/// Filters to eligible series, keeps the best keyword tier, collapses
/// repeated protocols (same normalized description) to the latest
/// acquisition, then breaks remaining ties on the smallest `series_uid`.
/// The result does not depend on candidate order.
pub fn select_series(candidates: &[SeriesMeta], policy: &SelectionPolicy) -> Result<SeriesMeta, IngestError> {
    let Some(first) = candidates.first() else {
        return Err(IngestError::NoEligibleSeries { study_uid: String::new() });
    };
    if let Some(other) = candidates.iter().find(|s| s.study_uid != first.study_uid) {
        return Err(IngestError::MixedStudies { first: first.study_uid.clone(), other: other.study_uid.clone() });
    }

    let eligible: Vec<&SeriesMeta> = candidates.iter().filter(|s| policy.is_eligible(s)).collect();
    let best_tier = eligible
        .iter()
        .map(|s| policy.tier(s))
        .min()
        .ok_or_else(|| IngestError::NoEligibleSeries { study_uid: first.study_uid.clone() })?;

    // Latest acquisition per protocol, ties on smaller series_uid.
    let mut per_protocol: Vec<(String, &SeriesMeta)> = Vec::new();
    for series in eligible.into_iter().filter(|s| policy.tier(s) == best_tier) {
        let key = protocol_key(&series.description);
        match per_protocol.iter_mut().find(|(k, _)| *k == key) {
            Some((_, kept)) => {
                let newer = series
                    .acquisition_timestamp
                    .cmp(&kept.acquisition_timestamp)
                    .then_with(|| kept.series_uid.cmp(&series.series_uid));
                if newer == Ordering::Greater {
                    *kept = series;
                }
            }
            None => per_protocol.push((key, series)),
        }
    }

    let chosen = per_protocol
        .into_iter()
        .map(|(_, s)| s)
        .min_by(|a, b| a.series_uid.cmp(&b.series_uid))
        .expect("best tier is non-empty");
    Ok(chosen.clone())
}

/// One axial slice as delivered by a reader, before rescale.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSlice {
    pub position_mm: f64,
    pub rows: usize,
    pub cols: usize,
    pub pixel_spacing_mm: (f64, f64),
    pub rescale_slope: f64,
    pub rescale_intercept: f64,
    pub data: Vec<i16>,
}

/// Raw pixel input for [`load_volume`].
#[derive(Debug, Clone, PartialEq)]
pub struct PixelSource {
    pub slices: Vec<RawSlice>,
    /// Nominal distance between adjacent slices; gaps beyond 1.5× this fail.
    pub slice_spacing_mm: f64,
}

fn rescale(raw: i16, slope: f64, intercept: f64) -> i16 {
    let hu = (f64::from(raw) * slope + intercept).round();
    hu.clamp(f64::from(HU_MIN), f64::from(HU_MAX)) as i16
}

/// Assemble a volume: sort slices by position, check geometry, rescale to HU.
pub fn load_volume(series: &SeriesMeta, source: &PixelSource) -> Result<CtVolume, IngestError> {
    let bad = |reason: String| IngestError::InconsistentGeometry { series_uid: series.series_uid.clone(), reason };
    let first = source.slices.first().ok_or_else(|| bad("no slices".into()))?;
    if source.slice_spacing_mm.is_nan() || source.slice_spacing_mm <= 0.0 {
        return Err(bad("non-positive slice spacing".into()));
    }
    for s in &source.slices {
        if s.rows != first.rows || s.cols != first.cols {
            return Err(bad(format!(
                "slice at {} mm is {}x{}, expected {}x{}",
                s.position_mm, s.rows, s.cols, first.rows, first.cols
            )));
        }
        if s.pixel_spacing_mm != first.pixel_spacing_mm {
            return Err(bad(format!("pixel spacing differs at {} mm", s.position_mm)));
        }
        if s.data.len() != s.rows * s.cols {
            return Err(bad(format!("slice at {} mm has {} pixels", s.position_mm, s.data.len())));
        }
        if !s.position_mm.is_finite() {
            return Err(bad("non-finite slice position".into()));
        }
    }

    let mut order: Vec<&RawSlice> = source.slices.iter().collect();
    order.sort_by(|a, b| a.position_mm.total_cmp(&b.position_mm));
    for pair in order.windows(2) {
        let gap = pair[1].position_mm - pair[0].position_mm;
        if gap <= 0.0 {
            return Err(bad(format!("duplicate slice position {} mm", pair[0].position_mm)));
        }
        if gap > 1.5 * source.slice_spacing_mm {
            return Err(IngestError::MissingSlices {
                series_uid: series.series_uid.clone(),
                from_mm: pair[0].position_mm,
                to_mm: pair[1].position_mm,
            });
        }
    }

    let dims = Dims::new(order.len(), first.rows, first.cols);
    let mut voxels = Vec::with_capacity(dims.len());
    for s in &order {
        voxels.extend(s.data.iter().map(|&raw| rescale(raw, s.rescale_slope, s.rescale_intercept)));
    }
    CtVolume::new(voxels, dims, first.pixel_spacing_mm, source.slice_spacing_mm, series.clone())
}

// ---------------------------------------------------------------------------
// Fixture format

/// Manifest entry as written on disk; every field optional so that missing
/// tags can be reported by name.
#[derive(Debug, Default, Deserialize)]
struct RawManifest {
    study_uid: Option<String>,
    series_uid: Option<String>,
    description: Option<String>,
    orientation: Option<Orientation>,
    contrast: Option<bool>,
    slice_thickness_mm: Option<f64>,
    acquisition_timestamp: Option<toml::Value>,
    modality: Option<String>,
    manufacturer: Option<String>,
    kvp: Option<f64>,
    sex: Option<Sex>,
    center_id: Option<String>,
    n_slices: Option<usize>,
    n_rows: Option<usize>,
    n_cols: Option<usize>,
    pixel_spacing_mm: Option<[f64; 2]>,
    slice_spacing_mm: Option<f64>,
    rescale_slope: Option<f64>,
    rescale_intercept: Option<f64>,
    slice_positions_mm: Option<Vec<f64>>,
}

#[derive(Debug, Default, Deserialize)]
struct RawManifestList {
    #[serde(default)]
    series: Vec<RawManifest>,
}

/// Geometry and rescale block of a fixture manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct FixtureGeometry {
    pub dims: Dims,
    pub pixel_spacing_mm: (f64, f64),
    pub slice_spacing_mm: f64,
    pub rescale_slope: f64,
    pub rescale_intercept: f64,
    pub slice_positions_mm: Option<Vec<f64>>,
}

impl RawManifest {
    fn into_meta(self) -> Result<(SeriesMeta, Option<FixtureGeometry>), IngestError> {
        let series_uid = self.series_uid.clone().unwrap_or_else(|| "<unknown>".into());
        let missing = |tag: &'static str| IngestError::MissingMandatoryTag { series_uid: series_uid.clone(), tag };
        let study_uid = self.study_uid.ok_or_else(|| missing("study_uid"))?;
        let uid = self.series_uid.ok_or_else(|| missing("series_uid"))?;
        let orientation = self.orientation.ok_or_else(|| missing("orientation"))?;
        let slice_thickness_mm =
            self.slice_thickness_mm.filter(|t| *t > 0.0).ok_or_else(|| missing("slice_thickness_mm"))?;
        let acquisition_timestamp = self
            .acquisition_timestamp
            .and_then(|v| {
                let text = match v {
                    toml::Value::String(s) => s,
                    toml::Value::Datetime(d) => d.to_string(),
                    _ => return None,
                };
                NaiveDateTime::parse_from_str(&text, TIMESTAMP_FORMAT).ok()
            })
            .ok_or_else(|| missing("acquisition_timestamp"))?;

        let meta = SeriesMeta {
            study_uid,
            series_uid: uid,
            description: self.description.unwrap_or_default(),
            orientation,
            contrast: self.contrast.unwrap_or(false),
            slice_thickness_mm,
            acquisition_timestamp,
            modality: self.modality.unwrap_or_default(),
            manufacturer: self.manufacturer.unwrap_or_default(),
            kvp: self.kvp,
            sex: self.sex,
            center_id: self.center_id.unwrap_or_default(),
        };

        let geometry = match (self.n_slices, self.n_rows, self.n_cols) {
            (Some(s), Some(r), Some(c)) => {
                let spacing = self.pixel_spacing_mm.ok_or_else(|| missing("pixel_spacing_mm"))?;
                Some(FixtureGeometry {
                    dims: Dims::new(s, r, c),
                    pixel_spacing_mm: (spacing[0], spacing[1]),
                    slice_spacing_mm: self.slice_spacing_mm.unwrap_or(slice_thickness_mm),
                    rescale_slope: self.rescale_slope.unwrap_or(1.0),
                    rescale_intercept: self.rescale_intercept.unwrap_or(0.0),
                    slice_positions_mm: self.slice_positions_mm,
                })
            }
            _ => None,
        };
        Ok((meta, geometry))
    }
}

fn read_text(path: &Path) -> Result<String, IngestError> {
    fs::read_to_string(path)
        .map_err(|e| IngestError::UnreadableSource { path: path.to_path_buf(), reason: e.to_string() })
}

fn parse_manifest_text(path: &Path, text: &str) -> Result<RawManifest, IngestError> {
    toml::from_str(text).map_err(|e| IngestError::UnreadableSource { path: path.to_path_buf(), reason: e.to_string() })
}

/// Read one series fixture directory: metadata plus geometry.
pub fn read_series_manifest(dir: &Path) -> Result<(SeriesMeta, Option<FixtureGeometry>), IngestError> {
    let path = dir.join(MANIFEST_FILE);
    parse_manifest_text(&path, &read_text(&path)?)?.into_meta()
}

/// Parse metadata for every series of a study.
///
/// `source` is either a study directory whose subdirectories each hold a
/// series `manifest`, or a single TOML file with one `[[series]]` table per
/// series. No filtering happens here.
pub fn parse_study_manifest(source: &Path) -> Result<Vec<SeriesMeta>, IngestError> {
    let unreadable =
        |e: std::io::Error| IngestError::UnreadableSource { path: source.to_path_buf(), reason: e.to_string() };
    if source.is_dir() {
        let mut dirs: Vec<PathBuf> = fs::read_dir(source)
            .map_err(unreadable)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        dirs.sort();
        dirs.iter().map(|d| read_series_manifest(d).map(|(meta, _)| meta)).collect()
    } else {
        let text = read_text(source)?;
        let list: RawManifestList = toml::from_str(&text)
            .map_err(|e| IngestError::UnreadableSource { path: source.to_path_buf(), reason: e.to_string() })?;
        list.series.into_iter().map(|raw| raw.into_meta().map(|(meta, _)| meta)).collect()
    }
}

/// Read the raw pixel data of a fixture series directory.
pub fn read_pixel_source(dir: &Path) -> Result<(SeriesMeta, PixelSource), IngestError> {
    let (meta, geometry) = read_series_manifest(dir)?;
    let geometry = geometry
        .ok_or_else(|| IngestError::MissingMandatoryTag { series_uid: meta.series_uid.clone(), tag: "n_slices" })?;
    let path = dir.join(VOXELS_FILE);
    let bytes =
        fs::read(&path).map_err(|e| IngestError::UnreadableSource { path: path.clone(), reason: e.to_string() })?;
    let dims = geometry.dims;
    if bytes.len() != dims.len() * 2 {
        return Err(IngestError::InconsistentGeometry {
            series_uid: meta.series_uid.clone(),
            reason: format!("{} bytes of voxel data for grid {:?}", bytes.len(), dims),
        });
    }
    let raw: Vec<i16> = bytes.chunks_exact(2).map(|b| i16::from_le_bytes([b[0], b[1]])).collect();
    let positions = match &geometry.slice_positions_mm {
        Some(p) if p.len() == dims.slices => p.clone(),
        Some(p) => {
            return Err(IngestError::InconsistentGeometry {
                series_uid: meta.series_uid.clone(),
                reason: format!("{} slice positions for {} slices", p.len(), dims.slices),
            })
        }
        None => (0..dims.slices).map(|i| i as f64 * geometry.slice_spacing_mm).collect(),
    };
    let plane = dims.slice_len();
    let slices = positions
        .iter()
        .enumerate()
        .map(|(i, &position_mm)| RawSlice {
            position_mm,
            rows: dims.rows,
            cols: dims.cols,
            pixel_spacing_mm: geometry.pixel_spacing_mm,
            rescale_slope: geometry.rescale_slope,
            rescale_intercept: geometry.rescale_intercept,
            data: raw[i * plane..(i + 1) * plane].to_vec(),
        })
        .collect();
    Ok((meta, PixelSource { slices, slice_spacing_mm: geometry.slice_spacing_mm }))
}

/// Load a fixture series directory into an HU volume.
pub fn read_volume_dir(dir: &Path) -> Result<CtVolume, IngestError> {
    let (meta, source) = read_pixel_source(dir)?;
    load_volume(&meta, &source)
}

fn manifest_toml(meta: &SeriesMeta, geometry: &FixtureGeometry) -> String {
    use std::fmt::Write;
    let quote = |s: &str| toml::Value::String(s.to_owned()).to_string();
    let mut out = String::new();
    let _ = writeln!(out, "study_uid = {}", quote(&meta.study_uid));
    let _ = writeln!(out, "series_uid = {}", quote(&meta.series_uid));
    let _ = writeln!(out, "description = {}", quote(&meta.description));
    let orientation = match meta.orientation {
        Orientation::Axial => "axial",
        Orientation::NonAxial => "non_axial",
    };
    let _ = writeln!(out, "orientation = {}", quote(orientation));
    let _ = writeln!(out, "contrast = {}", meta.contrast);
    let _ = writeln!(out, "slice_thickness_mm = {:?}", meta.slice_thickness_mm);
    let ts = meta.acquisition_timestamp.format(TIMESTAMP_FORMAT).to_string();
    let _ = writeln!(out, "acquisition_timestamp = {}", quote(&ts));
    let _ = writeln!(out, "modality = {}", quote(&meta.modality));
    let _ = writeln!(out, "manufacturer = {}", quote(&meta.manufacturer));
    if let Some(kvp) = meta.kvp {
        let _ = writeln!(out, "kvp = {kvp:?}");
    }
    if let Some(sex) = meta.sex {
        let _ = writeln!(out, "sex = {}", quote(sex.as_str()));
    }
    let _ = writeln!(out, "center_id = {}", quote(&meta.center_id));
    let d = geometry.dims;
    let _ = writeln!(out, "n_slices = {}\nn_rows = {}\nn_cols = {}", d.slices, d.rows, d.cols);
    let (r, c) = geometry.pixel_spacing_mm;
    let _ = writeln!(out, "pixel_spacing_mm = [{r:?}, {c:?}]");
    let _ = writeln!(out, "slice_spacing_mm = {:?}", geometry.slice_spacing_mm);
    let _ = writeln!(out, "rescale_slope = {:?}", geometry.rescale_slope);
    let _ = writeln!(out, "rescale_intercept = {:?}", geometry.rescale_intercept);
    out
}

/// Write a volume in the fixture format (slope 1, intercept 0).
pub fn write_volume_dir(volume: &CtVolume, dir: &Path) -> std::io::Result<()> {
    fs::create_dir_all(dir)?;
    let geometry = FixtureGeometry {
        dims: volume.dims,
        pixel_spacing_mm: volume.pixel_spacing_mm,
        slice_spacing_mm: volume.slice_spacing_mm,
        rescale_slope: 1.0,
        rescale_intercept: 0.0,
        slice_positions_mm: None,
    };
    fs::write(dir.join(MANIFEST_FILE), manifest_toml(&volume.meta, &geometry))?;
    let mut bytes = Vec::with_capacity(volume.voxels.len() * 2);
    for v in &volume.voxels {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(dir.join(VOXELS_FILE), bytes)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use chrono::NaiveDate;

    pub(crate) fn meta(series_uid: &str, description: &str, thickness: f64) -> SeriesMeta {
        SeriesMeta {
            study_uid: "study-1".into(),
            series_uid: series_uid.into(),
            description: description.into(),
            orientation: Orientation::Axial,
            contrast: false,
            slice_thickness_mm: thickness,
            acquisition_timestamp: NaiveDate::from_ymd_opt(2019, 3, 4).unwrap().and_hms_opt(10, 0, 0).unwrap(),
            modality: "CT".into(),
            manufacturer: "GE".into(),
            kvp: Some(120.0),
            sex: Some(Sex::M),
            center_id: "c1".into(),
        }
    }

    #[test]
    fn keyword_series_wins() {
        let picked =
            select_series(&[meta("2", "ABDOMEN", 3.0), meta("1", "LUNG", 3.0)], &SelectionPolicy::default()).unwrap();
        assert_eq!(picked.description, "LUNG");
    }

    #[test]
    fn thin_slices_are_ineligible() {
        let err = select_series(&[meta("1", "LUNG", 1.25)], &SelectionPolicy::default());
        assert!(matches!(err, Err(IngestError::NoEligibleSeries { .. })));
    }

    #[test]
    fn thickness_bounds_inclusive() {
        let policy = SelectionPolicy::default();
        assert!(policy.is_eligible(&meta("1", "x", 2.5)));
        assert!(policy.is_eligible(&meta("1", "x", 5.0)));
        assert!(!policy.is_eligible(&meta("1", "x", 5.01)));
    }

    #[test]
    fn repeated_protocol_keeps_latest() {
        let early = meta("a", "LUNG 3MM", 3.0);
        let mut late = meta("b", "LUNG 3MM", 3.0);
        late.acquisition_timestamp += chrono::Duration::minutes(5);
        let picked = select_series(&[late.clone(), early], &SelectionPolicy::default()).unwrap();
        assert_eq!(picked.series_uid, "b");
    }

    #[test]
    fn keyword_order_ranks_cardiac_first() {
        let picked = select_series(
            &[meta("1", "LUNG", 3.0), meta("2", "Cardiac score", 3.0), meta("3", "calcium", 3.0)],
            &SelectionPolicy::default(),
        )
        .unwrap();
        assert_eq!(picked.series_uid, "2");
    }

    #[test]
    fn contrast_and_non_axial_filtered() {
        let mut contrast = meta("1", "LUNG", 3.0);
        contrast.contrast = true;
        let mut sagittal = meta("2", "LUNG", 3.0);
        sagittal.orientation = Orientation::NonAxial;
        let err = select_series(&[contrast, sagittal], &SelectionPolicy::default());
        assert!(matches!(err, Err(IngestError::NoEligibleSeries { .. })));
    }

    #[test]
    fn mixed_studies_rejected() {
        let mut other = meta("2", "LUNG", 3.0);
        other.study_uid = "study-2".into();
        let err = select_series(&[meta("1", "LUNG", 3.0), other], &SelectionPolicy::default());
        assert!(matches!(err, Err(IngestError::MixedStudies { .. })));
    }

    fn raw_slices(n: usize, spacing: f64) -> PixelSource {
        PixelSource {
            slices: (0..n)
                .map(|i| RawSlice {
                    position_mm: i as f64 * spacing,
                    rows: 2,
                    cols: 2,
                    pixel_spacing_mm: (0.7, 0.7),
                    rescale_slope: 1.0,
                    rescale_intercept: -1024.0,
                    data: vec![1154 + i as i16; 4],
                })
                .collect(),
            slice_spacing_mm: spacing,
        }
    }

    #[test]
    fn rescale_applied() {
        let volume = load_volume(&meta("1", "LUNG", 3.0), &raw_slices(1, 3.0)).unwrap();
        assert_eq!(volume.voxels, vec![130; 4]);
    }

    #[test]
    fn rescale_clamps_padding() {
        assert_eq!(rescale(-2000, 1.0, -1024.0), -1024);
        assert_eq!(rescale(i16::MAX, 2.0, 0.0), i16::MAX);
    }

    #[test]
    fn shuffled_slices_load_identically() {
        let ordered = raw_slices(6, 3.0);
        let mut shuffled = ordered.clone();
        shuffled.slices.reverse();
        shuffled.slices.swap(1, 4);
        let m = meta("1", "LUNG", 3.0);
        assert_eq!(load_volume(&m, &ordered).unwrap(), load_volume(&m, &shuffled).unwrap());
    }

    #[test]
    fn position_gap_is_missing_slices() {
        let mut source = raw_slices(10, 3.0);
        for s in source.slices.iter_mut().skip(5) {
            s.position_mm += 6.0; // one gap of 3× spacing
        }
        let err = load_volume(&meta("1", "LUNG", 3.0), &source);
        assert!(matches!(err, Err(IngestError::MissingSlices { .. })));
    }

    #[test]
    fn mismatched_slice_shape_rejected() {
        let mut source = raw_slices(3, 3.0);
        source.slices[1].cols = 3;
        source.slices[1].data = vec![0; 6];
        let err = load_volume(&meta("1", "LUNG", 3.0), &source);
        assert!(matches!(err, Err(IngestError::InconsistentGeometry { .. })));
    }

    #[test]
    fn study_dir_with_three_series() {
        let dir = tempfile::tempdir().unwrap();
        for (i, desc) in ["LUNG", "ABDOMEN", "SCOUT"].iter().enumerate() {
            let volume =
                CtVolume::new(vec![0; 8], Dims::new(2, 2, 2), (0.7, 0.7), 3.0, meta(&format!("s{i}"), desc, 3.0))
                    .unwrap();
            write_volume_dir(&volume, &dir.path().join(format!("s{i}"))).unwrap();
        }
        let series = parse_study_manifest(dir.path()).unwrap();
        assert_eq!(series.len(), 3);
        let volume = read_volume_dir(&dir.path().join("s1")).unwrap();
        assert_eq!(volume.meta.description, "ABDOMEN");
        assert_eq!(volume.dims, Dims::new(2, 2, 2));
    }

    #[test]
    fn missing_thickness_names_series() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("study.toml");
        fs::write(
            &path,
            r#"
[[series]]
study_uid = "st"
series_uid = "good"
orientation = "axial"
slice_thickness_mm = 3.0
acquisition_timestamp = "2020-01-01T00:00:00"
modality = "CT"

[[series]]
study_uid = "st"
series_uid = "bad-series"
orientation = "axial"
acquisition_timestamp = "2020-01-01T00:00:00"
modality = "PT"
"#,
        )
        .unwrap();
        match parse_study_manifest(&path) {
            Err(IngestError::MissingMandatoryTag { series_uid, tag }) => {
                assert_eq!(series_uid, "bad-series");
                assert_eq!(tag, "slice_thickness_mm");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn mixed_modalities_parse_unfiltered() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("study.toml");
        fs::write(
            &path,
            r#"
[[series]]
study_uid = "st"
series_uid = "a"
orientation = "axial"
slice_thickness_mm = 3.0
acquisition_timestamp = "2020-01-01T00:00:00"
modality = "CT"

[[series]]
study_uid = "st"
series_uid = "b"
orientation = "non_axial"
contrast = true
slice_thickness_mm = 1.0
acquisition_timestamp = 2020-01-01T00:05:00
modality = "PT"
"#,
        )
        .unwrap();
        let series = parse_study_manifest(&path).unwrap();
        assert_eq!(series.len(), 2);
        assert_eq!(series[1].modality, "PT");
    }

    #[test]
    fn unreadable_source_reported() {
        let err = parse_study_manifest(Path::new("/nonexistent/study.toml"));
        assert!(matches!(err, Err(IngestError::UnreadableSource { .. })));
    }
}
