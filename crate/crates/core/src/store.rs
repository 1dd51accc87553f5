//! The on-disk score store.
//!
//! ```text
//! <store>/
//!   manifest.json            root seed, derived seeds, per-stage fingerprints
//!   volumes/<study_uid>/     canonical ingested volumes (fixture format)
//!   masks/<study_uid>.mask   run-length calcium masks
//!   records/<kind>.jsonl     append-only records, each stamped with the
//!                            fingerprint of the configuration that made it
//!   exclusions.jsonl         studies dropped by a stage, with reasons
//!   review/                  reviewer verdict log
//!   reports/                 derived report bundles (rewritten per run)
//! ```
//!
//! Record files are only ever appended to. A stage rerun with an unchanged
//! fingerprint finds its records already present and appends nothing; a
//! changed configuration appends a new generation, and readers select the
//! generation matching the current fingerprint.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use parking_lot::Mutex;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::mask::{load_mask_file, CalciumMask};
use crate::review::{ReviewError, SliceSource};
use crate::volume::{read_volume_dir, CtVolume};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const EXCLUSIONS_FILE: &str = "exclusions.jsonl";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {reason}")]
    Corrupt { path: PathBuf, line: usize, reason: String },
    #[error("store was created with seed {stored}, not {requested}")]
    SeedMismatch { stored: u64, requested: u64 },
    #[error("store format version {0} is not supported")]
    UnsupportedVersion(u32),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io { path: path.to_path_buf(), source }
}

/// Record file names under `records/`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RecordKind {
    Series,
    Masks,
    Scores,
    Extractions,
    Pairs,
    Tune,
    Test,
    SurvivalRows,
}

impl RecordKind {
    pub fn file_name(self) -> &'static str {
        match self {
            RecordKind::Series => "series.jsonl",
            RecordKind::Masks => "masks.jsonl",
            RecordKind::Scores => "scores.jsonl",
            RecordKind::Extractions => "extractions.jsonl",
            RecordKind::Pairs => "pairs.jsonl",
            RecordKind::Tune => "tune.jsonl",
            RecordKind::Test => "test.jsonl",
            RecordKind::SurvivalRows => "survival_rows.jsonl",
        }
    }
}

/// A record with the fingerprint of the configuration that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stamped<T> {
    pub fingerprint: String,
    pub record: T,
}

/// A study dropped by a stage.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Exclusion {
    pub stage: String,
    pub study_uid: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreManifest {
    pub format_version: u32,
    pub root_seed: u64,
    /// Seeds derived from the root seed, by purpose.
    #[serde(default)]
    pub seeds: BTreeMap<String, u64>,
    /// Fingerprint of the last completed run of each stage.
    #[serde(default)]
    pub stages: BTreeMap<String, String>,
}

/// Derive an independent seed for `purpose` from the root seed.
pub fn derive_seed(root: u64, purpose: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(purpose.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Short hex digest over a sequence of labelled parts.
pub fn fingerprint(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex::encode(&h.finalize()[..8])
}

pub struct ScoreStore {
    root: PathBuf,
    manifest: Mutex<StoreManifest>,
    /// Serializes appends across threads.
    append_lock: Mutex<()>,
}

impl ScoreStore {
    /// Open an existing store or create a new one. A new store without an
    /// explicit seed gets seed 0.
    pub fn open(root: &Path, seed: Option<u64>) -> Result<Self, StoreError> {
        for sub in ["volumes", "masks", "records", "review", "reports"] {
            let dir = root.join(sub);
            fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        }
        let path = root.join(MANIFEST_FILE);
        let manifest = if path.exists() {
            let text = fs::read_to_string(&path).map_err(io_err(&path))?;
            let m: StoreManifest = serde_json::from_str(&text).map_err(|e| StoreError::Corrupt {
                path: path.clone(),
                line: 1,
                reason: e.to_string(),
            })?;
            if m.format_version != FORMAT_VERSION {
                return Err(StoreError::UnsupportedVersion(m.format_version));
            }
            if let Some(requested) = seed.filter(|s| *s != m.root_seed) {
                return Err(StoreError::SeedMismatch { stored: m.root_seed, requested });
            }
            m
        } else {
            StoreManifest {
                format_version: FORMAT_VERSION,
                root_seed: seed.unwrap_or(0),
                seeds: BTreeMap::new(),
                stages: BTreeMap::new(),
            }
        };
        let store = Self { root: root.to_path_buf(), manifest: Mutex::new(manifest), append_lock: Mutex::new(()) };
        store.save_manifest()?;
        Ok(store)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> StoreManifest {
        self.manifest.lock().clone()
    }

    pub fn root_seed(&self) -> u64 {
        self.manifest.lock().root_seed
    }

    /// Derived seed for `purpose`, recorded in the manifest.
    pub fn seed_for(&self, purpose: &str) -> Result<u64, StoreError> {
        let seed = {
            let mut m = self.manifest.lock();
            let seed = derive_seed(m.root_seed, purpose);
            m.seeds.insert(purpose.to_owned(), seed);
            seed
        };
        self.save_manifest()?;
        Ok(seed)
    }

    pub fn stage_fingerprint(&self, stage: &str) -> Option<String> {
        self.manifest.lock().stages.get(stage).cloned()
    }

    pub fn set_stage_fingerprint(&self, stage: &str, fingerprint: &str) -> Result<(), StoreError> {
        self.manifest.lock().stages.insert(stage.to_owned(), fingerprint.to_owned());
        self.save_manifest()
    }

    fn save_manifest(&self) -> Result<(), StoreError> {
        let text = serde_json::to_string_pretty(&*self.manifest.lock()).expect("manifest serializes") + "\n";
        write_atomic(&self.root.join(MANIFEST_FILE), text.as_bytes())
    }

    pub fn volume_dir(&self, study_uid: &str) -> PathBuf {
        self.root.join("volumes").join(sanitize(study_uid))
    }

    pub fn mask_path(&self, study_uid: &str) -> PathBuf {
        self.root.join("masks").join(format!("{}.mask", sanitize(study_uid)))
    }

    pub fn review_dir(&self) -> PathBuf {
        self.root.join("review")
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn records_path(&self, kind: RecordKind) -> PathBuf {
        self.root.join("records").join(kind.file_name())
    }

    pub fn load_volume(&self, study_uid: &str) -> Result<CtVolume, crate::volume::IngestError> {
        read_volume_dir(&self.volume_dir(study_uid))
    }

    /// Append records stamped with `fingerprint`, in the given order.
    pub fn append<T: Serialize>(&self, kind: RecordKind, fingerprint: &str, records: &[T]) -> Result<(), StoreError> {
        #[derive(Serialize)]
        struct Out<'a, T> {
            fingerprint: &'a str,
            record: &'a T,
        }
        let lines: Vec<Out<T>> = records.iter().map(|record| Out { fingerprint, record }).collect();
        self.append_lines(&self.records_path(kind), &lines)
    }

    fn append_lines<T: Serialize>(&self, path: &Path, records: &[T]) -> Result<(), StoreError> {
        if records.is_empty() {
            return Ok(());
        }
        let mut buf = Vec::new();
        for r in records {
            serde_json::to_writer(&mut buf, r).expect("record serializes");
            buf.push(b'\n');
        }
        let _guard = self.append_lock.lock();
        let mut file = OpenOptions::new().create(true).append(true).open(path).map_err(io_err(path))?;
        file.write_all(&buf).map_err(io_err(path))?;
        file.flush().map_err(io_err(path))
    }

    /// Every record of `kind`, all generations.
    pub fn read_all<T: DeserializeOwned>(&self, kind: RecordKind) -> Result<Vec<Stamped<T>>, StoreError> {
        read_lines(&self.records_path(kind))
    }

    /// Records of the generation stamped `fingerprint`.
    pub fn read<T: DeserializeOwned>(&self, kind: RecordKind, fingerprint: &str) -> Result<Vec<T>, StoreError> {
        Ok(self.read_all::<T>(kind)?.into_iter().filter(|s| s.fingerprint == fingerprint).map(|s| s.record).collect())
    }

    /// Records of the most recently appended generation.
    pub fn read_latest<T: DeserializeOwned>(&self, kind: RecordKind) -> Result<(Option<String>, Vec<T>), StoreError> {
        let all = self.read_all::<T>(kind)?;
        let Some(latest) = all.last().map(|s| s.fingerprint.clone()) else {
            return Ok((None, vec![]));
        };
        let records = all.into_iter().filter(|s| s.fingerprint == latest).map(|s| s.record).collect();
        Ok((Some(latest), records))
    }

    pub fn has_generation(&self, kind: RecordKind, fingerprint: &str) -> Result<bool, StoreError> {
        let path = self.records_path(kind);
        if !path.exists() {
            return Ok(false);
        }
        let needle = format!("{{\"fingerprint\":\"{fingerprint}\"");
        let reader = BufReader::new(File::open(&path).map_err(io_err(&path))?);
        for line in reader.lines() {
            if line.map_err(io_err(&path))?.starts_with(&needle) {
                return Ok(true);
            }
        }
        Ok(false)
    }

    pub fn log_exclusions(&self, fingerprint: &str, exclusions: &[Exclusion]) -> Result<(), StoreError> {
        let lines: Vec<Stamped<&Exclusion>> =
            exclusions.iter().map(|record| Stamped { fingerprint: fingerprint.to_owned(), record }).collect();
        self.append_lines(&self.root.join(EXCLUSIONS_FILE), &lines)
    }

    pub fn exclusions(&self) -> Result<Vec<Stamped<Exclusion>>, StoreError> {
        read_lines(&self.root.join(EXCLUSIONS_FILE))
    }

    /// Exclusions logged by `stage` under `fingerprint`.
    pub fn stage_exclusions(&self, stage: &str, fingerprint: &str) -> Result<Vec<Exclusion>, StoreError> {
        Ok(self
            .exclusions()?
            .into_iter()
            .filter(|s| s.fingerprint == fingerprint && s.record.stage == stage)
            .map(|s| s.record)
            .collect())
    }

    /// Write a file under `reports/`, replacing any previous version.
    pub fn write_report(&self, relative: &str, bytes: &[u8]) -> Result<PathBuf, StoreError> {
        let path = self.reports_dir().join(relative);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        write_atomic(&path, bytes)?;
        Ok(path)
    }
}

fn read_lines<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, StoreError> {
    if !path.exists() {
        return Ok(vec![]);
    }
    let reader = BufReader::new(File::open(path).map_err(io_err(path))?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| StoreError::Corrupt {
            path: path.to_path_buf(),
            line: i + 1,
            reason: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Write via a temporary sibling and rename, so readers never see a torn file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let tmp = path.with_extension("tmp~");
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// Study uids become directory names; keep them filesystem-safe.
fn sanitize(uid: &str) -> String {
    uid.chars().map(|c| if c.is_ascii_alphanumeric() || matches!(c, '.' | '-' | '_') { c } else { '_' }).collect()
}

type LoadedStudy = (Arc<CtVolume>, Arc<CalciumMask>);

/// Slice source backed by a store's volumes and masks, with a small cache.
pub struct StoreSlices {
    store_root: PathBuf,
    cache: Mutex<HashMap<String, LoadedStudy>>,
}

impl StoreSlices {
    pub fn new(store: &ScoreStore) -> Self {
        Self { store_root: store.root.clone(), cache: Mutex::new(HashMap::new()) }
    }
}

impl SliceSource for StoreSlices {
    fn load(&self, study_uid: &str) -> Result<(Arc<CtVolume>, Arc<CalciumMask>), ReviewError> {
        if let Some(hit) = self.cache.lock().get(study_uid) {
            return Ok(hit.clone());
        }
        let dir = self.store_root.join("volumes").join(sanitize(study_uid));
        if !dir.exists() {
            return Err(ReviewError::UnknownStudy(study_uid.to_owned()));
        }
        let volume = read_volume_dir(&dir).map_err(|e| ReviewError::Log(e.to_string()))?;
        let mask_path = self.store_root.join("masks").join(format!("{}.mask", sanitize(study_uid)));
        let mask = load_mask_file(&mask_path, &volume).map_err(|e| ReviewError::Log(e.to_string()))?;
        let entry = (Arc::new(volume), Arc::new(mask));
        let mut cache = self.cache.lock();
        if cache.len() >= 64 {
            cache.clear();
        }
        cache.insert(study_uid.to_owned(), entry.clone());
        Ok(entry)
    }
}
