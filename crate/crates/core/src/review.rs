//! Cardiologist review workflow.
//!
//! High-score studies are sampled into a queue; reviewers pull items one at
//! a time, look at the mask-positive slices and record one verdict per
//! study. All state changes go through an append-only newline-delimited
//! log, and the in-memory state is always a replay of that log.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{DateTime, Utc};
use image::{Rgb, RgbImage};
use parking_lot::{Mutex, RwLock};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::agatston::CacBin;
use crate::mask::CalciumMask;
use crate::volume::CtVolume;

pub const LOG_FILE: &str = "review_log.jsonl";
pub const OVERLAY_ALPHA: f64 = 0.4;
pub const OVERLAY_COLOR: [u8; 3] = [255, 0, 0];

#[derive(Debug, Error)]
pub enum ReviewError {
    #[error("queue is empty")]
    QueueEmpty,
    #[error("unknown queue {0}")]
    UnknownQueue(String),
    #[error("unknown item {0}")]
    UnknownItem(String),
    #[error("unknown reviewer {0:?}")]
    UnknownReviewer(String),
    #[error("item {item_id} is not assigned to {reviewer_id}")]
    NotAssigned { item_id: String, reviewer_id: String },
    #[error("item {0} already has a verdict")]
    AlreadyVerdicted(String),
    #[error("item {0} has no verdict to amend")]
    NoVerdict(String),
    #[error("sample of {requested} requested from {available} eligible studies")]
    SampleTooLarge { requested: usize, available: usize },
    #[error("slice {index} out of range for {slices} slices")]
    SliceOutOfRange { index: usize, slices: usize },
    #[error("window width must be positive, got {0}")]
    InvalidWindow(f64),
    #[error("unknown study {0}")]
    UnknownStudy(String),
    #[error("review log: {0}")]
    Log(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Correct,
    Uncertain,
    Incorrect,
}

/// A reviewable study: only mask-positive studies qualify.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewCandidate {
    pub study_uid: String,
    pub ai_score: u64,
    pub bin: CacBin,
    pub positive_slice_indices: Vec<usize>,
}

/// Which studies a queue draws from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviewFilter {
    Bins(BTreeSet<CacBin>),
    /// Inclusive range on the rounded score.
    Range(u64, u64),
}

impl ReviewFilter {
    pub fn matches(&self, candidate: &ReviewCandidate) -> bool {
        match self {
            ReviewFilter::Bins(bins) => bins.contains(&candidate.bin),
            ReviewFilter::Range(lo, hi) => (*lo..=*hi).contains(&candidate.ai_score),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewItem {
    pub item_id: String,
    pub study_uid: String,
    pub positive_slice_indices: Vec<usize>,
    pub ai_score: u64,
    pub bin: CacBin,
    pub assigned_reviewer: Option<String>,
    pub verdict: Option<Verdict>,
    pub verdict_time: Option<DateTime<Utc>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewQueue {
    pub queue_id: String,
    pub filter: ReviewFilter,
    pub seed: u64,
    pub items: Vec<ReviewItem>,
}

/// Seeded uniform sample without replacement; queue order is the random
/// draw order. Candidates are canonicalized by study uid first so the
/// result does not depend on input order.
pub fn sample_for_review(
    scored: &[ReviewCandidate],
    filter: &ReviewFilter,
    n: usize,
    seed: u64,
) -> Result<ReviewQueue, ReviewError> {
    let mut eligible: Vec<&ReviewCandidate> =
        scored.iter().filter(|c| !c.positive_slice_indices.is_empty() && filter.matches(c)).collect();
    eligible.sort_by(|a, b| a.study_uid.cmp(&b.study_uid));
    eligible.dedup_by(|a, b| a.study_uid == b.study_uid);
    if n > eligible.len() {
        return Err(ReviewError::SampleTooLarge { requested: n, available: eligible.len() });
    }

    let queue_id = queue_id(filter, n, seed, &eligible);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let items = index::sample(&mut rng, eligible.len(), n)
        .into_iter()
        .enumerate()
        .map(|(pos, i)| {
            let c = eligible[i];
            ReviewItem {
                item_id: format!("{queue_id}-{pos:05}"),
                study_uid: c.study_uid.clone(),
                positive_slice_indices: c.positive_slice_indices.clone(),
                ai_score: c.ai_score,
                bin: c.bin,
                assigned_reviewer: None,
                verdict: None,
                verdict_time: None,
            }
        })
        .collect();
    Ok(ReviewQueue { queue_id, filter: filter.clone(), seed, items })
}

fn queue_id(filter: &ReviewFilter, n: usize, seed: u64, eligible: &[&ReviewCandidate]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(serde_json::to_vec(filter).expect("filter serializes"));
    hasher.update(n.to_le_bytes());
    hasher.update(seed.to_le_bytes());
    for c in eligible {
        hasher.update(c.study_uid.as_bytes());
        hasher.update([0]);
    }
    format!("q{}", hex::encode(&hasher.finalize()[..6]))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReviewSummary {
    pub n_reviewed: usize,
    pub n_correct: usize,
    pub n_uncertain: usize,
    pub n_incorrect: usize,
    /// `None` when nothing has been reviewed.
    pub proportion_correct: Option<f64>,
}

pub fn review_summary(queue: &ReviewQueue) -> ReviewSummary {
    let mut s = ReviewSummary { n_reviewed: 0, n_correct: 0, n_uncertain: 0, n_incorrect: 0, proportion_correct: None };
    for verdict in queue.items.iter().filter_map(|i| i.verdict) {
        s.n_reviewed += 1;
        match verdict {
            Verdict::Correct => s.n_correct += 1,
            Verdict::Uncertain => s.n_uncertain += 1,
            Verdict::Incorrect => s.n_incorrect += 1,
        }
    }
    if s.n_reviewed > 0 {
        s.proportion_correct = Some(s.n_correct as f64 / s.n_reviewed as f64);
    }
    s
}

/// Display window in HU.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowLevel {
    pub center: f64,
    pub width: f64,
}

impl Default for WindowLevel {
    fn default() -> Self {
        Self { center: 90.0, width: 750.0 }
    }
}

impl WindowLevel {
    pub fn gray(&self, hu: i16) -> u8 {
        let lo = self.center - self.width / 2.0;
        ((f64::from(hu) - lo) / self.width * 255.0).round().clamp(0.0, 255.0) as u8
    }
}

/// Window one slice to 8-bit gray (as RGB), optionally blending the mask
/// in [`OVERLAY_COLOR`] at [`OVERLAY_ALPHA`].
pub fn render_slice(
    volume: &CtVolume,
    mask: &CalciumMask,
    slice_index: usize,
    window: WindowLevel,
    overlay: bool,
) -> Result<RgbImage, ReviewError> {
    if window.width.is_nan() || window.width <= 0.0 {
        return Err(ReviewError::InvalidWindow(window.width));
    }
    let slices = volume.dims.slices;
    let hu = volume.slice(slice_index).ok_or(ReviewError::SliceOutOfRange { index: slice_index, slices })?;
    let (rows, cols) = (volume.dims.rows, volume.dims.cols);
    let offset = slice_index * volume.dims.slice_len();
    let blend = |g: u8, c: u8| (f64::from(g) * (1.0 - OVERLAY_ALPHA) + f64::from(c) * OVERLAY_ALPHA).round() as u8;
    Ok(RgbImage::from_fn(cols as u32, rows as u32, |x, y| {
        let i = y as usize * cols + x as usize;
        let g = window.gray(hu[i]);
        if overlay && mask.contains(offset + i) {
            Rgb([blend(g, OVERLAY_COLOR[0]), blend(g, OVERLAY_COLOR[1]), blend(g, OVERLAY_COLOR[2])])
        } else {
            Rgb([g, g, g])
        }
    }))
}

pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>, ReviewError> {
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png).map_err(|e| ReviewError::Io(std::io::Error::other(e)))?;
    Ok(out.into_inner())
}

/// Supplies volumes and masks for rendering.
pub trait SliceSource: Send + Sync {
    fn load(&self, study_uid: &str) -> Result<(Arc<CtVolume>, Arc<CalciumMask>), ReviewError>;
}

/// In-memory slice source.
#[derive(Default)]
pub struct MemorySlices {
    studies: HashMap<String, (Arc<CtVolume>, Arc<CalciumMask>)>,
}

impl MemorySlices {
    pub fn insert(&mut self, volume: CtVolume, mask: CalciumMask) {
        self.studies.insert(volume.meta.study_uid.clone(), (Arc::new(volume), Arc::new(mask)));
    }
}

impl SliceSource for MemorySlices {
    fn load(&self, study_uid: &str) -> Result<(Arc<CtVolume>, Arc<CalciumMask>), ReviewError> {
        self.studies.get(study_uid).cloned().ok_or_else(|| ReviewError::UnknownStudy(study_uid.to_owned()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    QueueCreated { queue: ReviewQueue },
    Assigned { item_id: String, reviewer_id: String },
    Verdict { item_id: String, reviewer_id: String, verdict: Verdict, time: DateTime<Utc> },
    Correction { item_id: String, reviewer_id: String, verdict: Verdict, time: DateTime<Utc> },
}

#[derive(Debug, Clone, Default)]
struct ReviewState {
    queues: BTreeMap<String, ReviewQueue>,
    items: HashMap<String, (String, usize)>,
}

impl ReviewState {
    fn item_mut(&mut self, item_id: &str) -> Result<&mut ReviewItem, ReviewError> {
        let (queue, pos) = self.items.get(item_id).ok_or_else(|| ReviewError::UnknownItem(item_id.to_owned()))?;
        Ok(&mut self.queues.get_mut(queue).expect("indexed queue exists").items[*pos])
    }

    fn item(&self, item_id: &str) -> Result<&ReviewItem, ReviewError> {
        let (queue, pos) = self.items.get(item_id).ok_or_else(|| ReviewError::UnknownItem(item_id.to_owned()))?;
        Ok(&self.queues[queue].items[*pos])
    }

    fn apply(&mut self, record: &LogRecord) -> Result<(), ReviewError> {
        match record {
            LogRecord::QueueCreated { queue } => {
                for (pos, item) in queue.items.iter().enumerate() {
                    self.items.insert(item.item_id.clone(), (queue.queue_id.clone(), pos));
                }
                self.queues.insert(queue.queue_id.clone(), queue.clone());
            }
            LogRecord::Assigned { item_id, reviewer_id } => {
                self.item_mut(item_id)?.assigned_reviewer = Some(reviewer_id.clone());
            }
            LogRecord::Verdict { item_id, verdict, time, .. }
            | LogRecord::Correction { item_id, verdict, time, .. } => {
                let item = self.item_mut(item_id)?;
                item.verdict = Some(*verdict);
                item.verdict_time = Some(*time);
            }
        }
        Ok(())
    }
}

struct LogWriter {
    file: Option<File>,
}

impl LogWriter {
    fn append(&mut self, record: &LogRecord) -> Result<(), ReviewError> {
        if let Some(file) = self.file.as_mut() {
            let mut line = serde_json::to_vec(record).map_err(|e| ReviewError::Log(e.to_string()))?;
            line.push(b'\n');
            file.write_all(&line)?;
            file.flush()?;
        }
        Ok(())
    }
}

/// Acknowledgement returned for a recorded verdict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictAck {
    pub item_id: String,
    pub verdict: Verdict,
    pub time: DateTime<Utc>,
}

/// Concurrent review service. Writes are serialized through one critical
/// section that appends to the log before publishing a new state snapshot;
/// readers only clone the current snapshot.
pub struct ReviewService {
    pool: Vec<ReviewCandidate>,
    reviewers: Option<BTreeSet<String>>,
    slices: Box<dyn SliceSource>,
    state: RwLock<Arc<ReviewState>>,
    writer: Mutex<LogWriter>,
    log_path: Option<PathBuf>,
}

impl ReviewService {
    /// Service without persistence.
    pub fn in_memory(pool: Vec<ReviewCandidate>, slices: Box<dyn SliceSource>) -> Self {
        Self {
            pool,
            reviewers: None,
            slices,
            state: RwLock::new(Arc::new(ReviewState::default())),
            writer: Mutex::new(LogWriter { file: None }),
            log_path: None,
        }
    }

    /// Open (or create) the log in `dir` and replay it.
    pub fn open(dir: &Path, pool: Vec<ReviewCandidate>, slices: Box<dyn SliceSource>) -> Result<Self, ReviewError> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(LOG_FILE);
        let state = if path.exists() { replay(&read_log(&path)?)? } else { ReviewState::default() };
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(Self {
            pool,
            reviewers: None,
            slices,
            state: RwLock::new(Arc::new(state)),
            writer: Mutex::new(LogWriter { file: Some(file) }),
            log_path: Some(path),
        })
    }

    /// Restrict reviewers to a registered set.
    pub fn with_reviewers(mut self, reviewers: impl IntoIterator<Item = String>) -> Self {
        self.reviewers = Some(reviewers.into_iter().collect());
        self
    }

    pub fn log_path(&self) -> Option<&Path> {
        self.log_path.as_deref()
    }

    fn snapshot(&self) -> Arc<ReviewState> {
        self.state.read().clone()
    }

    fn check_reviewer(&self, reviewer_id: &str) -> Result<(), ReviewError> {
        let known = match &self.reviewers {
            Some(set) => set.contains(reviewer_id),
            None => !reviewer_id.trim().is_empty(),
        };
        if known {
            Ok(())
        } else {
            Err(ReviewError::UnknownReviewer(reviewer_id.to_owned()))
        }
    }

    /// Run `f` inside the single-writer section. `f` validates against the
    /// current state and returns the records to append plus a result.
    fn write<T>(
        &self,
        f: impl FnOnce(&ReviewState) -> Result<(Vec<LogRecord>, T), ReviewError>,
    ) -> Result<T, ReviewError> {
        let mut writer = self.writer.lock();
        let current = self.snapshot();
        let (records, out) = f(&current)?;
        if records.is_empty() {
            return Ok(out);
        }
        let mut next = (*current).clone();
        for record in &records {
            next.apply(record)?;
        }
        for record in &records {
            writer.append(record)?;
        }
        *self.state.write() = Arc::new(next);
        Ok(out)
    }

    /// Sample a queue from the candidate pool. Re-creating a queue with the
    /// same parameters returns the existing id.
    pub fn create_queue(&self, filter: &ReviewFilter, n: usize, seed: u64) -> Result<String, ReviewError> {
        let queue = sample_for_review(&self.pool, filter, n, seed)?;
        self.write(|state| {
            let id = queue.queue_id.clone();
            if state.queues.contains_key(&id) {
                Ok((vec![], id))
            } else {
                Ok((vec![LogRecord::QueueCreated { queue }], id))
            }
        })
    }

    pub fn queue(&self, queue_id: &str) -> Result<ReviewQueue, ReviewError> {
        self.snapshot().queues.get(queue_id).cloned().ok_or_else(|| ReviewError::UnknownQueue(queue_id.to_owned()))
    }

    /// The reviewer's pending item, or the first unassigned unverdicted item.
    pub fn next_item(&self, queue_id: &str, reviewer_id: &str) -> Result<ReviewItem, ReviewError> {
        self.check_reviewer(reviewer_id)?;
        self.write(|state| {
            let queue = state.queues.get(queue_id).ok_or_else(|| ReviewError::UnknownQueue(queue_id.to_owned()))?;
            if let Some(item) =
                queue.items.iter().find(|i| i.verdict.is_none() && i.assigned_reviewer.as_deref() == Some(reviewer_id))
            {
                return Ok((vec![], item.clone()));
            }
            let item = queue
                .items
                .iter()
                .find(|i| i.verdict.is_none() && i.assigned_reviewer.is_none())
                .ok_or(ReviewError::QueueEmpty)?;
            let mut assigned = item.clone();
            assigned.assigned_reviewer = Some(reviewer_id.to_owned());
            let record = LogRecord::Assigned { item_id: item.item_id.clone(), reviewer_id: reviewer_id.to_owned() };
            Ok((vec![record], assigned))
        })
    }

    pub fn post_verdict(&self, item_id: &str, reviewer_id: &str, verdict: Verdict) -> Result<VerdictAck, ReviewError> {
        self.check_reviewer(reviewer_id)?;
        self.write(|state| {
            let item = state.item(item_id)?;
            if item.assigned_reviewer.as_deref() != Some(reviewer_id) {
                return Err(ReviewError::NotAssigned {
                    item_id: item_id.to_owned(),
                    reviewer_id: reviewer_id.to_owned(),
                });
            }
            if item.verdict.is_some() {
                return Err(ReviewError::AlreadyVerdicted(item_id.to_owned()));
            }
            let time = Utc::now();
            let record =
                LogRecord::Verdict { item_id: item_id.to_owned(), reviewer_id: reviewer_id.to_owned(), verdict, time };
            Ok((vec![record], VerdictAck { item_id: item_id.to_owned(), verdict, time }))
        })
    }

    /// Append a correction for an already verdicted item; the latest record wins.
    pub fn amend_verdict(&self, item_id: &str, reviewer_id: &str, verdict: Verdict) -> Result<VerdictAck, ReviewError> {
        self.check_reviewer(reviewer_id)?;
        self.write(|state| {
            let item = state.item(item_id)?;
            if item.assigned_reviewer.as_deref() != Some(reviewer_id) {
                return Err(ReviewError::NotAssigned {
                    item_id: item_id.to_owned(),
                    reviewer_id: reviewer_id.to_owned(),
                });
            }
            if item.verdict.is_none() {
                return Err(ReviewError::NoVerdict(item_id.to_owned()));
            }
            let time = Utc::now();
            let record = LogRecord::Correction {
                item_id: item_id.to_owned(),
                reviewer_id: reviewer_id.to_owned(),
                verdict,
                time,
            };
            Ok((vec![record], VerdictAck { item_id: item_id.to_owned(), verdict, time }))
        })
    }

    pub fn summary(&self, queue_id: &str) -> Result<ReviewSummary, ReviewError> {
        Ok(review_summary(&self.queue(queue_id)?))
    }

    pub fn render(
        &self,
        study_uid: &str,
        slice_index: usize,
        window: WindowLevel,
        overlay: bool,
    ) -> Result<RgbImage, ReviewError> {
        let (volume, mask) = self.slices.load(study_uid)?;
        render_slice(&volume, &mask, slice_index, window, overlay)
    }
}

pub fn read_log(path: &Path) -> Result<Vec<LogRecord>, ReviewError> {
    let reader = BufReader::new(File::open(path)?);
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(&line) {
            Ok(r) => records.push(r),
            // A torn final line from a crash mid-append is dropped.
            Err(_) if i + 1 == count_lines(path)? => break,
            Err(e) => return Err(ReviewError::Log(format!("line {}: {e}", i + 1))),
        }
    }
    Ok(records)
}

fn count_lines(path: &Path) -> Result<usize, ReviewError> {
    Ok(BufReader::new(File::open(path)?).lines().count())
}

fn replay(records: &[LogRecord]) -> Result<ReviewState, ReviewError> {
    let mut state = ReviewState::default();
    for r in records {
        state.apply(r)?;
    }
    Ok(state)
}

/// Rebuild every queue's summary from a log alone.
pub fn summaries_from_log(records: &[LogRecord]) -> Result<BTreeMap<String, ReviewSummary>, ReviewError> {
    let state = replay(records)?;
    Ok(state.queues.iter().map(|(id, q)| (id.clone(), review_summary(q))).collect())
}
