//! Opportunistic coronary artery calcium (CAC) quantification toolkit.
//!
//! The crate covers everything downstream of a segmentation model:
//! series triage and volume loading, calcium mask interchange, Agatston
//! scoring, reference-score extraction from gated CT reports, cohort
//! construction, agreement and survival statistics, the cardiologist
//! review workflow, and the on-disk score store used by the `cac` CLI.

pub mod agatston;
pub mod cohort;
pub mod inputs;
pub mod mask;
pub mod pipeline;
pub mod report;
pub mod review;
pub mod stats;
pub mod store;
pub mod summary;
pub mod synth;
pub mod volume;

pub use agatston::{bin_score, score_scan, threshold_class, CacBin, ScanScore, ScoringConfig};
pub use mask::CalciumMask;
pub use volume::{CtVolume, SeriesMeta};
