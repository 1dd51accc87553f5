//! Survival, agreement and classification statistics.
//!
//! Every function here is pure: the same input gives bit-identical output,
//! including the bootstrap, whose per-iteration random streams are derived
//! from the seed rather than from scheduling order.

pub mod agreement;
pub mod classification;
pub mod survival;

use thiserror::Error;

pub use agreement::{
    bland_altman, bootstrap_ci, correlations, icc_agreement, weighted_kappa, BlandAltman, BootstrapCi,
    BootstrapOptions, Correlations,
};
pub use classification::{
    confusion_matrix, subgroup_evaluate, threshold_metrics, ConfusionMatrix4, SubgroupKey, SubgroupReport,
    ThresholdMetrics,
};
pub use survival::{cox_two_group, km_estimate, obs_from_life_table, CoxFit, KmCurve, LifeTable, SurvivalObs};

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("group has no observations")]
    EmptyGroup,
    #[error("no events in the data")]
    NoEvents,
    #[error("monotone likelihood: {0}")]
    Separation(SeparationKind),
    #[error("rater marginals are degenerate; expected disagreement is zero")]
    DegenerateMarginals,
    #[error("zero variance")]
    ZeroVariance,
    #[error("need at least {need} observations, got {got}")]
    InsufficientData { need: usize, got: usize },
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

/// Direction of an unbounded Cox estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeparationKind {
    /// Comparison group has events but the reference has none: HR → ∞.
    InfiniteHazardRatio,
    /// Comparison group has no events: HR → 0.
    ZeroHazardRatio,
}

impl std::fmt::Display for SeparationKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SeparationKind::InfiniteHazardRatio => f.write_str("hazard ratio is infinite"),
            SeparationKind::ZeroHazardRatio => f.write_str("hazard ratio is zero"),
        }
    }
}
