//! Kaplan-Meier estimation and two-group Cox regression.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use super::{SeparationKind, StatsError};
use crate::cohort::SurvivalRow;

/// One right-censored observation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurvivalObs {
    pub time: f64,
    pub event: bool,
}

impl From<&SurvivalRow> for SurvivalObs {
    fn from(row: &SurvivalRow) -> Self {
        Self { time: row.duration_days as f64, event: row.event }
    }
}

/// Number-at-risk table row. `censored` and `events` are cumulative counts
/// strictly before `time`; `at_risk` counts subjects with time ≥ `time`,
/// so the three always sum to the group size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AtRiskRow {
    pub time: f64,
    pub at_risk: usize,
    pub censored: usize,
    pub events: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KmCurve {
    pub n: usize,
    /// 0 followed by each distinct event time.
    pub times: Vec<f64>,
    /// Survival just after each entry of `times`; `survival[0] = 1`.
    pub survival: Vec<f64>,
    pub table: Vec<AtRiskRow>,
}

impl KmCurve {
    /// S(t), right-continuous step function.
    pub fn survival_at(&self, t: f64) -> f64 {
        let idx = self.times.partition_point(|&x| x <= t);
        if idx == 0 {
            1.0
        } else {
            self.survival[idx - 1]
        }
    }

    /// 1 − S at the last event time.
    pub fn final_event_fraction(&self) -> f64 {
        1.0 - self.survival.last().copied().unwrap_or(1.0)
    }
}

/// Product-limit estimate. Subjects censored at an event time stay in
/// that event's risk set.
pub fn km_estimate(obs: &[SurvivalObs], grid: &[f64]) -> Result<KmCurve, StatsError> {
    if obs.is_empty() {
        return Err(StatsError::EmptyGroup);
    }
    if let Some(bad) = obs.iter().find(|o| o.time.is_nan() || o.time < 0.0) {
        return Err(StatsError::InvalidInput(format!("duration {} is negative", bad.time)));
    }
    let mut sorted = obs.to_vec();
    sorted.sort_by(|a, b| a.time.total_cmp(&b.time));

    let n = sorted.len();
    let mut times = vec![0.0];
    let mut survival = vec![1.0];
    let mut s = 1.0;
    let mut i = 0;
    while i < n {
        let t = sorted[i].time;
        let at_risk = n - i;
        let mut deaths = 0usize;
        let mut j = i;
        while j < n && sorted[j].time == t {
            deaths += usize::from(sorted[j].event);
            j += 1;
        }
        if deaths > 0 {
            s *= 1.0 - deaths as f64 / at_risk as f64;
            if t == 0.0 {
                survival[0] = s;
            } else {
                times.push(t);
                survival.push(s);
            }
        }
        i = j;
    }

    let table = grid
        .iter()
        .map(|&t| {
            let before = sorted.partition_point(|o| o.time < t);
            let events = sorted[..before].iter().filter(|o| o.event).count();
            AtRiskRow { time: t, at_risk: n - before, censored: before - events, events }
        })
        .collect();

    Ok(KmCurve { n, times, survival, table })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoxFit {
    pub log_hr: f64,
    pub hr: f64,
    pub se: f64,
    pub wald_z: f64,
    pub p_value: f64,
    pub converged: bool,
    pub iterations: u32,
    pub log_likelihood: f64,
}

/// Risk-set summary at one distinct event time.
struct TieBlock {
    /// At risk in the reference / comparison group.
    n0: f64,
    n1: f64,
    /// Events in the reference / comparison group at this time.
    e0: f64,
    e1: f64,
}

fn tie_blocks(reference: &[SurvivalObs], comparison: &[SurvivalObs]) -> Vec<TieBlock> {
    let mut all: Vec<(f64, bool, bool)> = reference
        .iter()
        .map(|o| (o.time, o.event, false))
        .chain(comparison.iter().map(|o| (o.time, o.event, true)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));

    let total1 = comparison.len() as f64;
    let total0 = reference.len() as f64;
    let (mut gone0, mut gone1) = (0.0, 0.0);
    let mut blocks = Vec::new();
    let mut i = 0;
    while i < all.len() {
        let t = all[i].0;
        let (mut e0, mut e1, mut c0, mut c1) = (0.0, 0.0, 0.0, 0.0);
        while i < all.len() && all[i].0 == t {
            match (all[i].1, all[i].2) {
                (true, false) => e0 += 1.0,
                (true, true) => e1 += 1.0,
                (false, false) => c0 += 1.0,
                (false, true) => c1 += 1.0,
            }
            i += 1;
        }
        if e0 + e1 > 0.0 {
            blocks.push(TieBlock { n0: total0 - gone0, n1: total1 - gone1, e0, e1 });
        }
        gone0 += e0 + c0;
        gone1 += e1 + c1;
    }
    blocks
}

/// Efron log partial likelihood with its score and information at `beta`.
fn efron(blocks: &[TieBlock], beta: f64) -> (f64, f64, f64) {
    let r = beta.exp();
    let (mut ll, mut score, mut info) = (0.0, 0.0, 0.0);
    for b in blocks {
        let d = b.e0 + b.e1;
        ll += b.e1 * beta;
        score += b.e1;
        let deaths = d as usize;
        for l in 0..deaths {
            let f = l as f64 / d;
            let s0 = (b.n0 - f * b.e0) + (b.n1 - f * b.e1) * r;
            let s1 = (b.n1 - f * b.e1) * r;
            let m = s1 / s0;
            ll -= s0.ln();
            score -= m;
            info += m * (1.0 - m);
        }
    }
    (ll, score, info)
}

/// With a binary covariate the partial likelihood increases without bound
/// in β exactly when every event occurring while comparison subjects are at
/// risk is a comparison event (and symmetrically for β → −∞). Zero events
/// in one group is the simplest instance.
fn monotone_likelihood(blocks: &[TieBlock]) -> Option<SeparationKind> {
    if blocks.iter().all(|b| b.n1 == 0.0 || b.e0 == 0.0) {
        Some(SeparationKind::InfiniteHazardRatio)
    } else if blocks.iter().all(|b| b.n0 == 0.0 || b.e1 == 0.0) {
        Some(SeparationKind::ZeroHazardRatio)
    } else {
        None
    }
}

const MAX_ITERATIONS: u32 = 50;
const LL_TOLERANCE: f64 = 1e-9;
const STEP_TOLERANCE: f64 = 1e-10;

/// Univariate Cox model with a binary covariate (1 = `comparison`).
///
/// Newton-Raphson on the Efron partial likelihood with step halving
/// whenever a step lowers the likelihood.
pub fn cox_two_group(reference: &[SurvivalObs], comparison: &[SurvivalObs]) -> Result<CoxFit, StatsError> {
    if reference.is_empty() || comparison.is_empty() {
        return Err(StatsError::EmptyGroup);
    }
    let events0 = reference.iter().filter(|o| o.event).count();
    let events1 = comparison.iter().filter(|o| o.event).count();
    match (events0, events1) {
        (0, 0) => return Err(StatsError::NoEvents),
        (0, _) => return Err(StatsError::Separation(SeparationKind::InfiniteHazardRatio)),
        (_, 0) => return Err(StatsError::Separation(SeparationKind::ZeroHazardRatio)),
        _ => {}
    }

    let blocks = tie_blocks(reference, comparison);
    if let Some(kind) = monotone_likelihood(&blocks) {
        return Err(StatsError::Separation(kind));
    }
    let mut beta = 0.0;
    let (mut ll, mut score, mut info) = efron(&blocks, beta);
    let mut converged = false;
    let mut iterations = 0;
    while iterations < MAX_ITERATIONS {
        iterations += 1;
        if info <= 0.0 {
            break;
        }
        let mut step = score / info;
        let (mut next_ll, mut next_score, mut next_info);
        loop {
            (next_ll, next_score, next_info) = efron(&blocks, beta + step);
            // Near the optimum likelihood differences are rounding noise;
            // don't let them veto a Newton step.
            if next_ll >= ll - 1e-12 * (1.0 + ll.abs()) || step.abs() < 1e-12 {
                break;
            }
            step /= 2.0;
        }
        beta += step;
        let delta = (next_ll - ll).abs();
        (ll, score, info) = (next_ll, next_score, next_info);
        if delta < LL_TOLERANCE && step.abs() < STEP_TOLERANCE {
            converged = true;
            break;
        }
    }
    if beta.abs() > 30.0 {
        let kind = if beta > 0.0 { SeparationKind::InfiniteHazardRatio } else { SeparationKind::ZeroHazardRatio };
        return Err(StatsError::Separation(kind));
    }

    let se = 1.0 / info.sqrt();
    let wald_z = beta / se;
    Ok(CoxFit {
        log_hr: beta,
        hr: beta.exp(),
        se,
        wald_z,
        p_value: erfc(wald_z.abs() / std::f64::consts::SQRT_2).clamp(0.0, 1.0),
        converged,
        iterations,
        log_likelihood: ll,
    })
}

/// Observations of one labelled group.
pub fn group_obs(rows: &[SurvivalRow], label: &str) -> Vec<SurvivalObs> {
    rows.iter().filter(|r| r.group_label == label).map(SurvivalObs::from).collect()
}

/// A published number-at-risk table: at-risk counts and cumulative
/// censored / event counts at each grid time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LifeTable {
    pub grid: Vec<f64>,
    pub at_risk: Vec<u64>,
    pub censored: Vec<u64>,
    pub events: Vec<u64>,
}

/// Rebuild individual observations from a life table. In each interval the
/// drop in the at-risk count is split into censorings (the growth of the
/// cumulative censored column, clamped to the drop) and events (the rest),
/// each placed at evenly spaced interior times `lo + (k+1)·(hi−lo)/(m+1)`.
/// Subjects still at risk at the last grid time are censored there.
///
/// The cumulative event column is not used for the split: published tables
/// are often internally inconsistent, and the at-risk drop is the one
/// quantity that fixes the group size.
pub fn obs_from_life_table(table: &LifeTable) -> Result<Vec<SurvivalObs>, StatsError> {
    let n = table.grid.len();
    if n < 2 || table.at_risk.len() != n || table.censored.len() != n || table.events.len() != n {
        return Err(StatsError::InvalidInput("life table columns must match a grid of at least two times".into()));
    }
    if table.grid.windows(2).any(|w| w[1].is_nan() || w[1] <= w[0]) {
        return Err(StatsError::InvalidInput("life table grid must be strictly increasing".into()));
    }
    let mut obs = Vec::with_capacity(table.at_risk[0] as usize);
    for i in 0..n - 1 {
        let (lo, hi) = (table.grid[i], table.grid[i + 1]);
        let drop = table.at_risk[i]
            .checked_sub(table.at_risk[i + 1])
            .ok_or_else(|| StatsError::InvalidInput(format!("at-risk count increases between {lo} and {hi}")))?;
        let censored = table.censored[i + 1].saturating_sub(table.censored[i]).min(drop);
        for (m, event) in [(censored, false), (drop - censored, true)] {
            for k in 0..m {
                obs.push(SurvivalObs { time: lo + (k + 1) as f64 * (hi - lo) / (m + 1) as f64, event });
            }
        }
    }
    let last = table.grid[n - 1];
    obs.extend((0..table.at_risk[n - 1]).map(|_| SurvivalObs { time: last, event: false }));
    Ok(obs)
}
