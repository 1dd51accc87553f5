//! Agreement statistics: weighted kappa with bootstrap intervals, ICC,
//! correlation coefficients and Bland-Altman limits.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::classification::ConfusionMatrix4;
use super::StatsError;

/// Linearly weighted Cohen's kappa, disagreement weights `|i − j| / 3`.
pub fn weighted_kappa(matrix: &ConfusionMatrix4) -> Result<f64, StatsError> {
    let total = matrix.total();
    if total == 0 {
        return Err(StatsError::InsufficientData { need: 1, got: 0 });
    }
    let n = total as f64;
    let rows = matrix.row_totals();
    let cols = matrix.col_totals();
    let (mut observed, mut expected) = (0.0, 0.0);
    for i in 0..4usize {
        for j in 0..4 {
            let w = i.abs_diff(j) as f64 / 3.0;
            observed += w * matrix.counts[i][j] as f64;
            expected += w * rows[i] as f64 * cols[j] as f64 / n;
        }
    }
    if expected == 0.0 {
        return Err(StatsError::DegenerateMarginals);
    }
    Ok(1.0 - observed / expected)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapOptions {
    pub iterations: usize,
    pub seed: u64,
    pub level: f64,
}

impl Default for BootstrapOptions {
    fn default() -> Self {
        Self { iterations: 1000, seed: 0, level: 0.95 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCi {
    pub lo: f64,
    pub hi: f64,
    /// Replicates on which the statistic was defined.
    pub defined: usize,
}

/// Linear-interpolation quantile of sorted values.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Percentile bootstrap interval for `statistic` over resampled `data`.
///
/// Replicate `i` draws from a ChaCha stream selected by `i` under the
/// given seed, so results do not depend on thread scheduling. Replicates
/// where the statistic is undefined are skipped.
pub fn bootstrap_ci<T, F>(data: &[T], statistic: F, options: BootstrapOptions) -> Result<BootstrapCi, StatsError>
where
    T: Clone + Sync,
    F: Fn(&[T]) -> Option<f64> + Sync,
{
    if data.len() < 2 {
        return Err(StatsError::InsufficientData { need: 2, got: data.len() });
    }
    if !(options.level > 0.0 && options.level < 1.0) || options.iterations == 0 {
        return Err(StatsError::InvalidInput("bootstrap level must be in (0,1) with ≥1 iteration".into()));
    }
    let n = data.len();
    let mut replicates: Vec<f64> = (0..options.iterations)
        .into_par_iter()
        .filter_map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
            rng.set_stream(i as u64);
            let sample: Vec<T> = (0..n).map(|_| data[rng.gen_range(0..n)].clone()).collect();
            statistic(&sample)
        })
        .collect();
    if replicates.is_empty() {
        return Err(StatsError::InvalidInput("statistic undefined on every replicate".into()));
    }
    replicates.sort_by(f64::total_cmp);
    let alpha = (1.0 - options.level) / 2.0;
    Ok(BootstrapCi {
        lo: quantile(&replicates, alpha),
        hi: quantile(&replicates, 1.0 - alpha),
        defined: replicates.len(),
    })
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, count) = values.fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    sum / count as f64
}

/// Two-way ICC for absolute agreement of single measurements, two raters.
pub fn icc_agreement(pairs: &[(f64, f64)]) -> Result<f64, StatsError> {
    let n = pairs.len();
    if n < 3 {
        return Err(StatsError::InsufficientData { need: 3, got: n });
    }
    let k = 2.0;
    let nf = n as f64;
    let grand = mean(pairs.iter().flat_map(|&(x, y)| [x, y]));
    let mean_x = mean(pairs.iter().map(|p| p.0));
    let mean_y = mean(pairs.iter().map(|p| p.1));

    let ss_rows: f64 = pairs.iter().map(|&(x, y)| k * ((x + y) / 2.0 - grand).powi(2)).sum();
    let ss_cols = nf * ((mean_x - grand).powi(2) + (mean_y - grand).powi(2));
    let ss_total: f64 = pairs.iter().map(|&(x, y)| (x - grand).powi(2) + (y - grand).powi(2)).sum();
    let ss_error = ss_total - ss_rows - ss_cols;

    let ms_rows = ss_rows / (nf - 1.0);
    let ms_cols = ss_cols / (k - 1.0);
    let ms_error = ss_error / ((nf - 1.0) * (k - 1.0));

    let denominator = ms_rows + (k - 1.0) * ms_error + k * (ms_cols - ms_error) / nf;
    if ss_total == 0.0 || denominator == 0.0 {
        return Err(StatsError::ZeroVariance);
    }
    Ok((ms_rows - ms_error) / denominator)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlations {
    pub pearson: f64,
    pub spearman: f64,
}

fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64, StatsError> {
    let mx = mean(xs.iter().copied());
    let my = mean(ys.iter().copied());
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx).powi(2);
        syy += (y - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(StatsError::ZeroVariance);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson and Spearman (average-rank) coefficients on raw values.
pub fn correlations(pairs: &[(f64, f64)]) -> Result<Correlations, StatsError> {
    if pairs.len() < 3 {
        return Err(StatsError::InsufficientData { need: 3, got: pairs.len() });
    }
    let xs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    Ok(Correlations { pearson: pearson(&xs, &ys)?, spearman: pearson(&average_ranks(&xs), &average_ranks(&ys))? })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlandAltmanPoint {
    pub mean: f64,
    pub diff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlandAltman {
    pub n: usize,
    pub mean_diff: f64,
    /// Sample standard deviation of `y − x`.
    pub sd_diff: f64,
    pub lower: f64,
    pub upper: f64,
    pub points: Vec<BlandAltmanPoint>,
}

/// Mean difference and 1.96·SD limits of agreement for `y − x`.
pub fn bland_altman(pairs: &[(f64, f64)]) -> Result<BlandAltman, StatsError> {
    let n = pairs.len();
    if n < 2 {
        return Err(StatsError::InsufficientData { need: 2, got: n });
    }
    let points: Vec<BlandAltmanPoint> =
        pairs.iter().map(|&(x, y)| BlandAltmanPoint { mean: (x + y) / 2.0, diff: y - x }).collect();
    let mean_diff = mean(points.iter().map(|p| p.diff));
    let var = points.iter().map(|p| (p.diff - mean_diff).powi(2)).sum::<f64>() / (n as f64 - 1.0);
    let sd_diff = var.sqrt();
    Ok(BlandAltman {
        n,
        mean_diff,
        sd_diff,
        lower: mean_diff - 1.96 * sd_diff,
        upper: mean_diff + 1.96 * sd_diff,
        points,
    })
}
