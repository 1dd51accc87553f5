//! Dichotomous threshold metrics, 4×4 bin confusion matrices and
//! subgroup tables.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::StatsError;
use crate::agatston::{threshold_class, CacBin};
use crate::volume::SeriesMeta;

/// Confusion cells and derived metrics; `None` marks a zero denominator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdMetrics {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
    pub accuracy: Option<f64>,
    pub ppv: Option<f64>,
    pub npv: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub f1: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

impl ThresholdMetrics {
    pub fn from_cells(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        Self {
            tp,
            fp,
            fn_,
            tn,
            accuracy: ratio(tp + tn, tp + fp + fn_ + tn),
            ppv: ratio(tp, tp + fp),
            npv: ratio(tn, tn + fn_),
            sensitivity: ratio(tp, tp + fn_),
            specificity: ratio(tn, tn + fp),
            f1: ratio(2 * tp, 2 * tp + fp + fn_),
        }
    }

    pub fn n(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn reference_positive(&self) -> u64 {
        self.tp + self.fn_
    }

    pub fn predicted_positive(&self) -> u64 {
        self.tp + self.fp
    }

    /// Metrics in table column order: accuracy, PPV, NPV, sensitivity,
    /// specificity, F1.
    pub fn as_row(&self) -> [Option<f64>; 6] {
        [self.accuracy, self.ppv, self.npv, self.sensitivity, self.specificity, self.f1]
    }
}

/// Dichotomize (reference, predicted) rounded scores at `threshold` with
/// the reference as truth.
pub fn threshold_metrics(pairs: &[(u64, u64)], threshold: u64) -> Result<ThresholdMetrics, StatsError> {
    if pairs.is_empty() {
        return Err(StatsError::InsufficientData { need: 1, got: 0 });
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for &(reference, predicted) in pairs {
        match (threshold_class(reference, threshold), threshold_class(predicted, threshold)) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (true, false) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    Ok(ThresholdMetrics::from_cells(tp, fp, fn_, tn))
}

/// Rows are the reference bin, columns the predicted bin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix4 {
    pub counts: [[u64; 4]; 4],
}

impl ConfusionMatrix4 {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..4).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_totals(&self) -> [u64; 4] {
        self.counts.map(|row| row.iter().sum())
    }

    pub fn col_totals(&self) -> [u64; 4] {
        let mut cols = [0; 4];
        for row in &self.counts {
            for (j, c) in row.iter().enumerate() {
                cols[j] += c;
            }
        }
        cols
    }

    /// Exact-bin agreement, trace / total.
    pub fn percent_agreement(&self) -> Option<f64> {
        ratio(self.trace(), self.total()).map(|r| 100.0 * r)
    }

    pub fn transpose(&self) -> Self {
        let mut counts = [[0; 4]; 4];
        for i in 0..4 {
            for j in 0..4 {
                counts[j][i] = self.counts[i][j];
            }
        }
        Self { counts }
    }
}

pub fn confusion_matrix(pairs: &[(CacBin, CacBin)]) -> Result<ConfusionMatrix4, StatsError> {
    if pairs.is_empty() {
        return Err(StatsError::InsufficientData { need: 1, got: 0 });
    }
    let mut m = ConfusionMatrix4::default();
    for &(reference, predicted) in pairs {
        m.counts[reference.index()][predicted.index()] += 1;
    }
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubgroupKey {
    Manufacturer,
    Sex,
    Kvp,
}

impl SubgroupKey {
    pub fn as_str(self) -> &'static str {
        match self {
            SubgroupKey::Manufacturer => "manufacturer",
            SubgroupKey::Sex => "sex",
            SubgroupKey::Kvp => "kvp",
        }
    }

    pub fn parse(text: &str) -> Option<Self> {
        match text.trim() {
            "manufacturer" => Some(Self::Manufacturer),
            "sex" => Some(Self::Sex),
            "kvp" => Some(Self::Kvp),
            _ => None,
        }
    }

    fn partition(self, meta: &SeriesMeta) -> String {
        match self {
            SubgroupKey::Manufacturer => {
                let m = meta.manufacturer.trim();
                if m.is_empty() {
                    "unknown".into()
                } else {
                    m.to_owned()
                }
            }
            SubgroupKey::Sex => meta.sex.map_or("unknown", |s| s.as_str()).to_owned(),
            SubgroupKey::Kvp => match meta.kvp {
                Some(120.0) => "120".into(),
                Some(_) => "non_120".into(),
                None => "unknown".into(),
            },
        }
    }

    /// Partitions the table should always show.
    fn expected(self) -> &'static [&'static str] {
        match self {
            SubgroupKey::Manufacturer => &[],
            SubgroupKey::Sex => &["M", "F"],
            SubgroupKey::Kvp => &["120", "non_120"],
        }
    }
}

/// One evaluation pair with the non-gated series metadata.
#[derive(Debug, Clone, Copy)]
pub struct SubgroupPair<'a> {
    pub reference_rounded: u64,
    pub predicted_rounded: u64,
    pub meta: &'a SeriesMeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupRow {
    pub key: SubgroupKey,
    pub value: String,
    pub threshold: u64,
    pub metrics: ThresholdMetrics,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SubgroupReport {
    pub rows: Vec<SubgroupRow>,
    /// Expected partitions that had no pairs.
    pub coverage_notes: Vec<String>,
}

/// Per-partition threshold metrics. kVp splits into 120 vs everything else.
pub fn subgroup_evaluate(
    pairs: &[SubgroupPair<'_>],
    keys: &[SubgroupKey],
    thresholds: &[u64],
) -> Result<SubgroupReport, StatsError> {
    let mut report = SubgroupReport::default();
    for &key in keys {
        let mut partitions: BTreeMap<String, Vec<(u64, u64)>> = BTreeMap::new();
        for p in pairs {
            partitions.entry(key.partition(p.meta)).or_default().push((p.reference_rounded, p.predicted_rounded));
        }
        for expected in key.expected() {
            if !partitions.contains_key(*expected) {
                report.coverage_notes.push(format!("{}={} has no pairs; omitted", key.as_str(), expected));
            }
        }
        for (value, members) in &partitions {
            for &threshold in thresholds {
                report.rows.push(SubgroupRow {
                    key,
                    value: value.clone(),
                    threshold,
                    metrics: threshold_metrics(members, threshold)?,
                });
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::tests::meta;

    #[test]
    fn perfect_predictions() {
        let pairs: Vec<(u64, u64)> = [0, 5, 150, 900].iter().map(|&s| (s, s)).collect();
        let m = threshold_metrics(&pairs, 100).unwrap();
        assert!(m.as_row().iter().all(|v| *v == Some(1.0)));
    }

    #[test]
    fn men_1_cells() {
        let m = ThresholdMetrics::from_cells(571, 25, 47, 106);
        let pct = |v: Option<f64>| (v.unwrap() * 1000.0).round() / 10.0;
        assert_eq!(m.as_row().map(pct), [90.4, 95.8, 69.3, 92.4, 80.9, 94.1]);
    }

    #[test]
    fn all_negative_predictions() {
        let pairs = [(0, 0), (0, 0), (0, 0), (5, 0)];
        let m = threshold_metrics(&pairs, 1).unwrap();
        assert_eq!(m.sensitivity, Some(0.0));
        assert_eq!(m.npv, Some(0.75));
        assert_eq!(m.ppv, None, "no predicted positives: undefined, not zero");
    }

    #[test]
    fn confusion_basics() {
        let same = [(CacBin::Zero, CacBin::Zero), (CacBin::Gt400, CacBin::Gt400)];
        let m = confusion_matrix(&same).unwrap();
        assert_eq!(m.trace(), m.total());
        assert_eq!(m.percent_agreement(), Some(100.0));
        let corner = confusion_matrix(&[(CacBin::Zero, CacBin::Gt400)]).unwrap();
        assert_eq!(corner.counts[0][3], 1);
        assert_eq!(corner.total(), 1);
    }

    #[test]
    fn kvp_partition_and_coverage() {
        let mut a = meta("a", "LUNG", 3.0);
        a.kvp = Some(120.0);
        let mut b = meta("b", "LUNG", 3.0);
        b.kvp = Some(100.0);
        let mut c = meta("c", "LUNG", 3.0);
        c.kvp = Some(140.0);
        let pairs: Vec<SubgroupPair> = [&a, &b, &c]
            .iter()
            .map(|m| SubgroupPair { reference_rounded: 10, predicted_rounded: 10, meta: m })
            .collect();
        let report = subgroup_evaluate(&pairs, &[SubgroupKey::Kvp, SubgroupKey::Sex], &[1]).unwrap();
        let kvp: Vec<(&str, u64)> = report
            .rows
            .iter()
            .filter(|r| r.key == SubgroupKey::Kvp)
            .map(|r| (r.value.as_str(), r.metrics.n()))
            .collect();
        assert_eq!(kvp, vec![("120", 1), ("non_120", 2)]);
        assert_eq!(report.coverage_notes, vec!["sex=F has no pairs; omitted".to_string()]);
    }

    #[test]
    fn single_manufacturer_equals_global() {
        let m = meta("a", "LUNG", 3.0);
        let raw = [(0u64, 0u64), (10, 0), (150, 200), (500, 90), (0, 3)];
        let pairs: Vec<SubgroupPair> =
            raw.iter().map(|&(r, p)| SubgroupPair { reference_rounded: r, predicted_rounded: p, meta: &m }).collect();
        let report = subgroup_evaluate(&pairs, &[SubgroupKey::Manufacturer], &[1, 100, 400]).unwrap();
        assert_eq!(report.rows.len(), 3);
        for row in &report.rows {
            assert_eq!(row.metrics, threshold_metrics(&raw, row.threshold).unwrap());
        }
    }
}
