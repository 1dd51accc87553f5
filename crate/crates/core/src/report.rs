//! Reference Agatston score extraction from gated CT report text.
//!
//! Extraction is driven by a [`RulePack`] loaded from TOML. The bundled
//! pack lives in `rules/default.toml`; sites can ship their own.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Upper bound for a plausible total score.
pub const MAX_PLAUSIBLE_SCORE: f64 = 100_000.0;

const DEFAULT_RULES: &str = include_str!("../rules/default.toml");

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("rule pack: {0}")]
    RulePack(String),
    #[error("sample of {requested} requested from {available} reports")]
    SampleTooLarge { requested: usize, available: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleKind {
    Reject,
    Mask,
    Total,
}

#[derive(Debug, Deserialize)]
struct RuleSpec {
    kind: RuleKind,
    #[serde(default)]
    name: String,
    pattern: String,
}

#[derive(Debug, Deserialize)]
struct RulePackSpec {
    rule: Vec<RuleSpec>,
}

#[derive(Debug, Clone)]
pub struct Rule {
    pub kind: RuleKind,
    pub name: String,
    pub regex: Regex,
}

#[derive(Debug, Clone)]
pub struct RulePack {
    rules: Vec<Rule>,
}

impl RulePack {
    pub fn from_toml(text: &str) -> Result<Self, ReportError> {
        let spec: RulePackSpec = toml::from_str(text).map_err(|e| ReportError::RulePack(e.to_string()))?;
        let mut rules = Vec::with_capacity(spec.rule.len());
        for r in spec.rule {
            let regex = Regex::new(&r.pattern).map_err(|e| ReportError::RulePack(format!("{}: {e}", r.name)))?;
            if r.kind == RuleKind::Total && !regex.capture_names().any(|n| n == Some("score")) {
                return Err(ReportError::RulePack(format!("total rule {:?} lacks a `score` group", r.name)));
            }
            rules.push(Rule { kind: r.kind, name: r.name, regex });
        }
        Ok(Self { rules })
    }

    /// The bundled rule pack.
    pub fn builtin() -> Self {
        static BUILTIN: std::sync::OnceLock<RulePack> = std::sync::OnceLock::new();
        BUILTIN.get_or_init(|| Self::from_toml(DEFAULT_RULES).expect("bundled rule pack compiles")).clone()
    }

    pub fn rules(&self) -> &[Rule] {
        &self.rules
    }

    fn of_kind(&self, kind: RuleKind) -> impl Iterator<Item = &Rule> {
        self.rules.iter().filter(move |r| r.kind == kind)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractionStatus {
    Extracted,
    NotExtractable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NotExtractableReason {
    HardwareMention,
    NoScorePattern,
    AmbiguousMultiple,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedSpan {
    /// Byte offsets into the report text.
    pub start: usize,
    pub end: usize,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionResult {
    pub status: ExtractionStatus,
    pub score: Option<f64>,
    pub reason: Option<NotExtractableReason>,
    pub matched_span: Option<MatchedSpan>,
}

impl ExtractionResult {
    fn extracted(score: f64, span: MatchedSpan) -> Self {
        Self { status: ExtractionStatus::Extracted, score: Some(score), reason: None, matched_span: Some(span) }
    }

    fn rejected(reason: NotExtractableReason, span: Option<MatchedSpan>) -> Self {
        Self { status: ExtractionStatus::NotExtractable, score: None, reason: Some(reason), matched_span: span }
    }

    pub fn is_extracted(&self) -> bool {
        self.status == ExtractionStatus::Extracted
    }
}

fn parse_score(raw: &str) -> Option<f64> {
    if raw.eq_ignore_ascii_case("zero") {
        return Some(0.0);
    }
    let value: f64 = raw.replace(',', "").parse().ok()?;
    (0.0..=MAX_PLAUSIBLE_SCORE).contains(&value).then_some(value)
}

/// Blank `range` with spaces, keeping byte offsets valid.
fn blank(text: &mut String, start: usize, end: usize) {
    let spaces = " ".repeat(end - start);
    text.replace_range(start..end, &spaces);
}

/// Extract the total Agatston score from one report.
pub fn extract_agatston(report_text: &str, rules: &RulePack) -> ExtractionResult {
    for rule in rules.of_kind(RuleKind::Reject) {
        if let Some(m) = rule.regex.find(report_text) {
            let span = MatchedSpan { start: m.start(), end: m.end(), text: m.as_str().to_owned() };
            return ExtractionResult::rejected(NotExtractableReason::HardwareMention, Some(span));
        }
    }

    let mut working = report_text.to_owned();
    for rule in rules.of_kind(RuleKind::Mask) {
        let ranges: Vec<(usize, usize)> = rule.regex.find_iter(&working).map(|m| (m.start(), m.end())).collect();
        for (start, end) in ranges {
            blank(&mut working, start, end);
        }
    }

    let mut found: Vec<(usize, f64, MatchedSpan)> = Vec::new();
    for rule in rules.of_kind(RuleKind::Total) {
        for caps in rule.regex.captures_iter(&working) {
            let whole = caps.get(0).expect("group 0");
            let Some(score) = caps.name("score").and_then(|m| parse_score(m.as_str())) else {
                continue;
            };
            let span = MatchedSpan {
                start: whole.start(),
                end: whole.end(),
                text: report_text[whole.start()..whole.end()].to_owned(),
            };
            found.push((whole.start(), score, span));
        }
    }
    found.sort_by_key(|(start, _, _)| *start);

    let Some((_, first_score, first_span)) = found.first().cloned() else {
        return ExtractionResult::rejected(NotExtractableReason::NoScorePattern, None);
    };
    if found.iter().any(|(_, s, _)| *s != first_score) {
        return ExtractionResult::rejected(NotExtractableReason::AmbiguousMultiple, Some(first_span));
    }
    ExtractionResult::extracted(first_score, first_span)
}

/// Input record for report extraction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRecord {
    pub report_id: String,
    pub patient_id: String,
    pub study_uid: String,
    pub report_text: String,
    pub report_date: chrono::NaiveDate,
}

/// One row of the manual verification worksheet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRow {
    pub report_id: String,
    pub report_text: String,
    pub status: ExtractionStatus,
    pub extracted_score: Option<f64>,
    pub reason: Option<NotExtractableReason>,
    /// Left blank for the reviewer.
    pub verdict: String,
}

/// Seeded uniform sample without replacement, in sampled order.
pub fn audit_sample(
    results: &[(ReportRecord, ExtractionResult)],
    n: usize,
    seed: u64,
) -> Result<Vec<AuditRow>, ReportError> {
    if n > results.len() {
        return Err(ReportError::SampleTooLarge { requested: n, available: results.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(index::sample(&mut rng, results.len(), n)
        .into_iter()
        .map(|i| {
            let (record, result) = &results[i];
            AuditRow {
                report_id: record.report_id.clone(),
                report_text: record.report_text.clone(),
                status: result.status,
                extracted_score: result.score,
                reason: result.reason,
                verdict: String::new(),
            }
        })
        .collect())
}

/// Write the worksheet as CSV.
pub fn write_audit_csv<W: std::io::Write>(rows: &[AuditRow], out: W) -> csv::Result<()> {
    let mut writer = csv::Writer::from_writer(out);
    writer.write_record(["report_id", "report_text", "status", "extracted_score", "reason", "verdict"])?;
    for row in rows {
        let status = match row.status {
            ExtractionStatus::Extracted => "extracted",
            ExtractionStatus::NotExtractable => "not_extractable",
        };
        let reason = match row.reason {
            Some(NotExtractableReason::HardwareMention) => "hardware_mention",
            Some(NotExtractableReason::NoScorePattern) => "no_score_pattern",
            Some(NotExtractableReason::AmbiguousMultiple) => "ambiguous_multiple",
            None => "",
        };
        let score = row.extracted_score.map(|s| s.to_string()).unwrap_or_default();
        writer.write_record([&row.report_id, &row.report_text, status, &score, reason, &row.verdict])?;
    }
    writer.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn extract(text: &str) -> ExtractionResult {
        extract_agatston(text, &RulePack::builtin())
    }

    #[test]
    fn total_agatston_label() {
        let r = extract("TOTAL AGATSTON SCORE: 523.4");
        assert_eq!(r.score, Some(523.4));
        let span = r.matched_span.unwrap();
        assert_eq!(span.start, 0);
        assert!(span.text.ends_with("523.4"));
    }

    #[test]
    fn stent_rejected() {
        let r = extract("Calcium scoring not performed due to presence of coronary stent.");
        assert_eq!(r.reason, Some(NotExtractableReason::HardwareMention));
        assert_eq!(r.score, None);
    }

    #[test]
    fn zero_score() {
        let r = extract("Agatston score: 0.");
        assert_eq!(r.status, ExtractionStatus::Extracted);
        assert_eq!(r.score, Some(0.0));
    }

    #[test]
    fn hardware_dominates_score() {
        let r = extract("Total calcium score: 312. Stents in the LAD.");
        assert_eq!(r.reason, Some(NotExtractableReason::HardwareMention));
    }

    #[test]
    fn thousands_separator_and_line_breaks() {
        assert_eq!(extract("Total Agatston\nscore:\n1,234.5").score, Some(1234.5));
    }

    #[test]
    fn vessel_subscores_not_total() {
        let text = "Calcium scores by vessel:\nLAD: 120\nLCX: 30\nRCA: 0\nTotal: 150";
        assert_eq!(extract(text).score, Some(150.0));
        let only_vessels = "LAD calcium score 120. RCA calcium score 40.";
        assert_eq!(extract(only_vessels).reason, Some(NotExtractableReason::NoScorePattern));
    }

    #[test]
    fn disagreeing_totals_rejected_equal_accepted() {
        let r = extract("Agatston score 45. Total calcium score: 60.");
        assert_eq!(r.reason, Some(NotExtractableReason::AmbiguousMultiple));
        let r = extract("Agatston score 45. IMPRESSION: total calcium score 45.");
        assert_eq!(r.score, Some(45.0));
    }

    #[test]
    fn implausible_values_ignored() {
        assert_eq!(extract("Agatston score: -5").reason, Some(NotExtractableReason::NoScorePattern));
        assert_eq!(extract("Agatston score: 250000").reason, Some(NotExtractableReason::NoScorePattern));
    }

    #[test]
    fn percentile_not_confused() {
        let r = extract("The calcium score is 88, placing the patient in the 75th percentile.");
        assert_eq!(r.score, Some(88.0));
        let r = extract("Total: 34\nPercentile rank 78 compared to age-matched controls.");
        assert_eq!(r.score, Some(34.0));
    }

    #[test]
    fn no_pattern() {
        assert_eq!(extract("Normal heart size.").reason, Some(NotExtractableReason::NoScorePattern));
    }

    #[test]
    fn bad_pack_rejected() {
        let err = RulePack::from_toml("[[rule]]\nkind = \"total\"\npattern = '\\d+'\n");
        assert!(matches!(err, Err(ReportError::RulePack(_))));
    }

    fn records(n: usize) -> Vec<(ReportRecord, ExtractionResult)> {
        (0..n)
            .map(|i| {
                let text = format!("Agatston score: {i}");
                let result = extract(&text);
                let record = ReportRecord {
                    report_id: format!("r{i}"),
                    patient_id: format!("p{i}"),
                    study_uid: format!("s{i}"),
                    report_text: text,
                    report_date: chrono::NaiveDate::from_ymd_opt(2015, 1, 1).unwrap(),
                };
                (record, result)
            })
            .collect()
    }

    #[test]
    fn audit_sample_sizes_and_determinism() {
        let pool = records(3397);
        let a = audit_sample(&pool, 300, 11).unwrap();
        assert_eq!(a.len(), 300);
        assert_eq!(a, audit_sample(&pool, 300, 11).unwrap());
        assert!(a.iter().all(|r| r.verdict.is_empty()));

        let small = records(20);
        let all = audit_sample(&small, 20, 3).unwrap();
        let mut ids: Vec<_> = all.iter().map(|r| r.report_id.clone()).collect();
        assert_ne!(ids, (0..20).map(|i| format!("r{i}")).collect::<Vec<_>>());
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 20);

        assert!(matches!(audit_sample(&small, 21, 3), Err(ReportError::SampleTooLarge { .. })));
    }

    #[test]
    fn audit_csv_has_blank_verdicts() {
        let rows = audit_sample(&records(3), 3, 1).unwrap();
        let mut buf = Vec::new();
        write_audit_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("report_id,report_text,status,extracted_score,reason,verdict\n"));
        assert_eq!(text.lines().count(), 4);
    }
}
