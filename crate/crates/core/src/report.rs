//! Aggregation of verdicts into per-mechanism counts and percentages, the
//! plain-text table, and JSON persistence for every artifact.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::model::{Mechanism, Verdict};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("campaign total is zero")]
    EmptyCampaign,
    #[error("{} verdicts exceed total {total}", .verdicts)]
    TotalTooSmall { verdicts: usize, total: usize },
    #[error("{}: {source}", .path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: {source}", .path.display())]
    Format { path: PathBuf, source: serde_json::Error },
}

/// Fixed-point percentage in hundredths, so 60.91 is stored as 6091.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Percent(pub u32);

impl Percent {
    /// `count / total * 100`, rounded half-even to two decimals.
    pub fn of(count: usize, total: usize) -> Percent {
        assert!(total > 0);
        let num = count as u128 * 10_000;
        let total = total as u128;
        let (mut q, r) = (num / total, num % total);
        if 2 * r > total || (2 * r == total && q % 2 == 1) {
            q += 1;
        }
        Percent(q as u32)
    }

    pub fn as_f64(self) -> f64 {
        self.0 as f64 / 100.0
    }
}

impl fmt::Display for Percent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{:02}", self.0 / 100, self.0 % 100)
    }
}

impl Serialize for Percent {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(self.as_f64())
    }
}

impl<'de> Deserialize<'de> for Percent {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = f64::deserialize(d)?;
        if !(0.0..=100.0).contains(&v) {
            return Err(serde::de::Error::custom("percent out of range"));
        }
        Ok(Percent((v * 100.0).round() as u32))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunReport {
    pub total: usize,
    pub counts: BTreeMap<Mechanism, usize>,
    pub percents: BTreeMap<Mechanism, Percent>,
    pub blocked_total: usize,
    pub blocked_percent: Percent,
    pub inconclusive: usize,
    pub error_logged: usize,
}

/// Counts each mechanism once per target. Every mechanism gets an entry,
/// zero or not. Input order does not matter.
pub fn aggregate(verdicts: &[Verdict], total: usize) -> Result<RunReport, ReportError> {
    if total == 0 {
        return Err(ReportError::EmptyCampaign);
    }
    if verdicts.len() > total {
        return Err(ReportError::TotalTooSmall { verdicts: verdicts.len(), total });
    }
    let mut counts: BTreeMap<Mechanism, usize> = Mechanism::ALL.iter().map(|m| (*m, 0)).collect();
    let mut blocked_total = 0;
    let mut inconclusive = 0;
    for v in verdicts {
        for m in &v.mechanisms {
            *counts.entry(*m).or_default() += 1;
        }
        if !v.mechanisms.is_empty() {
            blocked_total += 1;
        }
        if v.inconclusive {
            inconclusive += 1;
        }
    }
    let percents = counts.iter().map(|(m, c)| (*m, Percent::of(*c, total))).collect();
    Ok(RunReport {
        total,
        counts,
        percents,
        blocked_total,
        blocked_percent: Percent::of(blocked_total, total),
        inconclusive,
        error_logged: 0,
    })
}

impl RunReport {
    pub fn with_error_logged(mut self, n: usize) -> Self {
        self.error_logged = n;
        self
    }

    fn row(&self, label: &str, mechanisms: &[Mechanism]) -> (String, usize, Percent) {
        let count = mechanisms.iter().map(|m| self.counts.get(m).copied().unwrap_or(0)).sum();
        (label.to_string(), count, Percent::of(count, self.total.max(1)))
    }

    fn rows(&self) -> Vec<(String, usize, Percent)> {
        let mut rows = vec![
            self.row("DNS", &[Mechanism::DnsInjection]),
            self.row("IP", &[Mechanism::IpBlock]),
            self.row("URL-keyword", &[Mechanism::UrlKeyword]),
        ];
        let r302 = self.row("HTTP (302)", &[Mechanism::Http302Redirect]);
        let r200 = self.row("HTTP (200)", &[Mechanism::Http200Injection]);
        match (r302.1, r200.1) {
            (0, 0) => rows.push(self.row("HTTP", &[Mechanism::Http302Redirect, Mechanism::Http200Injection])),
            (_, 0) => rows.push(r302),
            (0, _) => rows.push(r200),
            _ => rows.extend([r302, r200]),
        }
        rows
    }
}

/// Fixed-column text table, one row per mechanism plus Total.
pub fn render_table(report: &RunReport) -> String {
    let header = ("Mechanism", "No. of Affected Sites", "Percent");
    let mut lines = Vec::new();
    let line = |a: &str, b: &str, c: &str| format!("{a:<14} {b:>21} {c:>8}");
    lines.push(line(header.0, header.1, header.2));
    let rule = "-".repeat(45);
    lines.push(rule.clone());
    for (label, count, pct) in report.rows() {
        lines.push(line(&label, &count.to_string(), &pct.to_string()));
    }
    lines.push(rule);
    lines.push(line("Total", &report.blocked_total.to_string(), &report.blocked_percent.to_string()));
    if report.inconclusive > 0 {
        lines.push(format!("* {} target(s) with inconclusive HTTP evidence", report.inconclusive));
    }
    if report.error_logged > 0 {
        lines.push(format!("* {} target(s) excluded with error-log entries", report.error_logged));
    }
    let mut out = lines.join("\n");
    out.push('\n');
    out
}

/// Writes pretty JSON. Struct fields keep declaration order and maps are
/// ordered, so output is stable.
pub fn emit<T: Serialize>(artifact: &T, path: &Path) -> Result<(), ReportError> {
    let mut text = serde_json::to_string_pretty(artifact)
        .map_err(|source| ReportError::Format { path: path.to_path_buf(), source })?;
    text.push('\n');
    std::fs::write(path, text).map_err(|source| ReportError::Io { path: path.to_path_buf(), source })
}

pub fn load<T: DeserializeOwned>(path: &Path) -> Result<T, ReportError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| ReportError::Io { path: path.to_path_buf(), source })?;
    serde_json::from_str(&text).map_err(|source| ReportError::Format { path: path.to_path_buf(), source })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn synthetic_verdicts(counts: &[(Mechanism, usize)], total: usize) -> Vec<Verdict> {
        let mut out = Vec::new();
        for (m, n) in counts {
            for _ in 0..*n {
                let host = format!("site{}.example", out.len());
                let target = crate::model::TargetUrl::root(&host).expect("valid host");
                out.push(Verdict::new(target, BTreeSet::from([*m]), vec![]));
            }
        }
        while out.len() < total {
            let host = format!("site{}.example", out.len());
            let target = crate::model::TargetUrl::root(&host).expect("valid host");
            out.push(Verdict::new(target, BTreeSet::new(), vec![]));
        }
        out
    }

    #[test]
    fn half_even_rounding() {
        assert_eq!(Percent::of(187, 307).to_string(), "60.91");
        assert_eq!(Percent::of(5, 307).to_string(), "1.63");
        assert_eq!(Percent::of(192, 307).to_string(), "62.54");
        assert_eq!(Percent::of(179, 307).to_string(), "58.31");
        assert_eq!(Percent::of(184, 307).to_string(), "59.93");
        // exact ties: 1/8 = 12.5 -> 12.50, 1/80000 = 0.00125 -> 0.00
        assert_eq!(Percent::of(1, 80_000).0, 0);
        assert_eq!(Percent::of(3, 80_000).0, 0);
        assert_eq!(Percent::of(1, 20_000).0, 0);
        assert_eq!(Percent::of(3, 20_000).0, 2);
        assert_eq!(Percent::of(0, 10).to_string(), "0.00");
        assert_eq!(Percent::of(10, 10).to_string(), "100.00");
    }

    #[test]
    fn empty_campaign() {
        assert!(matches!(aggregate(&[], 0), Err(ReportError::EmptyCampaign)));
        let r = aggregate(&[], 10).unwrap();
        assert_eq!(r.blocked_total, 0);
        assert!(r.percents.values().all(|p| p.0 == 0));
    }

    #[test]
    fn multi_mechanism_counts_once_in_total() {
        let t = crate::model::TargetUrl::root("a.com").unwrap();
        let v = Verdict::new(t, BTreeSet::from([Mechanism::DnsInjection, Mechanism::Http302Redirect]), vec![]);
        let r = aggregate(&[v], 4).unwrap();
        assert_eq!(r.blocked_total, 1);
        assert_eq!(r.counts.values().sum::<usize>(), 2);
        assert_eq!(r.blocked_percent.to_string(), "25.00");
    }

    #[test]
    fn table_layout() {
        let v = synthetic_verdicts(&[(Mechanism::DnsInjection, 187), (Mechanism::Http302Redirect, 5)], 307);
        let text = render_table(&aggregate(&v, 307).unwrap());
        let labels: Vec<&str> = text.lines().filter_map(|l| l.split("  ").next()).collect();
        assert!(text.contains("HTTP (302)"));
        assert!(!text.contains("HTTP (200)"));
        assert!(labels.iter().any(|l| l.starts_with("Total")));
        assert_eq!(text.lines().count(), 8);
        let zero = render_table(&aggregate(&[], 10).unwrap());
        assert!(zero.contains("0.00"));
        assert!(zero.lines().any(|l| l.starts_with("HTTP ")));
    }

    #[test]
    fn footnote_for_inconclusive() {
        let mut v = synthetic_verdicts(&[], 3);
        v[1].inconclusive = true;
        let text = render_table(&aggregate(&v, 3).unwrap());
        assert!(text.contains("* 1 target(s) with inconclusive"));
    }

    #[test]
    fn report_round_trips_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.json");
        let v = synthetic_verdicts(&[(Mechanism::DnsInjection, 179), (Mechanism::Http200Injection, 5)], 307);
        let r = aggregate(&v, 307).unwrap().with_error_logged(2);
        emit(&r, &path).unwrap();
        let back: RunReport = load(&path).unwrap();
        assert_eq!(back, r);
        let missing = load::<RunReport>(&dir.path().join("nope.json")).unwrap_err();
        assert!(missing.to_string().contains("nope.json"));
    }

    proptest! {
        #[test]
        fn percent_within_half_hundredth(count in 0usize..5000, extra in 1usize..5000) {
            let total = count + extra;
            let p = Percent::of(count, total).0 as f64;
            let exact = count as f64 * 10_000.0 / total as f64;
            prop_assert!((p - exact).abs() <= 0.5 + 1e-9);
        }
    }
}
