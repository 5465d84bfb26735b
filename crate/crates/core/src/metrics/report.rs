use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{evaluate_case, CaseMetrics, MetricsConfig};
use crate::error::{Error, Result};
use crate::volume_io::LabelMask;

pub const CSV_HEADER: &str = "case_id,scanner,dice,avd,f1,n_truth,n_detected,n_false";
pub const SUMMARY_HEADER: &str = "scanner,n_cases,dice,avd,avd_percent,f1";
/// Scanner column value of the all-cases summary row.
pub const OVERALL: &str = "overall";

pub struct EvalItem {
    pub case_id: String,
    pub scanner: String,
    pub pred: LabelMask,
    pub truth: LabelMask,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub scanner: String,
    pub n_cases: usize,
    pub dice: f64,
    /// Mean over cases with a defined AVD.
    pub avd: Option<f64>,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseFailure {
    pub case_id: String,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub cases: Vec<CaseMetrics>,
    pub scanners: Vec<GroupSummary>,
    pub overall: GroupSummary,
    pub failures: Vec<CaseFailure>,
}

fn summarize(name: &str, rows: &[&CaseMetrics]) -> GroupSummary {
    let n = rows.len();
    let mean = |f: &dyn Fn(&CaseMetrics) -> f64| {
        if n == 0 {
            f64::NAN
        } else {
            rows.iter().map(|r| f(r)).sum::<f64>() / n as f64
        }
    };
    let avds: Vec<f64> = rows.iter().filter_map(|r| r.avd).collect();
    GroupSummary {
        scanner: name.to_string(),
        n_cases: n,
        dice: mean(&|r| r.dice),
        avd: (!avds.is_empty()).then(|| avds.iter().sum::<f64>() / avds.len() as f64),
        f1: mean(&|r| r.f1),
    }
}

impl MetricsReport {
    /// Builds unweighted per-scanner and overall means. Rows are sorted by
    /// case id so aggregates do not depend on input order.
    pub fn from_cases(mut cases: Vec<CaseMetrics>, failures: Vec<CaseFailure>) -> Self {
        cases.sort_by(|a, b| (&a.scanner, &a.case_id).cmp(&(&b.scanner, &b.case_id)));
        let mut groups: BTreeMap<&str, Vec<&CaseMetrics>> = BTreeMap::new();
        for c in &cases {
            groups.entry(&c.scanner).or_default().push(c);
        }
        let scanners = groups.iter().map(|(k, v)| summarize(k, v)).collect();
        let overall = summarize(OVERALL, &cases.iter().collect::<Vec<_>>());
        Self {
            cases,
            scanners,
            overall,
            failures,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{CSV_HEADER}").unwrap();
        for c in &self.cases {
            writeln!(
                s,
                "{},{},{:.6},{},{:.6},{},{},{}",
                quote(&c.case_id),
                quote(&c.scanner),
                c.dice,
                fmt_opt(c.avd),
                c.f1,
                c.n_truth,
                c.n_detected,
                c.n_false
            )
            .unwrap();
        }
        writeln!(s).unwrap();
        writeln!(s, "{SUMMARY_HEADER}").unwrap();
        for g in self.scanners.iter().chain(std::iter::once(&self.overall)) {
            writeln!(
                s,
                "{},{},{:.6},{},{},{:.6}",
                quote(&g.scanner),
                g.n_cases,
                g.dice,
                fmt_opt(g.avd),
                fmt_opt(g.avd.map(|a| a * 100.0)),
                g.f1
            )
            .unwrap();
        }
        s
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |v| format!("{v:.6}"))
}

fn quote(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Splits one CSV line, honouring double-quoted fields.
fn split_csv(line: &str) -> Vec<String> {
    let mut fields = vec![String::new()];
    let mut quoted = false;
    let mut chars = line.chars().peekable();
    while let Some(ch) = chars.next() {
        match ch {
            '"' if quoted && chars.peek() == Some(&'"') => {
                chars.next();
                fields.last_mut().unwrap().push('"');
            }
            '"' => quoted = !quoted,
            ',' if !quoted => fields.push(String::new()),
            _ => fields.last_mut().unwrap().push(ch),
        }
    }
    fields
}

/// Reads the per-case block of a report CSV.
pub fn parse_report_csv(text: &str) -> Result<Vec<CaseMetrics>> {
    let bad = |line: usize, why: &str| Error::Config(format!("report CSV line {line}: {why}"));
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == CSV_HEADER => {}
        _ => return Err(bad(1, "missing header")),
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            break;
        }
        let f = split_csv(line);
        if f.len() != 8 {
            return Err(bad(i + 1, "expected 8 fields"));
        }
        let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad(i + 1, "not a number"));
        let int = |s: &str| s.trim().parse::<usize>().map_err(|_| bad(i + 1, "not an integer"));
        rows.push(CaseMetrics {
            case_id: f[0].clone(),
            scanner: f[1].clone(),
            dice: num(&f[2])?,
            avd: if f[3].trim() == "NA" { None } else { Some(num(&f[3])?) },
            f1: num(&f[4])?,
            n_truth: int(&f[5])?,
            n_detected: int(&f[6])?,
            n_false: int(&f[7])?,
        });
    }
    Ok(rows)
}

/// Scores every pair in parallel; failed cases are listed, not dropped.
pub fn evaluate_cases(items: &[EvalItem], cfg: &MetricsConfig) -> MetricsReport {
    let results: Vec<_> = items
        .par_iter()
        .map(|it| evaluate_case(&it.case_id, &it.scanner, &it.pred, &it.truth, cfg).map_err(|e| (it.case_id.clone(), e)))
        .collect();
    let mut cases = Vec::new();
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(c) => cases.push(c),
            Err((case_id, e)) => failures.push(CaseFailure {
                case_id,
                reason: e.to_string(),
            }),
        }
    }
    MetricsReport::from_cases(cases, failures)
}

/// Writes `path` (CSV) and its `.json` mirror.
pub fn write_report(report: &MetricsReport, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, report.to_csv()).map_err(|e| Error::io(path, e))?;
    let json = path.with_extension("json");
    std::fs::write(&json, serde_json::to_string_pretty(report)?).map_err(|e| Error::io(&json, e))
}

/// `DICE 0.812 AVD 0.156 F1 0.780`
pub fn overall_line(report: &MetricsReport) -> String {
    let o = &report.overall;
    format!(
        "DICE {:.3} AVD {} F1 {:.3}",
        o.dice,
        o.avd.map_or_else(|| "NA".to_string(), |a| format!("{a:.3}")),
        o.f1
    )
}
