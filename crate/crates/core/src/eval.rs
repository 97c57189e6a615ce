//! Matched RMSE against ground-truth sources and result tables.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::synth::zscore;

/// Largest latent count accepted by the exhaustive matcher.
pub const MAX_MATCH_DIMS: usize = 6;

pub fn rmse(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            op: "rmse",
            left: vec![a.len()],
            right: vec![b.len()],
        });
    }
    if a.is_empty() {
        return Err(Error::Usage("rmse of empty sequences".into()));
    }
    let ss: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    Ok((ss / a.len() as f64).sqrt())
}

/// Matched per-source errors for one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: String,
    pub scenario: String,
    /// RMSE for each ground-truth source.
    pub per_source: Vec<f64>,
    pub average: f64,
    /// `permutation[i]` is the inferred component matched to source `i`.
    pub permutation: Vec<usize>,
    /// Sign applied to that inferred component.
    pub signs: Vec<i8>,
}

impl EvalReport {
    /// Builds a report from per-source values with the identity assignment.
    pub fn from_values(variant: &str, scenario: &str, per_source: Vec<f64>) -> Self {
        let n = per_source.len();
        EvalReport {
            variant: variant.into(),
            scenario: scenario.into(),
            average: mean(&per_source),
            per_source,
            permutation: (0..n).collect(),
            signs: vec![1; n],
        }
    }

    pub fn labelled(mut self, variant: &str, scenario: &str) -> Self {
        self.variant = variant.into();
        self.scenario = scenario.into();
        self
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Finds the permutation and signs of `inferred` (`[n, T]`) minimizing the
/// average RMSE against `truth` (`[n, T]`), after z-scoring every row.
pub fn match_components(inferred: &Tensor, truth: &Tensor) -> Result<EvalReport> {
    let (n, t) = inferred
        .dims2()
        .ok_or_else(|| Error::Usage("inferred components must be a matrix".into()))?;
    if truth.shape() != inferred.shape() {
        return Err(Error::ShapeMismatch {
            op: "match_components",
            left: inferred.shape().to_vec(),
            right: truth.shape().to_vec(),
        });
    }
    if n > MAX_MATCH_DIMS {
        return Err(Error::Usage(format!(
            "matching supports at most {MAX_MATCH_DIMS} components, got {n}"
        )));
    }
    let zi: Vec<Vec<f64>> = (0..n).map(|j| zscore(inferred.row(j))).collect::<Result<_>>()?;
    let zt: Vec<Vec<f64>> = (0..n).map(|i| zscore(truth.row(i))).collect::<Result<_>>()?;

    // cost[i][j] = (rmse, sign) of inferred j against source i.
    let mut cost = vec![vec![(0.0, 1i8); n]; n];
    for (i, src) in zt.iter().enumerate() {
        for (j, inf) in zi.iter().enumerate() {
            let pos = rmse(inf, src)?;
            let neg: f64 = (inf.iter().zip(src).map(|(a, b)| (a + b).powi(2)).sum::<f64>() / t as f64).sqrt();
            cost[i][j] = if neg < pos { (neg, -1) } else { (pos, 1) };
        }
    }

    let mut best: Option<(f64, Vec<usize>)> = None;
    for perm in permutations(n) {
        let total: f64 = perm.iter().enumerate().map(|(i, &j)| cost[i][j].0).sum();
        if best.as_ref().is_none_or(|(b, _)| total < *b) {
            best = Some((total, perm));
        }
    }
    let (_, permutation) = best.expect("at least one permutation");
    let per_source: Vec<f64> = permutation.iter().enumerate().map(|(i, &j)| cost[i][j].0).collect();
    let signs = permutation.iter().enumerate().map(|(i, &j)| cost[i][j].1).collect();
    Ok(EvalReport {
        variant: String::new(),
        scenario: String::new(),
        average: mean(&per_source),
        per_source,
        permutation,
        signs,
    })
}

/// All permutations of `0..n` in lexicographic order.
fn permutations(n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur: Vec<usize> = (0..n).collect();
    loop {
        out.push(cur.clone());
        let Some(i) = (1..n).rev().find(|&i| cur[i - 1] < cur[i]) else {
            return out;
        };
        let j = (i..n).rev().find(|&j| cur[j] > cur[i - 1]).unwrap();
        cur.swap(i - 1, j);
        cur[i..].reverse();
    }
}

/// Table number: truncated (not rounded) to four decimals, trailing
/// zeros dropped.
pub fn format_table_value(x: f64) -> String {
    let k = (x * 1e4 + 1e-7).floor() / 1e4;
    let s = format!("{k:.4}");
    let s = s.trim_end_matches('0');
    s.trim_end_matches('.').to_string()
}

/// Row label used for source `i` (zero-based).
pub fn source_label(i: usize) -> String {
    format!("Source {}", i + 1)
}

/// Table with one column per report and one row per source plus `Average`.
pub fn report_to_csv(reports: &[EvalReport]) -> Result<String> {
    let n = check_reports(reports)?;
    let mut out = String::from("source");
    for r in reports {
        write!(out, ",{}", r.variant).unwrap();
    }
    out.push('\n');
    for i in 0..n {
        out.push_str(&source_label(i));
        for r in reports {
            write!(out, ",{}", format_table_value(r.per_source[i])).unwrap();
        }
        out.push('\n');
    }
    out.push_str("Average");
    for r in reports {
        write!(out, ",{}", format_table_value(r.average)).unwrap();
    }
    out.push('\n');
    Ok(out)
}

fn check_reports(reports: &[EvalReport]) -> Result<usize> {
    let first = reports
        .first()
        .ok_or_else(|| Error::Usage("no reports to write".into()))?;
    let n = first.per_source.len();
    if reports.iter().any(|r| r.per_source.len() != n) {
        return Err(Error::Usage("reports disagree on the number of sources".into()));
    }
    Ok(n)
}

pub const REPORT_FORMAT: &str = "unmix-report";

/// Full-precision twin of the CSV table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportDocument {
    pub format: String,
    pub seed: u64,
    pub config_hash: String,
    pub scenario: String,
    /// Free-form run metadata (e.g. source redraw counts).
    #[serde(default)]
    pub metadata: serde_json::Value,
    pub reports: Vec<EvalReport>,
}

/// Writes `csv_path` and a JSON twin next to it (same stem, `.json`).
pub fn write_report(
    reports: &[EvalReport],
    seed: u64,
    config_hash: &str,
    metadata: serde_json::Value,
    csv_path: &Path,
) -> Result<()> {
    let csv = report_to_csv(reports)?;
    std::fs::write(csv_path, csv).map_err(|e| Error::io(csv_path, e))?;
    let doc = ReportDocument {
        format: REPORT_FORMAT.into(),
        seed,
        config_hash: config_hash.into(),
        scenario: reports[0].scenario.clone(),
        metadata,
        reports: reports.to_vec(),
    };
    let json_path = csv_path.with_extension("json");
    let text = serde_json::to_string_pretty(&doc).expect("report serializes");
    std::fs::write(&json_path, text + "\n").map_err(|e| Error::io(&json_path, e))
}

pub fn read_report_document(path: &Path) -> Result<ReportDocument> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn truth() -> Tensor {
        let rows: Vec<Vec<f64>> = (0..3)
            .map(|i| {
                (0..50)
                    .map(|t| ((t as f64) * (0.1 + 0.23 * i as f64)).sin() + 0.01 * t as f64)
                    .collect()
            })
            .collect();
        Tensor::from_rows(&rows).unwrap()
    }

    #[test]
    fn rmse_examples() {
        let a = [1.0, 2.0, 3.0];
        assert_eq!(rmse(&a, &a).unwrap(), 0.0);
        assert!((rmse(&[3.0, 4.0, 5.0], &a).unwrap() - 2.0).abs() < 1e-15);
        let b = [0.5, -1.0, 2.0];
        assert_eq!(rmse(&a, &b).unwrap(), rmse(&b, &a).unwrap());
        assert!(rmse(&a, &b[..2]).is_err());
    }

    #[test]
    fn identity_match() {
        let z = truth();
        let r = match_components(&z, &z).unwrap();
        assert!(r.per_source.iter().all(|&e| e < 1e-12));
        assert_eq!(r.permutation, vec![0, 1, 2]);
        assert_eq!(r.signs, vec![1, 1, 1]);
    }

    #[test]
    fn scramble_is_inverted() {
        let z = truth();
        // inferred rows: [src2, -src0, src1]
        let rows = vec![
            z.row(2).to_vec(),
            z.row(0).iter().map(|v| -v).collect(),
            z.row(1).to_vec(),
        ];
        let inferred = Tensor::from_rows(&rows).unwrap();
        let r = match_components(&inferred, &z).unwrap();
        assert!(r.average < 1e-12);
        assert_eq!(r.permutation, vec![1, 2, 0]);
        assert_eq!(r.signs, vec![-1, 1, 1]);
    }

    #[test]
    fn rejects_constant_and_oversized() {
        let z = truth();
        let mut flat = z.clone();
        flat.data_mut()[..50].fill(1.0);
        assert!(matches!(match_components(&flat, &z), Err(Error::Degenerate(_))));
        let big = Tensor::full(&[7, 10], 0.0);
        assert!(match_components(&big, &big).is_err());
    }

    #[test]
    fn permutations_are_complete() {
        let p = permutations(4);
        assert_eq!(p.len(), 24);
        let mut sorted = p.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), 24);
        assert_eq!(permutations(1), vec![vec![0]]);
    }

    #[test]
    fn table_formatting_truncates() {
        assert_eq!(format_table_value(0.2653), "0.2653");
        assert_eq!(format_table_value((0.2653 + 0.1449 + 0.2716) / 3.0), "0.2272");
        assert_eq!(format_table_value(0.694), "0.694");
        assert_eq!(format_table_value(0.582), "0.582");
        assert_eq!(format_table_value(0.0), "0");
    }

    #[test]
    fn single_report_has_two_columns() {
        let r = EvalReport::from_values("half-gp-avae", "underdetermined", vec![0.1, 0.2, 0.3]);
        let csv = report_to_csv(std::slice::from_ref(&r)).unwrap();
        assert!(csv.lines().all(|l| l.split(',').count() == 2));
        assert_eq!(csv.lines().last(), Some("Average,0.2"));
        assert!((r.average - 0.2).abs() < 1e-12);
        assert!(report_to_csv(&[]).is_err());
    }

    #[test]
    fn json_twin_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("report.csv");
        let r = EvalReport::from_values("gp-avae", "determined", vec![0.11, 0.22, 0.35]);
        write_report(
            std::slice::from_ref(&r),
            7,
            "abc",
            serde_json::json!({"draws": 2}),
            &csv,
        )
        .unwrap();
        let doc = read_report_document(&dir.path().join("report.json")).unwrap();
        assert_eq!(doc.reports, vec![r]);
        assert_eq!(doc.seed, 7);
        let bad = dir.path().join("missing").join("report.csv");
        assert!(matches!(
            write_report(&doc.reports, 0, "", serde_json::Value::Null, &bad),
            Err(Error::Io { .. })
        ));
    }
}
