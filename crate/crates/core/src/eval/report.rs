//! Errors normalized by the matching plain-training error, averaged across
//! (dataset, seed) cells.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const STL: &str = "stl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub method: String,
    pub dataset: String,
    pub seed: u64,
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRow {
    pub method: String,
    pub dataset: String,
    pub seed: u64,
    pub error: f64,
    pub normalized: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub cells: usize,
    pub mean_error: f64,
    pub mean_normalized: f64,
    pub se_normalized: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AggregateReport {
    pub rows: Vec<CellRow>,
    pub summary: Vec<MethodSummary>,
}

/// Mean and standard error of the mean (sample standard deviation over
/// `sqrt(n)`; zero for a single value).
pub fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

pub fn aggregate_normalized_error(records: &[ErrorRecord]) -> Result<AggregateReport> {
    let mut stl = BTreeMap::new();
    for r in records.iter().filter(|r| r.method == STL) {
        if stl.insert((r.dataset.as_str(), r.seed), r.error).is_some() {
            return Err(Error::Aggregation(format!(
                "duplicate {STL} record for dataset {} seed {}",
                r.dataset, r.seed
            )));
        }
    }

    let mut rows = Vec::with_capacity(records.len());
    let mut by_method: BTreeMap<&str, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in records {
        let base = *stl.get(&(r.dataset.as_str(), r.seed)).ok_or_else(|| {
            Error::Aggregation(format!(
                "no {STL} record for dataset {} seed {} (needed by {})",
                r.dataset, r.seed, r.method
            ))
        })?;
        if !(base > 0.0) {
            return Err(Error::Aggregation(format!(
                "{STL} error for dataset {} seed {} is {base}; normalization needs it positive",
                r.dataset, r.seed
            )));
        }
        let normalized = r.error / base;
        rows.push(CellRow {
            method: r.method.clone(),
            dataset: r.dataset.clone(),
            seed: r.seed,
            error: r.error,
            normalized,
        });
        let entry = by_method.entry(r.method.as_str()).or_default();
        entry.0.push(r.error);
        entry.1.push(normalized);
    }

    let summary = by_method
        .into_iter()
        .map(|(method, (errors, normalized))| {
            let (mean_normalized, se_normalized) = mean_and_se(&normalized);
            MethodSummary {
                method: method.to_string(),
                cells: errors.len(),
                mean_error: mean_and_se(&errors).0,
                mean_normalized,
                se_normalized,
            }
        })
        .collect();
    Ok(AggregateReport { rows, summary })
}

impl AggregateReport {
    pub fn summary_for(&self, method: &str) -> Option<&MethodSummary> {
        self.summary.iter().find(|s| s.method == method)
    }

    /// Tab-separated table: one row per cell, then a summary block.
    pub fn to_table(&self) -> String {
        let mut out = String::from("method\tdataset\tseed\terror\tnormalized\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{:.6}\t{:.6}",
                r.method, r.dataset, r.seed, r.error, r.normalized
            );
        }
        out.push_str("\n# summary\nmethod\tcells\tmean_error\tmean_normalized\tse_normalized\n");
        for s in &self.summary {
            let _ = writeln!(
                out,
                "{}\t{}\t{:.6}\t{:.6}\t{:.6}",
                s.method, s.cells, s.mean_error, s.mean_normalized, s.se_normalized
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(method: &str, dataset: &str, seed: u64, error: f64) -> ErrorRecord {
        ErrorRecord {
            method: method.into(),
            dataset: dataset.into(),
            seed,
            error,
        }
    }

    #[test]
    fn single_cell_equal_error_normalizes_to_one() {
        let r = aggregate_normalized_error(&[rec("stl", "a", 0, 0.3), rec("aft", "a", 0, 0.3)]).unwrap();
        assert_eq!(r.summary_for("aft").unwrap().mean_normalized, 1.0);
        assert_eq!(r.summary_for("stl").unwrap().mean_normalized, 1.0);
    }

    #[test]
    fn half_error_everywhere() {
        let mut recs = Vec::new();
        for (d, s, e) in [("a", 0, 0.2), ("a", 1, 0.4), ("b", 0, 0.3)] {
            recs.push(rec("stl", d, s, e));
            recs.push(rec("kd", d, s, e / 2.0));
        }
        let r = aggregate_normalized_error(&recs).unwrap();
        let kd = r.summary_for("kd").unwrap();
        assert!((kd.mean_normalized - 0.5).abs() < 1e-15);
        assert!(kd.se_normalized < 1e-15);
        assert_eq!(kd.cells, 3);
    }

    #[test]
    fn missing_stl_names_the_cell() {
        let err = aggregate_normalized_error(&[rec("stl", "a", 0, 0.3), rec("aft", "b", 4, 0.3)])
            .unwrap_err()
            .to_string();
        assert!(err.contains("dataset b seed 4"), "{err}");
        assert!(aggregate_normalized_error(&[rec("stl", "a", 0, 0.0)]).is_err());
    }

    #[test]
    fn table_has_one_row_per_cell() {
        let r = aggregate_normalized_error(&[rec("stl", "a", 0, 0.25), rec("aft", "a", 0, 0.2)]).unwrap();
        let t = r.to_table();
        assert!(t.contains("aft\ta\t0\t0.200000\t0.800000"));
        assert!(t.contains("# summary"));
    }

    #[test]
    fn standard_error_matches_hand_computation() {
        let (m, se) = mean_and_se(&[1.0, 2.0, 3.0, 6.0]);
        assert_eq!(m, 3.0);
        // Sample variance 14/3, SE = sqrt(14/12).
        assert!((se - (14.0f64 / 12.0).sqrt()).abs() < 1e-15);
    }
}
