//! Comparison percentages and the tabular result format.

use std::cmp::Ordering;
use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};

/// `100 (C − C*) / C`: share of a policy's cost above the optimum.
pub fn pct_increase_vs_optimal(cost: f64, optimal: f64) -> Result<f64> {
    if !(cost > 0.0) {
        return Err(Error::invalid(format!("cost must be positive, got {cost}")));
    }
    Ok(100.0 * (cost - optimal) / cost)
}

/// `100 (MF − MB) / MB`: model-free cost relative to model-based.
pub fn pct_increase_mf_vs_mb(model_free: f64, model_based: f64) -> Result<f64> {
    if !(model_based > 0.0) {
        return Err(Error::invalid(format!(
            "model-based cost must be positive, got {model_based}"
        )));
    }
    Ok(100.0 * (model_free - model_based) / model_based)
}

/// `100 (MF − C*) / MF`
pub fn pct_mf_vs_optimal(model_free: f64, optimal: f64) -> Result<f64> {
    pct_increase_vs_optimal(model_free, optimal)
}

pub const CSV_HEADER: &str = "param,policy,seed,avg_cost_rate,occupancy,pct_vs_optimal,pct_mf_vs_mb,stderr";

/// One row of an experiment table. `seed == None` marks an aggregate row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentResult {
    pub param: f64,
    pub policy: String,
    pub seed: Option<u64>,
    pub avg_cost_rate: f64,
    pub occupancy: f64,
    pub pct_vs_optimal: Option<f64>,
    pub pct_mf_vs_mb: Option<f64>,
    pub stderr: Option<f64>,
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn row_order(a: &ExperimentResult, b: &ExperimentResult) -> Ordering {
    a.param
        .total_cmp(&b.param)
        .then_with(|| a.policy.cmp(&b.policy))
        // Per-seed rows first, aggregate last.
        .then_with(|| match (a.seed, b.seed) {
            (Some(x), Some(y)) => x.cmp(&y),
            (Some(_), None) => Ordering::Less,
            (None, Some(_)) => Ordering::Greater,
            (None, None) => Ordering::Equal,
        })
}

/// Sorted CSV with [`CSV_HEADER`]. Output depends only on the rows.
pub fn to_csv(rows: &[ExperimentResult]) -> String {
    let mut sorted: Vec<&ExperimentResult> = rows.iter().collect();
    sorted.sort_by(|a, b| row_order(a, b));
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in sorted {
        let seed = r.seed.map(|s| s.to_string()).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.param,
            r.policy,
            seed,
            r.avg_cost_rate,
            r.occupancy,
            cell(r.pct_vs_optimal),
            cell(r.pct_mf_vs_mb),
            cell(r.stderr),
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentage_examples() {
        assert!((pct_increase_vs_optimal(1.1, 1.0).unwrap() - 9.090909090909092).abs() < 1e-12);
        assert!((pct_increase_mf_vs_mb(1.2, 1.0).unwrap() - 20.0).abs() < 1e-12);
        assert!((pct_increase_mf_vs_mb(0.9, 1.0).unwrap() + 10.0).abs() < 1e-12);
        assert!(pct_increase_vs_optimal(0.0, 1.0).is_err());
        assert!(pct_increase_mf_vs_mb(1.0, 0.0).is_err());
    }

    fn row(param: f64, policy: &str, seed: Option<u64>) -> ExperimentResult {
        ExperimentResult {
            param,
            policy: policy.into(),
            seed,
            avg_cost_rate: 1.5,
            occupancy: 2.0,
            pct_vs_optimal: Some(3.25),
            pct_mf_vs_mb: None,
            stderr: seed.is_none().then_some(0.1),
        }
    }

    #[test]
    fn csv_is_sorted_with_aggregate_last() {
        let rows = vec![
            row(0.5, "timer", Some(2)),
            row(0.5, "swiftcache", None),
            row(0.1, "timer", Some(1)),
            row(0.5, "swiftcache", Some(1)),
        ];
        let csv = to_csv(&rows);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines[1], "0.1,timer,1,1.5,2,3.25,,");
        assert_eq!(lines[2], "0.5,swiftcache,1,1.5,2,3.25,,");
        assert_eq!(lines[3], "0.5,swiftcache,,1.5,2,3.25,,0.1");
        assert_eq!(lines[4], "0.5,timer,2,1.5,2,3.25,,");
    }
}
