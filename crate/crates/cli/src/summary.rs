//! Aggregation of per-seed metrics into avg / sd / min / max rows.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub metric: String,
    pub avg: f64,
    /// Population standard deviation.
    pub sd: f64,
    pub min: f64,
    pub max: f64,
    pub values: Vec<f64>,
}

impl SeedSummary {
    pub fn from_values(metric: impl Into<String>, values: Vec<f64>) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let avg = values.iter().sum::<f64>() / n;
        let sd = (values.iter().map(|v| (v - avg).powi(2)).sum::<f64>() / n).sqrt();
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        // Rounding can put the mean of identical values a hair outside them.
        let avg = avg.clamp(min, max);
        Some(Self { metric: metric.into(), avg, sd, min, max, values })
    }
}

/// One row per metric, in metric-name order. `per_seed` maps metric names to
/// the values of the seeds that reported them.
pub fn summarize(per_seed: &BTreeMap<String, Vec<f64>>) -> Vec<SeedSummary> {
    per_seed.iter().filter_map(|(k, v)| SeedSummary::from_values(k.clone(), v.clone())).collect()
}

/// Plain-text table with avg, sd, min and max columns.
pub fn render_table(rows: &[SeedSummary]) -> String {
    let width = rows.iter().map(|r| r.metric.len()).max().unwrap_or(6).max(6);
    let mut out = format!("{:<width$}  {:>9}  {:>9}  {:>9}  {:>9}\n", "metric", "avg", "sd", "min", "max");
    for r in rows {
        out.push_str(&format!("{:<width$}  {:>9.4}  {:>9.4}  {:>9.4}  {:>9.4}\n", r.metric, r.avg, r.sd, r.min, r.max));
    }
    out
}
