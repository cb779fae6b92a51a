//! Expert-utilization matrices and their smoothness metrics.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::AdaptedModel;
use crate::error::{Error, Result};
use crate::synthdata::Sample;

const ROW_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Axis {
    Task,
    Era,
}

impl Axis {
    pub fn as_str(self) -> &'static str {
        match self {
            Axis::Task => "task",
            Axis::Era => "era",
        }
    }
}

impl std::fmt::Display for Axis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "task" => Ok(Axis::Task),
            "era" => Ok(Axis::Era),
            other => Err(Error::Config(format!(
                "unknown axis {other:?}; expected task or era"
            ))),
        }
    }
}

/// Mean routing weight per group (row) and expert (column).
#[derive(Debug, Clone, PartialEq)]
pub struct UtilizationMatrix {
    rows: Vec<Vec<f64>>,
}

impl UtilizationMatrix {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.first().map(Vec::len).unwrap_or(0);
        if rows.is_empty() || n == 0 {
            return Err(Error::Report("utilization matrix is empty".into()));
        }
        if let Some(i) = rows.iter().position(|r| r.len() != n) {
            return Err(Error::Report(format!(
                "row {i} has {} experts, expected {n}",
                rows[i].len()
            )));
        }
        Ok(Self { rows })
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn n_groups(&self) -> usize {
        self.rows.len()
    }

    pub fn n_experts(&self) -> usize {
        self.rows[0].len()
    }
}

/// Averages per-sample weight vectors within groups `0..n_groups`.
pub fn utilization_from_weights(
    n_groups: usize,
    entries: &[(usize, Vec<f64>)],
) -> Result<UtilizationMatrix> {
    let n = entries
        .first()
        .map(|(_, w)| w.len())
        .ok_or_else(|| Error::Report("no routing weights supplied".into()))?;
    let mut sums = vec![vec![0.0; n]; n_groups];
    let mut counts = vec![0usize; n_groups];
    for (g, w) in entries {
        if *g >= n_groups {
            return Err(Error::Report(format!("group {g} outside 0..{n_groups}")));
        }
        if w.len() != n {
            return Err(Error::Report(format!(
                "weight vector of length {} in group {g}, expected {n}",
                w.len()
            )));
        }
        for (s, v) in sums[*g].iter_mut().zip(w) {
            *s += v;
        }
        counts[*g] += 1;
    }
    if let Some(g) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Report(format!("group {g} has no samples")));
    }
    for (row, &c) in sums.iter_mut().zip(&counts) {
        for v in row.iter_mut() {
            *v /= c as f64;
        }
    }
    UtilizationMatrix::new(sums)
}

/// Eval-mode routing weights of the chosen gate, averaged per dataset task id
/// (`Axis::Task`) or era id (`Axis::Era`). Uses the first layer's router.
pub fn utilization(
    model: &AdaptedModel,
    samples: &[Sample],
    axis: Axis,
) -> Result<UtilizationMatrix> {
    let cfg = model.config();
    let n_groups = match axis {
        Axis::Task => cfg.head_widths.len(),
        Axis::Era => cfg.n_eras,
    };
    // Routing depends only on metadata, so compute it once per cell.
    let mut cache = std::collections::HashMap::new();
    let mut entries = Vec::with_capacity(samples.len());
    for s in samples {
        let key = (s.task_id, s.era_id);
        let w = match cache.get(&key) {
            Some(w) => Clone::clone(w),
            None => {
                let (wt, we) = model.route(0, s.task_id, s.era_id)?;
                let w = match axis {
                    Axis::Task => wt.into_data(),
                    Axis::Era => we.into_data(),
                };
                cache.insert(key, w.clone());
                w
            }
        };
        let group = match axis {
            Axis::Task => s.task_id,
            Axis::Era => s.era_id,
        };
        entries.push((group, w));
    }
    utilization_from_weights(n_groups, &entries)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothnessReport {
    pub variance: f64,
    pub entropy: f64,
    pub max_min: f64,
}

/// Population variance of a row.
pub fn row_variance(p: &[f64]) -> f64 {
    let n = p.len() as f64;
    let mean = p.iter().sum::<f64>() / n;
    p.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
}

/// Shannon entropy in nats with `0 ln 0 = 0`.
pub fn row_entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&v| v > 0.0)
        .map(|v| v * v.ln())
        .sum::<f64>()
}

pub fn row_max_min(p: &[f64]) -> f64 {
    let max = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = p.iter().copied().fold(f64::INFINITY, f64::min);
    max - min
}

/// Per-row variance, entropy and max-min, averaged with equal row weight.
pub fn smoothness(m: &UtilizationMatrix) -> Result<SmoothnessReport> {
    for (i, row) in m.rows.iter().enumerate() {
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > ROW_TOLERANCE || row.iter().any(|&v| v.is_nan() || v < 0.0) {
            return Err(Error::Contract(format!(
                "utilization row {i} is not a distribution (sum {sum})"
            )));
        }
    }
    let k = m.rows.len() as f64;
    let mean = |f: fn(&[f64]) -> f64| m.rows.iter().map(|r| f(r)).sum::<f64>() / k;
    Ok(SmoothnessReport {
        variance: mean(row_variance),
        entropy: mean(row_entropy),
        max_min: mean(row_max_min),
    })
}

/// Heatmap CSV: header `group,expert,weight`, row-major, LF endings,
/// shortest round-trip float formatting.
pub fn heatmap_csv(m: &UtilizationMatrix) -> String {
    let mut out = String::from("group,expert,weight\n");
    for (g, row) in m.rows.iter().enumerate() {
        for (e, w) in row.iter().enumerate() {
            writeln!(out, "{g},{e},{w:?}").expect("write to string");
        }
    }
    out
}

pub fn export_heatmap_data(m: &UtilizationMatrix, path: &Path) -> Result<()> {
    std::fs::write(path, heatmap_csv(m)).map_err(|e| Error::io(path, e))
}

pub fn parse_heatmap_csv(text: &str) -> Result<UtilizationMatrix> {
    let mut lines = text.lines();
    if lines.next() != Some("group,expert,weight") {
        return Err(Error::Report(
            "heatmap CSV lacks the group,expert,weight header".into(),
        ));
    }
    let mut cells: Vec<(usize, usize, f64)> = Vec::new();
    for (i, line) in lines.enumerate() {
        let bad = || Error::Report(format!("malformed heatmap line {}: {line:?}", i + 2));
        let mut parts = line.split(',');
        let g = parts.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        let e = parts.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        let w = parts.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        if parts.next().is_some() {
            return Err(bad());
        }
        cells.push((g, e, w));
    }
    let n_groups = cells.iter().map(|c| c.0 + 1).max().unwrap_or(0);
    let n_experts = cells.iter().map(|c| c.1 + 1).max().unwrap_or(0);
    if cells.len() != n_groups * n_experts {
        return Err(Error::Report(format!(
            "heatmap has {} cells, expected {n_groups}x{n_experts}",
            cells.len()
        )));
    }
    let mut rows = vec![vec![f64::NAN; n_experts]; n_groups];
    for (g, e, w) in cells {
        rows[g][e] = w;
    }
    UtilizationMatrix::new(rows)
}

pub fn import_heatmap_data(path: &Path) -> Result<UtilizationMatrix> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_heatmap_csv(&text)
}

/// The JSON record written next to each heatmap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothnessRecord {
    pub variant: String,
    pub axis: Axis,
    pub variance: f64,
    pub entropy: f64,
    pub max_min: f64,
}

impl SmoothnessRecord {
    pub fn new(variant: impl Into<String>, axis: Axis, r: SmoothnessReport) -> Self {
        Self {
            variant: variant.into(),
            axis,
            variance: r.variance,
            entropy: r.entropy,
            max_min: r.max_min,
        }
    }
}
