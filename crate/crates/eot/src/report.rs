//! Aggregation of metrics files into a summary CSV and per-frame plot data.
//!
//! CSV columns: `scenario,method,alpha,metric,mean,std,n`, one row per
//! (scenario, method, alpha, metric), sorted by those keys. `std` is the
//! sample standard deviation (0 for a single run). Metrics are the run
//! means `iou_xy`, `iou_yz`, `iou_zx` and `rmse_v`.

use crate::error::{io_at, Result};
use crate::experiment::RunMetrics;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

pub const CSV_HEADER: &str = "scenario,method,alpha,metric,mean,std,n";
pub const METRICS: [&str; 4] = ["iou_xy", "iou_yz", "iou_zx", "rmse_v"];

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
struct Key {
    scenario: String,
    method: String,
    // alpha as ordered bits of a non-negative float (None sorts first)
    alpha: Option<u64>,
}

impl Key {
    fn of(m: &RunMetrics) -> Self {
        Self {
            scenario: m.scenario.clone().unwrap_or_default(),
            method: m.method.clone(),
            alpha: m.alpha.map(|a| a.max(0.0).to_bits()),
        }
    }

    fn alpha(&self) -> Option<f64> {
        self.alpha.map(f64::from_bits)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub scenario: String,
    pub method: String,
    pub alpha: Option<f64>,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

fn metric_value(m: &RunMetrics, name: &str) -> f64 {
    match name {
        "iou_xy" => m.mean_iou_xy,
        "iou_yz" => m.mean_iou_yz,
        "iou_zx" => m.mean_iou_zx,
        _ => m.rmse_v,
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn groups(runs: &[RunMetrics]) -> BTreeMap<Key, Vec<&RunMetrics>> {
    let mut g: BTreeMap<Key, Vec<&RunMetrics>> = BTreeMap::new();
    for r in runs {
        g.entry(Key::of(r)).or_default().push(r);
    }
    g
}

pub fn summarize(runs: &[RunMetrics]) -> Vec<SummaryRow> {
    let mut rows = Vec::new();
    for (key, rs) in groups(runs) {
        for metric in METRICS {
            let xs: Vec<f64> = rs.iter().map(|r| metric_value(r, metric)).collect();
            let (mean, std) = mean_std(&xs);
            rows.push(SummaryRow {
                scenario: key.scenario.clone(),
                method: key.method.clone(),
                alpha: key.alpha(),
                metric: metric.to_string(),
                mean,
                std,
                n: xs.len(),
            });
        }
    }
    rows
}

pub fn to_csv(rows: &[SummaryRow]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in rows {
        let alpha = r.alpha.map(|a| a.to_string()).unwrap_or_default();
        let _ = writeln!(s, "{},{},{},{},{},{},{}", r.scenario, r.method, alpha, r.metric, r.mean, r.std, r.n);
    }
    s
}

/// Frame-wise mean IOU over the runs of one group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotSeries {
    pub scenario: String,
    pub method: String,
    pub alpha: Option<f64>,
    pub runs: usize,
    pub iou_xy: Vec<f64>,
    pub iou_yz: Vec<f64>,
    pub iou_zx: Vec<f64>,
}

fn framewise_mean(rs: &[&RunMetrics], pick: fn(&RunMetrics) -> &Vec<f64>) -> Vec<f64> {
    let len = rs.iter().map(|r| pick(r).len()).min().unwrap_or(0);
    (0..len).map(|k| rs.iter().map(|r| pick(r)[k]).sum::<f64>() / rs.len() as f64).collect()
}

pub fn plot_data(runs: &[RunMetrics]) -> Vec<PlotSeries> {
    groups(runs)
        .into_iter()
        .map(|(key, rs)| PlotSeries {
            alpha: key.alpha(),
            runs: rs.len(),
            iou_xy: framewise_mean(&rs, |r| &r.iou_xy),
            iou_yz: framewise_mean(&rs, |r| &r.iou_yz),
            iou_zx: framewise_mean(&rs, |r| &r.iou_zx),
            scenario: key.scenario,
            method: key.method,
        })
        .collect()
}

pub fn load_metrics(path: &Path) -> Result<RunMetrics> {
    let text = std::fs::read_to_string(path).map_err(io_at(path))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn save_metrics(path: &Path, m: &RunMetrics) -> Result<()> {
    let text = serde_json::to_string_pretty(m)?;
    std::fs::write(path, text + "\n").map_err(io_at(path))
}

/// Metrics files matching `pattern`, in path order.
pub fn load_glob(pattern: &str) -> Result<Vec<RunMetrics>> {
    let mut paths: Vec<_> = glob::glob(pattern)?.filter_map(|p| p.ok()).collect();
    paths.sort();
    paths.iter().map(|p| load_metrics(p)).collect()
}

pub fn write_report(runs: &[RunMetrics], csv: &Path, plot: Option<&Path>) -> Result<()> {
    std::fs::write(csv, to_csv(&summarize(runs))).map_err(io_at(csv))?;
    if let Some(p) = plot {
        let text = serde_json::to_string_pretty(&plot_data(runs))?;
        std::fs::write(p, text + "\n").map_err(io_at(p))?;
    }
    Ok(())
}
