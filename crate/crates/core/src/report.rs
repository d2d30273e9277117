//! Report files: the JSON summary plus CSV plot data for every figure-style
//! view of a campaign. Nothing here is rendered; all output is plain data
//! that is a pure function of the store and the config.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::estimate::{histogram, BackgroundTemperatureReport, DistanceKind, Heatmap};
use crate::metrics::{csv_field, MetricKind, VariabilityDistribution};
use crate::sampling::Temperature;

/// Bins of every plot-data histogram.
pub const PLOT_BINS: usize = 20;
const KDE_POINTS: usize = 101;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SutCell {
    pub environment: String,
    pub backend_id: String,
    /// Whether the environment is known (synthetic) or only sampled (remote).
    pub observed: bool,
    pub n_prompts: usize,
    pub mean: f64,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    /// The effective campaign config, defaults resolved.
    pub config: serde_json::Value,
    pub sut_id: String,
    pub metrics: Vec<(MetricKind, f64)>,
    pub distance: DistanceKind,
    pub estimate: BackgroundTemperatureReport,
    pub sut: Vec<SutCell>,
    pub notes: Vec<String>,
}

/// Summary plus named CSV files.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportBundle {
    pub summary: ReportSummary,
    pub files: BTreeMap<String, String>,
}

impl ReportBundle {
    /// Writes `report.json` and every CSV into `dir`, creating it.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut json = serde_json::to_string_pretty(&self.summary)?;
        json.push('\n');
        fs::write(dir.join("report.json"), json)?;
        for (name, body) in &self.files {
            fs::write(dir.join(name), body)?;
        }
        Ok(())
    }

    /// Table with one row for the system under test: the estimate against
    /// each reference, then the overall mean.
    pub fn summary_table(&self) -> String {
        summary_table(&self.summary.sut_id, &self.summary.estimate)
    }
}

pub fn summary_table(sut_id: &str, report: &BackgroundTemperatureReport) -> String {
    let refs: Vec<&String> = report.per_reference.keys().collect();
    let mut header = vec!["model".to_string()];
    header.extend(refs.iter().map(|r| format!("T_bg({r})")));
    header.push("mean T_bg".into());
    let mut row = vec![sut_id.to_string()];
    row.extend(report.per_reference.values().map(|v| format!("{v:.3}")));
    row.push(format!("{:.3}", report.overall));
    let widths: Vec<usize> = header.iter().zip(&row).map(|(h, r)| h.len().max(r.len())).collect();
    let line = |cells: &[String]| {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect::<Vec<_>>()
            .join(" | ")
            .trim_end()
            .to_string()
    };
    let rule = widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("-+-");
    format!("{}\n{}\n{}\n", line(&header), rule, line(&row))
}

/// Plot range of a metric: its fixed range or the range of the values.
pub fn plot_range(metric: MetricKind, dists: &[&VariabilityDistribution]) -> (f64, f64) {
    metric.range().unwrap_or_else(|| {
        let values = dists.iter().flat_map(|d| d.values.iter().copied());
        let lo = values.clone().fold(f64::INFINITY, f64::min);
        let hi = values.fold(f64::NEG_INFINITY, f64::max);
        if hi > lo {
            (lo, hi)
        } else {
            (lo - 0.5, lo + 0.5)
        }
    })
}

/// Gaussian-kernel bandwidth by Silverman's rule of thumb; `None` for a
/// sample without spread.
pub fn silverman_bandwidth(values: &[f64]) -> Option<f64> {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt();
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let x = p * (n - 1.0);
        let (i, f) = (x.floor() as usize, x - x.floor());
        sorted[i] + f * (sorted[(i + 1).min(sorted.len() - 1)] - sorted[i])
    };
    let iqr = q(0.75) - q(0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    (spread > 0.0).then(|| 0.9 * spread * n.powf(-0.2))
}

pub fn gaussian_kde(values: &[f64], bandwidth: f64, x: f64) -> f64 {
    let norm = 1.0 / (values.len() as f64 * bandwidth * (2.0 * std::f64::consts::PI).sqrt());
    norm * values
        .iter()
        .map(|v| (-0.5 * ((x - v) / bandwidth).powi(2)).exp())
        .sum::<f64>()
}

/// `label,bin_lo,bin_hi,fraction` rows for each labelled distribution.
pub fn histogram_csv(rows: &[(String, &VariabilityDistribution)], lo: f64, hi: f64) -> String {
    let mut out = String::from("label,bin_lo,bin_hi,fraction\n");
    let width = (hi - lo) / PLOT_BINS as f64;
    for (label, d) in rows {
        let label = csv_field(label);
        for (k, frac) in histogram(&d.values, lo, hi, PLOT_BINS).iter().enumerate() {
            let _ = writeln!(
                out,
                "{label},{},{},{frac}",
                lo + k as f64 * width,
                lo + (k + 1) as f64 * width
            );
        }
    }
    out
}

/// `label,x,density,point_mass` rows. A distribution without spread is one
/// row at its value with `point_mass = 1` in place of a density curve.
pub fn kde_csv(rows: &[(String, &VariabilityDistribution)], lo: f64, hi: f64) -> String {
    let mut out = String::from("label,x,density,point_mass\n");
    for (label, d) in rows {
        let label = csv_field(label);
        match silverman_bandwidth(&d.values) {
            None => {
                let _ = writeln!(out, "{label},{},,1", d.values[0]);
            }
            Some(h) => {
                for i in 0..KDE_POINTS {
                    let x = lo + (hi - lo) * i as f64 / (KDE_POINTS - 1) as f64;
                    let _ = writeln!(out, "{label},{x},{},0", gaussian_kde(&d.values, h, x));
                }
            }
        }
    }
    out
}

/// Reference and SUT histograms over shared bins.
pub fn side_by_side_csv(reference: &VariabilityDistribution, sut: &VariabilityDistribution) -> String {
    let (lo, hi) = plot_range(reference.metric, &[reference, sut]);
    let width = (hi - lo) / PLOT_BINS as f64;
    let f = histogram(&reference.values, lo, hi, PLOT_BINS);
    let g = histogram(&sut.values, lo, hi, PLOT_BINS);
    let mut out = String::from("bin_lo,bin_hi,reference,sut\n");
    for k in 0..PLOT_BINS {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            lo + k as f64 * width,
            lo + (k + 1) as f64 * width,
            f[k],
            g[k]
        );
    }
    out
}

pub fn heatmap_csv(h: &Heatmap) -> String {
    let mut buf = Vec::new();
    h.write_csv(&mut buf).expect("writing to memory");
    String::from_utf8(buf).expect("CSV is UTF-8")
}

/// The grid point closest to `t`, lower on ties.
pub fn nearest_grid_point(grid: &[Temperature], t: f64) -> Temperature {
    *grid
        .iter()
        .min_by(|a, b| (a.value() - t).abs().total_cmp(&(b.value() - t).abs()))
        .expect("non-empty grid")
}
