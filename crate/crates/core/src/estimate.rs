//! Distances between variability distributions, the equivalent-temperature
//! fit, and aggregation into background-temperature estimates.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{js_divergence, MetricKind, VariabilityDistribution};
use crate::sampling::Temperature;

pub const DEFAULT_BINS: usize = 20;

/// Two-sample distance between variability distributions.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DistanceKind {
    #[default]
    KolmogorovSmirnov,
    JensenShannonBinned { bins: usize },
    SymmetrizedKlBinned { bins: usize },
}

impl DistanceKind {
    pub fn validate(self) -> Result<()> {
        match self {
            Self::KolmogorovSmirnov => Ok(()),
            Self::JensenShannonBinned { bins } | Self::SymmetrizedKlBinned { bins } if bins >= 2 => Ok(()),
            _ => Err(Error::InvalidInput("binned distances need at least 2 bins".into())),
        }
    }

    pub fn distance(self, f: &VariabilityDistribution, g: &VariabilityDistribution) -> Result<f64> {
        check_comparable(f, g)?;
        Ok(match self {
            Self::KolmogorovSmirnov => ks_statistic(&f.values, &g.values),
            Self::JensenShannonBinned { bins } => {
                let (p, q) = binned_pair(f.metric, &f.values, &g.values, bins);
                js_divergence(&p, &q)
            }
            Self::SymmetrizedKlBinned { bins } => {
                let (p, q) = binned_pair(f.metric, &f.values, &g.values, bins);
                symmetrized_kl(&p, &q)
            }
        })
    }
}

impl fmt::Display for DistanceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::KolmogorovSmirnov => f.write_str("ks"),
            Self::JensenShannonBinned { bins } => write!(f, "js:{bins}"),
            Self::SymmetrizedKlBinned { bins } => write!(f, "kl:{bins}"),
        }
    }
}

impl FromStr for DistanceKind {
    type Err = Error;

    /// `ks`, `js`, `kl`, optionally with a bin count (`js:40`).
    fn from_str(s: &str) -> Result<Self> {
        let (name, bins) = match s.split_once(':') {
            Some((n, b)) => (
                n,
                b.parse()
                    .map_err(|_| Error::InvalidInput(format!("bad bin count in {s:?}")))?,
            ),
            None => (s, DEFAULT_BINS),
        };
        let kind = match name {
            "ks" | "kolmogorov_smirnov" => Self::KolmogorovSmirnov,
            "js" | "jensen_shannon_binned" => Self::JensenShannonBinned { bins },
            "kl" | "symmetrized_kl_binned" => Self::SymmetrizedKlBinned { bins },
            _ => return Err(Error::InvalidInput(format!("unknown distance {s:?}"))),
        };
        kind.validate()?;
        Ok(kind)
    }
}

fn check_comparable(f: &VariabilityDistribution, g: &VariabilityDistribution) -> Result<()> {
    if f.metric != g.metric {
        return Err(Error::MetricMismatch {
            left: f.metric.to_string(),
            right: g.metric.to_string(),
        });
    }
    if f.is_empty() || g.is_empty() {
        return Err(Error::Empty("cannot compare an empty distribution".into()));
    }
    Ok(())
}

/// Two-sample Kolmogorov-Smirnov statistic between `f` and `g`.
pub fn ks_distance(f: &VariabilityDistribution, g: &VariabilityDistribution) -> Result<f64> {
    DistanceKind::KolmogorovSmirnov.distance(f, g)
}

/// `sup_x |F(x) - G(x)|` over the empirical CDFs of two non-empty samples.
///
/// Walks both sorted samples in step; the supremum is attained just after
/// one of the sample values, where both CDFs have absorbed every tied
/// observation. The gap is tracked as the integer `|i m - j n|` and divided
/// once, so the result is exact up to that final division.
pub fn ks_statistic(xs: &[f64], ys: &[f64]) -> f64 {
    assert!(!xs.is_empty() && !ys.is_empty(), "ks_statistic needs non-empty samples");
    let mut a = xs.to_vec();
    let mut b = ys.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len() as i128, b.len() as i128);
    let (mut i, mut j) = (0usize, 0usize);
    let mut best: i128 = 0;
    while i < a.len() && j < b.len() {
        let x = if a[i].total_cmp(&b[j]).is_le() { a[i] } else { b[j] };
        while i < a.len() && a[i].total_cmp(&x).is_le() {
            i += 1;
        }
        while j < b.len() && b[j].total_cmp(&x).is_le() {
            j += 1;
        }
        best = best.max((i as i128 * m - j as i128 * n).abs());
    }
    // Once one sample is exhausted its CDF is 1 and the other's only grows
    // towards 1, so the gap can no longer increase.
    best as f64 / (n * m) as f64
}

/// Normalized histograms of two samples over shared bins: the metric's fixed
/// range where it has one, the pooled sample range otherwise.
pub fn binned_pair(metric: MetricKind, xs: &[f64], ys: &[f64], bins: usize) -> (Vec<f64>, Vec<f64>) {
    let (lo, hi) = metric.range().unwrap_or_else(|| {
        let all = xs.iter().chain(ys);
        let lo = all.clone().copied().fold(f64::INFINITY, f64::min);
        let hi = all.copied().fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    });
    (histogram(xs, lo, hi, bins), histogram(ys, lo, hi, bins))
}

/// Normalized histogram with `bins` equal-width bins over `[lo, hi]`; the
/// last bin is closed. Values outside the range are clamped into the end
/// bins.
pub fn histogram(values: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<f64> {
    let mut counts = histogram_counts(values, lo, hi, bins);
    let n = values.len().max(1) as f64;
    counts.iter_mut().for_each(|c| *c /= n);
    counts
}

pub(crate) fn histogram_counts(values: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<f64> {
    let mut counts = vec![0.0; bins];
    let width = (hi - lo) / bins as f64;
    for v in values {
        let k = if width > 0.0 {
            (((v - lo) / width).floor().max(0.0) as usize).min(bins - 1)
        } else {
            0
        };
        counts[k] += 1.0;
    }
    counts
}

/// `KL(p||q) + KL(q||p)` in nats, with half a pseudo-count of mass spread
/// over every bin so that empty bins keep the divergence finite.
pub fn symmetrized_kl(p: &[f64], q: &[f64]) -> f64 {
    let smooth = |d: &[f64]| -> Vec<f64> {
        let eps = 0.5 / d.len() as f64;
        d.iter().map(|v| (v + eps) / (1.0 + 0.5)).collect()
    };
    let (p, q) = (smooth(p), smooth(q));
    p.iter()
        .zip(&q)
        .map(|(a, b)| (a - b) * (a / b).ln())
        .sum::<f64>()
        .max(0.0)
}

/// The fitted equivalent temperature for one reference model, one
/// environment and one prompt set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalentTemperatureEstimate {
    pub reference_id: String,
    #[serde(default)]
    pub environment: String,
    #[serde(default)]
    pub prompt_set: String,
    pub grid: Vec<Temperature>,
    pub distances: Vec<f64>,
    pub t_hat: f64,
    pub min_distance: f64,
    pub minimizing_set: Vec<Temperature>,
    /// Vertex of a parabola through the minimum and its grid neighbours;
    /// only computed when requested.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interpolated_t_hat: Option<f64>,
}

impl EquivalentTemperatureEstimate {
    /// Fits a precomputed distance curve: every grid point at the minimum
    /// distance is a minimizer and `t_hat` is their mean.
    pub fn from_curve(reference_id: impl Into<String>, grid: Vec<Temperature>, distances: Vec<f64>) -> Result<Self> {
        if grid.is_empty() || grid.len() != distances.len() {
            return Err(Error::Empty("distance curve is empty or ragged".into()));
        }
        if let Some(d) = distances.iter().find(|d| !d.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite distance {d}")));
        }
        let min_distance = distances.iter().copied().fold(f64::INFINITY, f64::min);
        let minimizing_set: Vec<Temperature> = grid
            .iter()
            .zip(&distances)
            .filter(|(_, d)| **d == min_distance)
            .map(|(t, _)| *t)
            .collect();
        let t_hat = minimizing_set.iter().map(|t| t.value()).sum::<f64>() / minimizing_set.len() as f64;
        Ok(Self {
            reference_id: reference_id.into(),
            environment: String::new(),
            prompt_set: String::new(),
            grid,
            distances,
            t_hat,
            min_distance,
            minimizing_set,
            interpolated_t_hat: None,
        })
    }

    pub fn with_cell(mut self, environment: impl Into<String>, prompt_set: impl Into<String>) -> Self {
        self.environment = environment.into();
        self.prompt_set = prompt_set.into();
        self
    }

    /// Parabolic refinement around a unique interior minimum.
    pub fn quadratic_refinement(&self) -> Option<f64> {
        if self.minimizing_set.len() != 1 {
            return None;
        }
        let i = self.grid.iter().position(|t| *t == self.minimizing_set[0])?;
        if i == 0 || i + 1 >= self.grid.len() {
            return None;
        }
        let (x0, x1, x2) = (self.grid[i - 1].value(), self.grid[i].value(), self.grid[i + 1].value());
        let (y0, y1, y2) = (self.distances[i - 1], self.distances[i], self.distances[i + 1]);
        let denom = (x0 - x1) * (x0 - x2) * (x1 - x2);
        let a = (x2 * (y1 - y0) + x1 * (y0 - y2) + x0 * (y2 - y1)) / denom;
        let b = (x2 * x2 * (y0 - y1) + x1 * x1 * (y2 - y0) + x0 * x0 * (y1 - y2)) / denom;
        if a <= 0.0 {
            return None;
        }
        Some((-b / (2.0 * a)).clamp(x0, x2))
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "temperature,distance,minimizer")?;
        for (t, d) in self.grid.iter().zip(&self.distances) {
            writeln!(out, "{},{},{}", t, d, u8::from(self.minimizing_set.contains(t)))?;
        }
        Ok(())
    }
}

/// One metric's contribution to a fit: reference distributions per grid
/// temperature, the system-under-test distribution, and a weight.
#[derive(Debug, Clone)]
pub struct MetricCurves<'a> {
    pub reference: &'a BTreeMap<Temperature, VariabilityDistribution>,
    pub sut: &'a VariabilityDistribution,
    pub weight: f64,
}

/// Fits the equivalent temperature from a single metric.
pub fn fit_equivalent_temperature(
    reference_id: &str,
    reference_curves: &BTreeMap<Temperature, VariabilityDistribution>,
    sut: &VariabilityDistribution,
    distance: DistanceKind,
) -> Result<EquivalentTemperatureEstimate> {
    fit_weighted(
        reference_id,
        &[MetricCurves {
            reference: reference_curves,
            sut,
            weight: 1.0,
        }],
        distance,
    )
}

/// Fits the equivalent temperature against the weighted mean of per-metric
/// distances. Every metric must cover the same grid.
pub fn fit_weighted(
    reference_id: &str,
    metrics: &[MetricCurves<'_>],
    distance: DistanceKind,
) -> Result<EquivalentTemperatureEstimate> {
    distance.validate()?;
    let first = metrics
        .first()
        .ok_or_else(|| Error::Empty("no metrics to fit".into()))?;
    if first.reference.is_empty() {
        return Err(Error::Empty(format!("no reference curves for {reference_id}")));
    }
    let grid: Vec<Temperature> = first.reference.keys().copied().collect();
    let total_weight: f64 = metrics.iter().map(|m| m.weight).sum();
    if !(total_weight > 0.0) || metrics.iter().any(|m| !(m.weight >= 0.0)) {
        return Err(Error::InvalidInput(
            "metric weights must be >= 0 with a positive sum".into(),
        ));
    }
    let mut distances = vec![0.0; grid.len()];
    for m in metrics {
        if !m.reference.keys().eq(grid.iter()) {
            return Err(Error::InvalidInput(format!(
                "reference curves for {} do not share the fit grid",
                m.sut.metric
            )));
        }
        for (slot, f) in distances.iter_mut().zip(m.reference.values()) {
            *slot += m.weight * distance.distance(f, m.sut)?;
        }
    }
    if metrics.len() > 1 || total_weight != 1.0 {
        distances.iter_mut().for_each(|d| *d /= total_weight);
    }
    EquivalentTemperatureEstimate::from_curve(reference_id, grid, distances)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Uncertainty {
    pub min: f64,
    pub max: f64,
    /// Population standard deviation of the per-reference estimates.
    pub std_across_references: f64,
    /// Population standard deviation of all cell estimates.
    pub std_across_cells: f64,
    pub n_references: usize,
    pub n_cells: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackgroundTemperatureReport {
    /// Mean `t_hat` over the cells of each reference model.
    pub per_reference: BTreeMap<String, f64>,
    /// Mean of `per_reference`.
    pub overall: f64,
    pub breakdown: Vec<EquivalentTemperatureEstimate>,
    pub uncertainty: Uncertainty,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn population_std(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64).sqrt()
}

/// Averages cell estimates per reference model, then across references,
/// with uniform weights at both levels.
pub fn aggregate_background(
    per_cell: &BTreeMap<String, Vec<EquivalentTemperatureEstimate>>,
) -> Result<BackgroundTemperatureReport> {
    if per_cell.is_empty() {
        return Err(Error::Empty("no reference estimates to aggregate".into()));
    }
    let mut per_reference = BTreeMap::new();
    let mut breakdown = Vec::new();
    for (reference, cells) in per_cell {
        if cells.is_empty() {
            return Err(Error::Empty(format!("reference {reference} has no estimates")));
        }
        let t: Vec<f64> = cells.iter().map(|c| c.t_hat).collect();
        per_reference.insert(reference.clone(), mean(&t));
        breakdown.extend(cells.iter().cloned());
    }
    let refs: Vec<f64> = per_reference.values().copied().collect();
    let cells: Vec<f64> = breakdown.iter().map(|c| c.t_hat).collect();
    let uncertainty = Uncertainty {
        min: cells.iter().copied().fold(f64::INFINITY, f64::min),
        max: cells.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        std_across_references: population_std(&refs),
        std_across_cells: population_std(&cells),
        n_references: refs.len(),
        n_cells: cells.len(),
    };
    Ok(BackgroundTemperatureReport {
        overall: mean(&refs),
        per_reference,
        breakdown,
        uncertainty,
    })
}

/// Distance matrix between two reference families, rows indexed by the
/// first family's temperatures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub rows: Vec<Temperature>,
    pub cols: Vec<Temperature>,
    pub values: Vec<Vec<f64>>,
}

impl Heatmap {
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        write!(out, "T")?;
        for c in &self.cols {
            write!(out, ",{c}")?;
        }
        writeln!(out)?;
        for (t, row) in self.rows.iter().zip(&self.values) {
            write!(out, "{t}")?;
            for v in row {
                write!(out, ",{v}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

pub fn cross_reference_heatmap(
    curves_a: &BTreeMap<Temperature, VariabilityDistribution>,
    curves_b: &BTreeMap<Temperature, VariabilityDistribution>,
    distance: DistanceKind,
) -> Result<Heatmap> {
    if curves_a.is_empty() || curves_b.is_empty() {
        return Err(Error::Empty("heatmap needs two non-empty reference families".into()));
    }
    let values = curves_a
        .values()
        .map(|f| {
            curves_b
                .values()
                .map(|g| distance.distance(f, g))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    Ok(Heatmap {
        rows: curves_a.keys().copied().collect(),
        cols: curves_b.keys().copied().collect(),
        values,
    })
}
