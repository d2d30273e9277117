//! Python bindings. Results that are structured on the Rust side (fits,
//! reports) cross over as plain dicts and lists.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use bgtemp::backend::{run_seed, Generator, SyntheticGenerator};
use bgtemp::campaign::{self, Campaign as CoreCampaign, Overrides};
use bgtemp::estimate::{self, DistanceKind, EquivalentTemperatureEstimate};
use bgtemp::lab::{PerturbationModel, SyntheticLMConfig};
use bgtemp::metrics::{self, DistributionSource, MetricKind, ResponseBundle, VariabilityDistribution};
use bgtemp::sampling::{self, LogitVector, ProbabilityVector, SeededRng, Temperature};
use bgtemp::store::{Prompt, PromptCategory};

fn py_err(e: bgtemp::Error) -> PyErr {
    match e {
        bgtemp::Error::Io(e) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn temperature(t: f64) -> PyResult<Temperature> {
    Temperature::new(t).map_err(py_err)
}

/// Serializes through JSON so Python sees ordinary dicts.
fn to_py<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn logits(values: Vec<f64>) -> PyResult<LogitVector> {
    LogitVector::new(values).map_err(py_err)
}

#[pyfunction]
fn softmax(z: Vec<f64>) -> PyResult<Vec<f64>> {
    Ok(sampling::softmax(&logits(z)?).as_slice().to_vec())
}

/// Softmax of `z / t`; one-hot on the first maximum when `t == 0`.
#[pyfunction]
fn apply_temperature(z: Vec<f64>, t: f64) -> PyResult<Vec<f64>> {
    Ok(sampling::apply_temperature(&logits(z)?, temperature(t)?)
        .as_slice()
        .to_vec())
}

#[pyfunction]
fn entropy(p: Vec<f64>) -> PyResult<f64> {
    Ok(sampling::entropy(&ProbabilityVector::new(p).map_err(py_err)?))
}

#[pyfunction]
fn sample_token(p: Vec<f64>, seed: u64) -> PyResult<u32> {
    let p = ProbabilityVector::new(p).map_err(py_err)?;
    Ok(sampling::sample_token(&p, &mut SeededRng::new(seed)))
}

#[pyfunction]
fn exact_match_fraction(texts: Vec<String>) -> PyResult<f64> {
    metrics::exact_match_fraction(&ResponseBundle::from_texts("p", &texts)).map_err(py_err)
}

#[pyfunction]
fn first_divergence_index(texts: Vec<String>) -> PyResult<f64> {
    metrics::first_divergence_index(&ResponseBundle::from_texts("p", &texts)).map_err(py_err)
}

/// `(mean, std)` of pairwise character edit distances.
#[pyfunction]
fn edit_distance_stats(texts: Vec<String>) -> PyResult<(f64, f64)> {
    let s = metrics::edit_distance_stats(&ResponseBundle::from_texts("p", &texts)).map_err(py_err)?;
    Ok((s.mean, s.std))
}

#[pyfunction]
fn js_divergence(p: Vec<f64>, q: Vec<f64>) -> PyResult<f64> {
    if p.len() != q.len() {
        return Err(PyValueError::new_err("distributions differ in length"));
    }
    Ok(metrics::js_divergence(&p, &q))
}

fn sample(metric: MetricKind, values: Vec<f64>) -> VariabilityDistribution {
    VariabilityDistribution {
        metric,
        prompt_ids: (0..values.len()).map(|i| i.to_string()).collect(),
        values,
        source: DistributionSource {
            backend_id: "python".into(),
            temperature: Temperature::ZERO,
            environment: "python".into(),
        },
        omitted: Vec::new(),
    }
}

fn metric_kind(name: &str) -> PyResult<MetricKind> {
    name.parse().map_err(py_err)
}

fn distance_kind(name: &str) -> PyResult<DistanceKind> {
    name.parse().map_err(py_err)
}

/// Two-sample Kolmogorov-Smirnov statistic.
#[pyfunction]
fn ks_distance(f: Vec<f64>, g: Vec<f64>) -> PyResult<f64> {
    let m = MetricKind::ExactMatchFraction;
    estimate::ks_distance(&sample(m, f), &sample(m, g)).map_err(py_err)
}

/// Fits the equivalent temperature of `sut` against reference samples
/// keyed by temperature.
#[pyfunction]
#[pyo3(signature = (reference, sut, distance = "ks", metric = "exact_match_fraction", reference_id = "reference"))]
fn fit_equivalent_temperature<'py>(
    py: Python<'py>,
    reference: BTreeMap<String, Vec<f64>>,
    sut: Vec<f64>,
    distance: &str,
    metric: &str,
    reference_id: &str,
) -> PyResult<Bound<'py, PyAny>> {
    let metric = metric_kind(metric)?;
    let curves = reference
        .into_iter()
        .map(|(t, v)| {
            let t: f64 = t
                .parse()
                .map_err(|_| PyValueError::new_err(format!("bad temperature {t:?}")))?;
            Ok((temperature(t)?, sample(metric, v)))
        })
        .collect::<PyResult<BTreeMap<_, _>>>()?;
    let est =
        estimate::fit_equivalent_temperature(reference_id, &curves, &sample(metric, sut), distance_kind(distance)?)
            .map_err(py_err)?;
    to_py(py, &est)
}

/// Fit from an already computed distance curve.
#[pyfunction]
fn fit_curve<'py>(py: Python<'py>, grid: Vec<f64>, distances: Vec<f64>) -> PyResult<Bound<'py, PyAny>> {
    let grid = grid.into_iter().map(temperature).collect::<PyResult<Vec<_>>>()?;
    to_py(
        py,
        &EquivalentTemperatureEstimate::from_curve("curve", grid, distances).map_err(py_err)?,
    )
}

/// Mean over cells per reference, then over references.
#[pyfunction]
fn aggregate_background<'py>(
    py: Python<'py>,
    per_reference: BTreeMap<String, Vec<f64>>,
) -> PyResult<Bound<'py, PyAny>> {
    let cells = per_reference
        .into_iter()
        .map(|(r, ts)| {
            let ests = ts
                .into_iter()
                .map(|t| {
                    EquivalentTemperatureEstimate::from_curve(&r, vec![temperature(t)?], vec![0.0]).map_err(py_err)
                })
                .collect::<PyResult<Vec<_>>>()?;
            Ok((r, ests))
        })
        .collect::<PyResult<BTreeMap<_, _>>>()?;
    to_py(py, &estimate::aggregate_background(&cells).map_err(py_err)?)
}

/// Runs the offline self-test; returns the check results.
#[pyfunction]
#[pyo3(signature = (seed = 42, prompts = 100, out = PathBuf::from("selftest-report")))]
fn selftest<'py>(py: Python<'py>, seed: u64, prompts: usize, out: PathBuf) -> PyResult<Bound<'py, PyAny>> {
    let report = py.detach(|| campaign::selftest(seed, prompts, &out)).map_err(py_err)?;
    to_py(py, &report)
}

/// The synthetic lab model with an optional logit perturbation.
#[pyclass(frozen)]
struct SyntheticLM {
    inner: SyntheticGenerator,
}

#[pymethods]
impl SyntheticLM {
    /// `perturbation` is a dict in the config format, e.g.
    /// `{"kind": "gaussian_logit_noise", "sigma": 0.5}`.
    #[new]
    #[pyo3(signature = (vocab_size = 32, logit_fn_seed = 0x5eed, max_tokens = 32, perturbation = None))]
    fn new(
        vocab_size: usize,
        logit_fn_seed: u64,
        max_tokens: usize,
        perturbation: Option<&Bound<'_, PyDict>>,
    ) -> PyResult<Self> {
        let eps: PerturbationModel = match perturbation {
            Some(d) => {
                let text: String = d.py().import("json")?.call_method1("dumps", (d,))?.extract()?;
                serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))?
            }
            None => PerturbationModel::None,
        };
        let config = SyntheticLMConfig {
            vocab_size,
            logit_fn_seed,
            ..SyntheticLMConfig::default()
        };
        Ok(Self {
            inner: SyntheticGenerator::new("python", &config, eps, max_tokens).map_err(py_err)?,
        })
    }

    /// One generation; the same arguments always give the same text.
    #[pyo3(signature = (prompt, temperature = 0.0, seed = 0, run = 0))]
    fn generate(&self, prompt: &str, temperature: f64, seed: u64, run: u32) -> PyResult<String> {
        let t = self::temperature(temperature)?;
        let p = Prompt {
            prompt_id: "python".into(),
            text: prompt.into(),
            category: PromptCategory::General,
        };
        let s = run_seed(seed, self.inner.backend_id(), &p.prompt_id, t, run);
        Ok(self.inner.generate(&p, t, s).map_err(py_err)?.text)
    }

    /// Next-token logits after `prompt` and the given token prefix.
    #[pyo3(signature = (prompt, prefix = Vec::new()))]
    fn logits(&self, prompt: &str, prefix: Vec<u32>) -> PyResult<Vec<f64>> {
        let lm = self.inner.lm();
        Ok(lm
            .synth_logits(&lm.tokenize(prompt), &prefix)
            .map_err(py_err)?
            .as_slice()
            .to_vec())
    }
}

/// A campaign loaded from a JSON config file.
#[pyclass(frozen)]
struct Campaign {
    inner: CoreCampaign,
}

#[pymethods]
impl Campaign {
    #[new]
    #[pyo3(signature = (config, store = None, seed = None, only_prompts = None))]
    fn new(config: PathBuf, store: Option<PathBuf>, seed: Option<u64>, only_prompts: Option<usize>) -> PyResult<Self> {
        let overrides = Overrides {
            store,
            seed,
            only_prompts,
            ..Overrides::default()
        };
        Ok(Self {
            inner: CoreCampaign::load(&config, &overrides).map_err(py_err)?,
        })
    }

    /// Returns the number of new records.
    fn run_reference(&self, py: Python<'_>) -> PyResult<usize> {
        py.detach(|| {
            let mut store = self.inner.open_store()?;
            Ok(self.inner.run_reference(&mut store)?.iter().map(|s| s.written).sum())
        })
        .map_err(py_err)
    }

    fn run_sut(&self, py: Python<'_>) -> PyResult<usize> {
        py.detach(|| {
            let mut store = self.inner.open_store()?;
            Ok(self.inner.run_sut(&mut store)?.iter().map(|s| s.written).sum())
        })
        .map_err(py_err)
    }

    /// Writes the report bundle to `out` and returns the report summary.
    fn estimate<'py>(&self, py: Python<'py>, out: PathBuf) -> PyResult<Bound<'py, PyAny>> {
        let bundle = py
            .detach(|| {
                let bundle = self.inner.estimate(&self.inner.open_store()?)?;
                bundle.write(&out)?;
                Ok(bundle)
            })
            .map_err(py_err)?;
        to_py(py, &bundle.summary)
    }
}

#[pymodule]
#[pyo3(name = "bgtemp")]
fn bgtemp_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(softmax, m)?)?;
    m.add_function(wrap_pyfunction!(apply_temperature, m)?)?;
    m.add_function(wrap_pyfunction!(entropy, m)?)?;
    m.add_function(wrap_pyfunction!(sample_token, m)?)?;
    m.add_function(wrap_pyfunction!(exact_match_fraction, m)?)?;
    m.add_function(wrap_pyfunction!(first_divergence_index, m)?)?;
    m.add_function(wrap_pyfunction!(edit_distance_stats, m)?)?;
    m.add_function(wrap_pyfunction!(js_divergence, m)?)?;
    m.add_function(wrap_pyfunction!(ks_distance, m)?)?;
    m.add_function(wrap_pyfunction!(fit_equivalent_temperature, m)?)?;
    m.add_function(wrap_pyfunction!(fit_curve, m)?)?;
    m.add_function(wrap_pyfunction!(aggregate_background, m)?)?;
    m.add_function(wrap_pyfunction!(selftest, m)?)?;
    m.add_class::<SyntheticLM>()?;
    m.add_class::<Campaign>()?;
    Ok(())
}
