//! Campaign configuration and the pipeline commands: reference runs, SUT
//! runs, metric tables, estimation and the offline self-test.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use crate::backend::{
    incomplete_prompts, run_campaign_slice, BackendClient, BackendConfig, Generator, SliceSummary, SyntheticGenerator,
};
use crate::error::{Error, Result};
use crate::estimate::{
    aggregate_background, cross_reference_heatmap, fit_weighted, DistanceKind, EquivalentTemperatureEstimate, Heatmap,
    MetricCurves,
};
use crate::lab::{EnvironmentDescriptor, PerturbationModel, SyntheticLMConfig};
use crate::metrics::{build_distributions, MetricKind, VariabilityDistribution};
use crate::report::{
    heatmap_csv, histogram_csv, kde_csv, nearest_grid_point, plot_range, side_by_side_csv, ReportBundle, ReportSummary,
    SutCell,
};
use crate::sampling::{derive_seed, hash_str, Temperature};
use crate::simulate::simulate_distributions;
use crate::store::{encode_component, load_prompts, PromptFormat, PromptSet, RunStore, TemperatureGrid};

/// Where prompts come from: a JSONL/CSV file or a generated synthetic set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSource {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub format: Option<PromptFormat>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    Synthetic {
        #[serde(default)]
        model: SyntheticLMConfig,
    },
    Remote {
        backend: BackendConfig,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSpec {
    pub id: String,
    #[serde(flatten)]
    pub model: ModelSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentSpec {
    pub id: String,
    /// Only meaningful for synthetic systems.
    #[serde(default)]
    pub perturbation: PerturbationModel,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

fn default_environments() -> Vec<EnvironmentSpec> {
    vec![EnvironmentSpec {
        id: "default".into(),
        perturbation: PerturbationModel::None,
        metadata: BTreeMap::new(),
    }]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SutSpec {
    pub id: String,
    #[serde(flatten)]
    pub model: ModelSpec,
    #[serde(default = "default_environments")]
    pub environments: Vec<EnvironmentSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricWeight {
    pub kind: MetricKind,
    #[serde(default = "unit_weight")]
    pub weight: f64,
}

fn unit_weight() -> f64 {
    1.0
}
fn default_runs() -> u32 {
    32
}
fn default_max_tokens() -> usize {
    32
}
fn default_store() -> PathBuf {
    PathBuf::from("store")
}
fn default_metrics() -> Vec<MetricWeight> {
    vec![MetricWeight {
        kind: MetricKind::ExactMatchFraction,
        weight: 1.0,
    }]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignConfig {
    pub prompts: PromptSource,
    /// Keep only this many prompts, in file order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub only_prompts: Option<usize>,
    #[serde(default = "TemperatureGrid::standard")]
    pub grid: TemperatureGrid,
    /// Runs per prompt and reference temperature (K).
    #[serde(default = "default_runs")]
    pub reference_runs: u32,
    /// Runs per prompt for the system under test (M).
    #[serde(default = "default_runs")]
    pub sut_runs: u32,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: usize,
    pub references: Vec<ReferenceSpec>,
    pub sut: SutSpec,
    #[serde(default = "default_metrics")]
    pub metrics: Vec<MetricWeight>,
    #[serde(default)]
    pub distance: DistanceKind,
    /// Extra prompt sets, each a prefix of the main set of this size.
    #[serde(default)]
    pub prompt_subsets: Vec<usize>,
    #[serde(default = "default_store")]
    pub store: PathBuf,
    #[serde(default)]
    pub seed: u64,
    /// Also report a parabolic refinement of each grid minimum.
    #[serde(default)]
    pub interpolate: bool,
}

/// Command-line settings that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub store: Option<PathBuf>,
    pub seed: Option<u64>,
    pub only_prompts: Option<usize>,
    pub metric: Option<MetricKind>,
    pub distance: Option<DistanceKind>,
}

impl CampaignConfig {
    pub fn validate(&self) -> Result<()> {
        if self.reference_runs < 2 || self.sut_runs < 2 {
            return Err(Error::Config(
                "reference_runs and sut_runs must both be at least 2".into(),
            ));
        }
        if self.max_tokens == 0 {
            return Err(Error::Config("max_tokens must be at least 1".into()));
        }
        if self.references.is_empty() {
            return Err(Error::Config("at least one reference is required".into()));
        }
        let mut ids: Vec<&str> = self.references.iter().map(|r| r.id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("reference ids must be unique".into()));
        }
        if self.sut.environments.is_empty() {
            return Err(Error::Config("the system under test needs an environment".into()));
        }
        let mut envs: Vec<&str> = self.sut.environments.iter().map(|e| e.id.as_str()).collect();
        envs.sort_unstable();
        if envs.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("environment ids must be unique".into()));
        }
        for env in &self.sut.environments {
            env.perturbation.validate()?;
            if matches!(self.sut.model, ModelSpec::Remote { .. }) && !env.perturbation.is_none() {
                return Err(Error::Config(format!(
                    "environment {}: a remote system cannot be given a perturbation",
                    env.id
                )));
            }
        }
        if self.metrics.is_empty() {
            return Err(Error::Config("at least one metric is required".into()));
        }
        if self.metrics.iter().any(|m| !(m.weight >= 0.0)) || self.metrics.iter().all(|m| m.weight == 0.0) {
            return Err(Error::Config("metric weights must be >= 0 with a positive sum".into()));
        }
        self.distance.validate()?;
        match (&self.prompts.path, self.prompts.synthetic) {
            (Some(_), None) | (None, Some(_)) => Ok(()),
            _ => Err(Error::Config(
                "prompts needs exactly one of `path` or `synthetic`".into(),
            )),
        }
    }

    fn needs_logprobs(&self) -> bool {
        self.metrics.iter().any(|m| m.kind.needs_logprobs())
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = &o.store {
            self.store = s.clone();
        }
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if o.only_prompts.is_some() {
            self.only_prompts = o.only_prompts;
        }
        if let Some(m) = o.metric {
            self.metrics = vec![MetricWeight { kind: m, weight: 1.0 }];
        }
        if let Some(d) = o.distance {
            self.distance = d;
        }
    }
}

/// Store backend id of the system under test in one environment.
pub fn sut_backend_id(sut: &str, environment: &str) -> String {
    format!("{sut}@{environment}")
}

/// A loaded, validated campaign.
#[derive(Debug, Clone)]
pub struct Campaign {
    pub config: CampaignConfig,
    pub prompts: PromptSet,
    pub store_root: PathBuf,
}

impl Campaign {
    /// Reads a JSON config; relative prompt and store paths are taken
    /// relative to the config file, except a store given on the command
    /// line.
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut config: CampaignConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let store_root = match &overrides.store {
            Some(s) => s.clone(),
            None => base.join(&config.store),
        };
        config.apply(overrides);
        Self::with_paths(config, base, store_root)
    }

    pub fn new(config: CampaignConfig, store_root: impl Into<PathBuf>) -> Result<Self> {
        Self::with_paths(config, Path::new("."), store_root.into())
    }

    fn with_paths(mut config: CampaignConfig, base: &Path, store_root: PathBuf) -> Result<Self> {
        config.validate()?;
        let prompts = match (&config.prompts.path, config.prompts.synthetic) {
            (Some(p), _) => {
                let full = base.join(p);
                let format = config.prompts.format.unwrap_or_else(|| PromptFormat::from_path(&full));
                config.prompts.format = Some(format);
                load_prompts(&full, format)?
            }
            (None, Some(n)) => PromptSet::synthetic(n),
            (None, None) => unreachable!("validated"),
        };
        let prompts = match config.only_prompts {
            Some(n) => prompts.truncated(n),
            None => prompts,
        };
        if prompts.is_empty() {
            return Err(Error::Config("the prompt set is empty".into()));
        }
        // Effective values for remote backends.
        let logprobs = config.needs_logprobs();
        let max_tokens = config.max_tokens;
        for spec in config
            .references
            .iter_mut()
            .map(|r| &mut r.model)
            .chain(std::iter::once(&mut config.sut.model))
        {
            if let ModelSpec::Remote { backend } = spec {
                backend.max_tokens = max_tokens;
                backend.logprobs_requested |= logprobs;
            }
        }
        Ok(Self {
            config,
            prompts,
            store_root,
        })
    }

    pub fn open_store(&self) -> Result<RunStore> {
        RunStore::open(&self.store_root)
    }

    fn metric_kinds(&self) -> Vec<MetricKind> {
        self.config.metrics.iter().map(|m| m.kind).collect()
    }

    fn generator(
        &self,
        id: &str,
        environment: &str,
        model: &ModelSpec,
        perturbation: &PerturbationModel,
    ) -> Result<Box<dyn Generator>> {
        Ok(match model {
            ModelSpec::Synthetic { model } => Box::new(
                SyntheticGenerator::new(id, model, perturbation.clone(), self.config.max_tokens)?
                    .with_environment(environment)
                    .with_logprobs(self.config.needs_logprobs()),
            ),
            ModelSpec::Remote { backend } => {
                Box::new(BackendClient::new(id, backend.clone())?.with_environment(environment))
            }
        })
    }

    pub fn environment(&self, env: &EnvironmentSpec) -> EnvironmentDescriptor {
        let mut d = match self.config.sut.model {
            ModelSpec::Synthetic { .. } => EnvironmentDescriptor::synthetic(&env.id, env.perturbation.clone()),
            ModelSpec::Remote { .. } => EnvironmentDescriptor::remote(&env.id),
        };
        d.metadata = env.metadata.clone();
        d
    }

    /// K runs per prompt at every grid temperature for every reference.
    pub fn run_reference(&self, store: &mut RunStore) -> Result<Vec<SliceSummary>> {
        let mut out = Vec::new();
        for r in &self.config.references {
            let g = self.generator(
                &r.id,
                &format!("{}/reference", r.id),
                &r.model,
                &PerturbationModel::None,
            )?;
            for t in self.config.grid.temperatures() {
                out.push(run_campaign_slice(
                    g.as_ref(),
                    &self.prompts,
                    *t,
                    self.config.reference_runs,
                    self.config.seed,
                    store,
                )?);
            }
        }
        Ok(out)
    }

    /// M runs per prompt at temperature 0 in every environment.
    pub fn run_sut(&self, store: &mut RunStore) -> Result<Vec<SliceSummary>> {
        let sut = &self.config.sut;
        sut.environments
            .iter()
            .map(|env| {
                let g = self.generator(
                    &sut_backend_id(&sut.id, &env.id),
                    &env.id,
                    &sut.model,
                    &env.perturbation,
                )?;
                run_campaign_slice(
                    g.as_ref(),
                    &self.prompts,
                    Temperature::ZERO,
                    self.config.sut_runs,
                    self.config.seed,
                    store,
                )
            })
            .collect()
    }

    fn missing(&self, store: &RunStore, backend: &str, t: Temperature, runs: u32, out: &mut Vec<String>) {
        let gaps = incomplete_prompts(store, backend, t, &self.prompts, runs);
        if !gaps.is_empty() {
            out.push(format!(
                "{backend} T={t}: {} of {} prompts incomplete",
                gaps.len(),
                self.prompts.len()
            ));
        }
    }

    /// Fails with the list of slices still to run, if any.
    pub fn check_complete(&self, store: &RunStore) -> Result<()> {
        let mut missing = Vec::new();
        for r in &self.config.references {
            for t in self.config.grid.temperatures() {
                self.missing(store, &r.id, *t, self.config.reference_runs, &mut missing);
            }
        }
        if !missing.is_empty() {
            missing.push("run `bgtemp run-reference` first".into());
        }
        let before = missing.len();
        for env in &self.config.sut.environments {
            let id = sut_backend_id(&self.config.sut.id, &env.id);
            self.missing(store, &id, Temperature::ZERO, self.config.sut_runs, &mut missing);
        }
        if missing.len() > before {
            missing.push("run `bgtemp run-sut` first".into());
        }
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::MissingSlices(missing.join("\n")))
        }
    }

    /// Reference curves per metric for one reference.
    pub fn reference_curves(
        &self,
        store: &RunStore,
        reference: &str,
    ) -> Result<BTreeMap<MetricKind, BTreeMap<Temperature, VariabilityDistribution>>> {
        let mut curves: BTreeMap<MetricKind, BTreeMap<Temperature, VariabilityDistribution>> = BTreeMap::new();
        for t in self.config.grid.temperatures() {
            let dists = build_distributions(
                &self.metric_kinds(),
                &self.prompts,
                store,
                reference,
                *t,
                Some(self.config.reference_runs),
            )?;
            for d in dists {
                curves.entry(d.metric).or_default().insert(*t, d);
            }
        }
        Ok(curves)
    }

    /// SUT distributions per metric for one environment.
    pub fn sut_distributions(&self, store: &RunStore, env: &str) -> Result<Vec<VariabilityDistribution>> {
        build_distributions(
            &self.metric_kinds(),
            &self.prompts,
            store,
            &sut_backend_id(&self.config.sut.id, env),
            Temperature::ZERO,
            Some(self.config.sut_runs),
        )
    }

    /// Long-format table of every distribution the campaign uses.
    pub fn metrics_csv(&self, store: &RunStore) -> Result<String> {
        self.check_complete(store)?;
        let mut out = String::from("backend_id,temperature,metric,prompt_id,value\n");
        let mut push = |d: &VariabilityDistribution| {
            for (p, v) in d.prompt_ids.iter().zip(&d.values) {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{v}",
                    crate::metrics::csv_field(&d.source.backend_id),
                    d.source.temperature,
                    d.metric,
                    crate::metrics::csv_field(p)
                );
            }
        };
        for r in &self.config.references {
            for curve in self.reference_curves(store, &r.id)?.values() {
                curve.values().for_each(&mut push);
            }
        }
        for env in &self.config.sut.environments {
            self.sut_distributions(store, &env.id)?.iter().for_each(&mut push);
        }
        Ok(out)
    }

    /// Distance matrix between two references' curves on the first metric.
    pub fn heatmap(&self, store: &RunStore, a: &str, b: &str) -> Result<Heatmap> {
        for id in [a, b] {
            if !self.config.references.iter().any(|r| r.id == id) {
                return Err(Error::Config(format!("unknown reference {id:?}")));
            }
        }
        self.check_complete(store)?;
        let metric = self.config.metrics[0].kind;
        let ca = self
            .reference_curves(store, a)?
            .remove(&metric)
            .expect("metric computed");
        let cb = self
            .reference_curves(store, b)?
            .remove(&metric)
            .expect("metric computed");
        cross_reference_heatmap(&ca, &cb, self.config.distance)
    }

    /// Fits every (reference, environment, prompt set) cell, aggregates,
    /// and assembles the report files. Reads only the store.
    pub fn estimate(&self, store: &RunStore) -> Result<ReportBundle> {
        self.check_complete(store)?;
        let cfg = &self.config;
        let kinds = self.metric_kinds();
        let grid = cfg.grid.temperatures();
        let mut files = BTreeMap::new();
        let mut notes = Vec::new();

        let mut prompt_sets = vec![(format!("all{}", self.prompts.len()), self.prompts.clone())];
        for n in &cfg.prompt_subsets {
            if *n == 0 || *n >= self.prompts.len() {
                notes.push(format!("prompt subset of {n} skipped: not a proper non-empty prefix"));
                continue;
            }
            prompt_sets.push((format!("first{n}"), self.prompts.truncated(*n)));
        }

        let mut sut = BTreeMap::new();
        let mut cells_info = Vec::new();
        for env in &cfg.sut.environments {
            let dists = self.sut_distributions(store, &env.id)?;
            let descriptor = self.environment(env);
            let primary = &dists[0];
            let degenerate = primary.is_degenerate();
            if degenerate {
                notes.push(format!("{}: degenerate: Dirac at {}", env.id, primary.values[0]));
            }
            cells_info.push(SutCell {
                environment: env.id.clone(),
                backend_id: sut_backend_id(&cfg.sut.id, &env.id),
                observed: descriptor.observed,
                n_prompts: primary.len(),
                mean: primary.values.iter().sum::<f64>() / primary.len() as f64,
                degenerate,
            });
            for d in &dists {
                let name = format!("sut_{}_{}.csv", encode_component(&env.id), d.metric);
                let mut buf = Vec::new();
                d.write_csv(&mut buf)?;
                files.insert(name, String::from_utf8(buf).expect("CSV is UTF-8"));
            }
            sut.insert(env.id.clone(), dists);
        }
        if cells_info.iter().any(|c| !c.observed) {
            notes.push(
                "remote environments are not observed: estimates are marginal over the unobserved inference environment"
                    .into(),
            );
        }
        for kind in &kinds {
            let rows: Vec<(String, &VariabilityDistribution)> = sut
                .iter()
                .map(|(env, ds)| {
                    (
                        env.clone(),
                        ds.iter().find(|d| d.metric == *kind).expect("metric computed"),
                    )
                })
                .collect();
            let all: Vec<&VariabilityDistribution> = rows.iter().map(|r| r.1).collect();
            let (lo, hi) = plot_range(*kind, &all);
            files.insert(format!("sut_{kind}_histogram.csv"), histogram_csv(&rows, lo, hi));
            files.insert(format!("sut_{kind}_kde.csv"), kde_csv(&rows, lo, hi));
        }

        let mut per_cell: BTreeMap<String, Vec<EquivalentTemperatureEstimate>> = BTreeMap::new();
        let mut all_curves = BTreeMap::new();
        for r in &cfg.references {
            let curves = self.reference_curves(store, &r.id)?;
            let rid = encode_component(&r.id);
            for (kind, curve) in &curves {
                let rows: Vec<(String, &VariabilityDistribution)> =
                    curve.iter().map(|(t, d)| (format!("T={t}"), d)).collect();
                let all: Vec<&VariabilityDistribution> = curve.values().collect();
                let (lo, hi) = plot_range(*kind, &all);
                files.insert(
                    format!("reference_{rid}_{kind}_histogram.csv"),
                    histogram_csv(&rows, lo, hi),
                );
                files.insert(format!("reference_{rid}_{kind}_kde.csv"), kde_csv(&rows, lo, hi));
            }
            for env in &cfg.sut.environments {
                let eid = encode_component(&env.id);
                for (label, set) in &prompt_sets {
                    let truncated: BTreeMap<MetricKind, BTreeMap<Temperature, VariabilityDistribution>> = curves
                        .iter()
                        .map(|(k, c)| (*k, c.iter().map(|(t, d)| (*t, d.truncated(set, set.len()))).collect()))
                        .collect();
                    let suts: Vec<VariabilityDistribution> =
                        sut[&env.id].iter().map(|d| d.truncated(set, set.len())).collect();
                    let metrics: Vec<MetricCurves<'_>> = cfg
                        .metrics
                        .iter()
                        .map(|m| MetricCurves {
                            reference: &truncated[&m.kind],
                            sut: suts.iter().find(|d| d.metric == m.kind).expect("metric computed"),
                            weight: m.weight,
                        })
                        .collect();
                    let mut est = fit_weighted(&r.id, &metrics, cfg.distance)?.with_cell(&env.id, label);
                    if cfg.interpolate {
                        est.interpolated_t_hat = est.quadratic_refinement();
                    }
                    let mut buf = Vec::new();
                    est.write_csv(&mut buf)?;
                    files.insert(
                        format!("distance_{rid}_{eid}_{label}.csv"),
                        String::from_utf8(buf).expect("CSV is UTF-8"),
                    );
                    if label == &prompt_sets[0].0 {
                        let at = nearest_grid_point(grid, est.t_hat);
                        for m in &metrics {
                            files.insert(
                                format!("side_by_side_{rid}_{eid}_{}.csv", m.sut.metric),
                                side_by_side_csv(&m.reference[&at], m.sut),
                            );
                        }
                    }
                    per_cell.entry(r.id.clone()).or_default().push(est);
                }
            }
            all_curves.insert(r.id.clone(), curves);
        }

        let primary = kinds[0];
        let ids: Vec<&String> = all_curves.keys().collect();
        for (i, a) in ids.iter().enumerate() {
            for b in &ids[i + 1..] {
                let h = cross_reference_heatmap(&all_curves[*a][&primary], &all_curves[*b][&primary], cfg.distance)?;
                files.insert(
                    format!("heatmap_{}_{}_{primary}.csv", encode_component(a), encode_component(b)),
                    heatmap_csv(&h),
                );
            }
        }

        let estimate = aggregate_background(&per_cell)?;
        if cfg.interpolate {
            notes.push("interpolated_t_hat is a parabolic refinement; t_hat stays the grid estimate".into());
        }
        Ok(ReportBundle {
            summary: ReportSummary {
                config: serde_json::to_value(cfg)?,
                sut_id: cfg.sut.id.clone(),
                metrics: cfg.metrics.iter().map(|m| (m.kind, m.weight)).collect(),
                distance: cfg.distance,
                estimate,
                sut: cells_info,
                notes,
            },
            files,
        })
    }
}

/// Outcome of one self-test property.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelftestCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelftestReport {
    pub seed: u64,
    pub checks: Vec<SelftestCheck>,
}

impl SelftestReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

pub const SELFTEST_TARGETS: [f64; 3] = [0.05, 0.1, 0.3];
pub const SELFTEST_SIGMAS: [f64; 3] = [0.0, 0.5, 2.0];

/// The offline configuration the self-test runs: one synthetic reference
/// and a synthetic SUT under Gaussian logit noise of increasing width.
pub fn selftest_config(seed: u64, prompts: usize) -> CampaignConfig {
    let environments = SELFTEST_SIGMAS
        .iter()
        .map(|sigma| EnvironmentSpec {
            id: format!("gauss-{sigma}"),
            perturbation: if *sigma == 0.0 {
                PerturbationModel::None
            } else {
                PerturbationModel::GaussianLogitNoise { sigma: *sigma }
            },
            metadata: BTreeMap::new(),
        })
        .collect();
    CampaignConfig {
        prompts: PromptSource {
            path: None,
            format: None,
            synthetic: Some(prompts),
        },
        only_prompts: None,
        grid: TemperatureGrid::standard(),
        reference_runs: 32,
        sut_runs: 32,
        max_tokens: 32,
        references: vec![ReferenceSpec {
            id: "lab".into(),
            model: ModelSpec::Synthetic {
                model: SyntheticLMConfig::default(),
            },
        }],
        sut: SutSpec {
            id: "lab-sut".into(),
            model: ModelSpec::Synthetic {
                model: SyntheticLMConfig::default(),
            },
            environments,
        },
        metrics: default_metrics(),
        distance: DistanceKind::KolmogorovSmirnov,
        prompt_subsets: Vec::new(),
        store: PathBuf::from("selftest-store"),
        seed,
        interpolate: false,
    }
}

/// Whether `t_hat` lies within one grid step of `target`.
pub fn within_one_step(grid: &TemperatureGrid, target: Temperature, t_hat: f64) -> bool {
    match grid.neighbourhood(target) {
        Some((lo, hi)) => t_hat >= lo - 1e-12 && t_hat <= hi + 1e-12,
        None => false,
    }
}

/// Runs the synthetic pipeline end to end in a scratch store and writes
/// the report bundle plus `selftest.json` to `out`.
pub fn selftest(seed: u64, prompts: usize, out: &Path) -> Result<SelftestReport> {
    let scratch = tempfile::tempdir()?;
    let campaign = Campaign::new(selftest_config(seed, prompts), scratch.path())?;
    let mut store = campaign.open_store()?;
    campaign.run_reference(&mut store)?;
    campaign.run_sut(&mut store)?;
    let bundle = campaign.estimate(&store)?;
    bundle.write(out)?;

    let cfg = &campaign.config;
    let mut checks = Vec::new();
    let cells = &bundle.summary.estimate.breakdown;
    let t_hat = |env: &str| {
        cells
            .iter()
            .find(|c| c.environment == env)
            .map(|c| c.t_hat)
            .expect("cell present")
    };
    let sigma_env = |s: f64| format!("gauss-{s}");

    let zero = t_hat(&sigma_env(0.0));
    checks.push(SelftestCheck {
        name: "zero-noise identity".into(),
        passed: zero == 0.0,
        detail: format!("t_hat = {zero} without perturbation at T=0"),
        seed,
    });

    let ladder: Vec<f64> = SELFTEST_SIGMAS.iter().map(|s| t_hat(&sigma_env(*s))).collect();
    checks.push(SelftestCheck {
        name: "noise monotonicity".into(),
        passed: ladder.windows(2).all(|w| w[0] <= w[1]),
        detail: format!("sigma {SELFTEST_SIGMAS:?} -> t_hat {ladder:?}"),
        seed,
    });

    let reference = &cfg.references[0];
    let ModelSpec::Synthetic { model } = &reference.model else {
        unreachable!("self-test reference is synthetic")
    };
    let generator = SyntheticGenerator::new(&reference.id, model, PerturbationModel::None, cfg.max_tokens)?;
    let curves = campaign.reference_curves(&store, &reference.id)?;
    let curve = &curves[&MetricKind::ExactMatchFraction];
    for target in SELFTEST_TARGETS {
        let t = Temperature::new(target)?;
        let trial_seed = derive_seed(seed, &[hash_str("self-consistency"), t.value().to_bits()]);
        let g = simulate_distributions(
            &generator,
            &campaign.prompts,
            t,
            cfg.sut_runs,
            trial_seed,
            &[MetricKind::ExactMatchFraction],
        )?
        .remove(0);
        let est = fit_weighted(
            &reference.id,
            &[MetricCurves {
                reference: curve,
                sut: &g,
                weight: 1.0,
            }],
            cfg.distance,
        )?;
        checks.push(SelftestCheck {
            name: format!("self-consistency at T*={target}"),
            passed: within_one_step(&cfg.grid, t, est.t_hat),
            detail: format!("t_hat = {}", est.t_hat),
            seed: trial_seed,
        });
    }

    // The store path and the in-memory path must agree bit for bit.
    let t = Temperature::new(0.3)?;
    let direct = simulate_distributions(
        &generator,
        &campaign.prompts,
        t,
        cfg.reference_runs,
        cfg.seed,
        &[MetricKind::ExactMatchFraction],
    )?;
    let stored = &curve[&t];
    let same = direct[0]
        .values
        .iter()
        .map(|v| v.to_bits())
        .eq(stored.values.iter().map(|v| v.to_bits()));
    checks.push(SelftestCheck {
        name: "store round trip".into(),
        passed: same,
        detail: "T=0.3 distribution rebuilt from the store equals the in-memory one".into(),
        seed,
    });

    let report = SelftestReport { seed, checks };
    let mut json = serde_json::to_string_pretty(&report)?;
    json.push('\n');
    fs::write(out.join("selftest.json"), json)?;
    for c in &report.checks {
        info!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    Ok(report)
}
