//! In-memory synthetic campaigns. Runs are seeded exactly as
//! [`run_campaign_slice`](crate::backend::run_campaign_slice) seeds them, so
//! a simulated distribution equals the one built from a store filled by the
//! same generator and seed.

use std::collections::BTreeMap;

use crate::backend::{run_seed, Generator, SyntheticGenerator};
use crate::error::Result;
use crate::metrics::{DistributionSource, MetricKind, Response, ResponseBundle, VariabilityDistribution};
use crate::sampling::Temperature;
use crate::store::PromptSet;

/// Response bundles of `runs` generations per prompt at `temperature`.
pub fn simulate_bundles(
    generator: &SyntheticGenerator,
    prompts: &PromptSet,
    temperature: Temperature,
    runs: u32,
    seed: u64,
) -> Result<Vec<ResponseBundle>> {
    prompts
        .prompts
        .iter()
        .map(|p| {
            let responses = (0..runs)
                .map(|r| {
                    let s = run_seed(seed, generator.backend_id(), &p.prompt_id, temperature, r);
                    let c = generator.generate(p, temperature, s)?;
                    Ok(Response {
                        text: c.text,
                        token_ids: c.token_ids,
                        top_logprobs: c.token_logprob_tops,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(ResponseBundle::new(p.prompt_id.clone(), responses))
        })
        .collect()
}

/// One distribution per requested metric, from a single set of generations.
pub fn simulate_distributions(
    generator: &SyntheticGenerator,
    prompts: &PromptSet,
    temperature: Temperature,
    runs: u32,
    seed: u64,
    metrics: &[MetricKind],
) -> Result<Vec<VariabilityDistribution>> {
    let bundles = simulate_bundles(generator, prompts, temperature, runs, seed)?;
    metrics
        .iter()
        .map(|m| {
            VariabilityDistribution::from_bundles(
                *m,
                DistributionSource {
                    backend_id: generator.backend_id().to_string(),
                    temperature,
                    environment: generator.environment_id().to_string(),
                },
                bundles.iter().map(|b| (b.prompt_id.as_str(), Some(b))),
            )
        })
        .collect()
}

/// Reference curves `T -> f_T` over a grid, for each metric.
pub fn simulate_curves(
    generator: &SyntheticGenerator,
    prompts: &PromptSet,
    grid: &[Temperature],
    runs: u32,
    seed: u64,
    metrics: &[MetricKind],
) -> Result<BTreeMap<MetricKind, BTreeMap<Temperature, VariabilityDistribution>>> {
    let mut curves: BTreeMap<MetricKind, BTreeMap<Temperature, VariabilityDistribution>> = BTreeMap::new();
    for t in grid {
        for d in simulate_distributions(generator, prompts, *t, runs, seed, metrics)? {
            curves.entry(d.metric).or_default().insert(*t, d);
        }
    }
    Ok(curves)
}
