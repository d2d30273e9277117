//! Per-prompt variability metrics over bundles of repeated generations.
//!
//! Every metric is content-agnostic: it only looks at whether, where and by
//! how much repeated responses to one prompt differ.

use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampling::Temperature;
use crate::store::{GenerationRecord, PromptSet, RunStore};

/// One response plus whatever token-level data the backend returned.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Response {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_ids: Option<Vec<u32>>,
    /// Per position, the top next-token alternatives as (token, ln p).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_logprobs: Option<Vec<Vec<(String, f64)>>>,
}

impl Response {
    pub fn text(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            ..Default::default()
        }
    }
}

impl From<&GenerationRecord> for Response {
    fn from(r: &GenerationRecord) -> Self {
        Self {
            text: r.text.clone(),
            token_ids: r.token_ids.clone(),
            top_logprobs: r.token_logprob_tops.clone(),
        }
    }
}

/// All repeated responses to one prompt from one source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseBundle {
    pub prompt_id: String,
    pub responses: Vec<Response>,
}

impl ResponseBundle {
    pub fn new(prompt_id: impl Into<String>, responses: Vec<Response>) -> Self {
        Self {
            prompt_id: prompt_id.into(),
            responses,
        }
    }

    pub fn from_texts<S: AsRef<str>>(prompt_id: impl Into<String>, texts: &[S]) -> Self {
        Self::new(prompt_id, texts.iter().map(|t| Response::text(t.as_ref())).collect())
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    ExactMatchFraction,
    FirstDivergenceIndex,
    EditDistanceMean,
    EditDistanceStd,
    JsDivergenceNextToken,
    MeanEntropy,
}

impl MetricKind {
    pub const ALL: [MetricKind; 6] = [
        MetricKind::ExactMatchFraction,
        MetricKind::FirstDivergenceIndex,
        MetricKind::EditDistanceMean,
        MetricKind::EditDistanceStd,
        MetricKind::JsDivergenceNextToken,
        MetricKind::MeanEntropy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::ExactMatchFraction => "exact_match_fraction",
            Self::FirstDivergenceIndex => "first_divergence_index",
            Self::EditDistanceMean => "edit_distance_mean",
            Self::EditDistanceStd => "edit_distance_std",
            Self::JsDivergenceNextToken => "js_divergence_next_token",
            Self::MeanEntropy => "mean_entropy",
        }
    }

    /// Smallest bundle the metric is defined on.
    pub fn min_runs(self) -> usize {
        match self {
            Self::ExactMatchFraction | Self::MeanEntropy => 1,
            _ => 2,
        }
    }

    /// Fixed value range, where the metric has one. Exact-match values are
    /// at least `1/n` but the range is reported as `[0, 1]` so that
    /// distributions with different run counts share bins.
    pub fn range(self) -> Option<(f64, f64)> {
        match self {
            Self::ExactMatchFraction => Some((0.0, 1.0)),
            Self::JsDivergenceNextToken => Some((0.0, std::f64::consts::LN_2)),
            _ => None,
        }
    }

    pub fn needs_logprobs(self) -> bool {
        matches!(self, Self::JsDivergenceNextToken | Self::MeanEntropy)
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown metric {s:?}")))
    }
}

/// Size of the largest class of byte-identical responses, over `n`.
pub fn exact_match_fraction(bundle: &ResponseBundle) -> Result<f64> {
    exact_match_fraction_by(bundle, |s| s)
}

/// [`exact_match_fraction`] after trimming trailing whitespace.
pub fn exact_match_fraction_trimmed(bundle: &ResponseBundle) -> Result<f64> {
    exact_match_fraction_by(bundle, str::trim_end)
}

fn exact_match_fraction_by(bundle: &ResponseBundle, key: impl Fn(&str) -> &str) -> Result<f64> {
    if bundle.is_empty() {
        return Err(Error::Empty(format!("bundle {} has no responses", bundle.prompt_id)));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for r in &bundle.responses {
        *counts.entry(key(&r.text)).or_default() += 1;
    }
    let largest = counts.values().copied().max().unwrap_or(0);
    Ok(largest as f64 / bundle.len() as f64)
}

fn require_pairs(bundle: &ResponseBundle) -> Result<()> {
    if bundle.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "bundle {} needs at least 2 responses for a pairwise metric, has {}",
            bundle.prompt_id,
            bundle.len()
        )));
    }
    Ok(())
}

/// Token sequences for divergence metrics: true token ids when every
/// response carries them, whitespace-split words otherwise.
fn token_sequences(bundle: &ResponseBundle) -> Vec<Vec<u64>> {
    if bundle.responses.iter().all(|r| r.token_ids.is_some()) {
        return bundle
            .responses
            .iter()
            .map(|r| r.token_ids.iter().flatten().map(|t| u64::from(*t)).collect())
            .collect();
    }
    let mut vocab: HashMap<&str, u64> = HashMap::new();
    bundle
        .responses
        .iter()
        .map(|r| {
            r.text
                .split_whitespace()
                .map(|w| {
                    let next = vocab.len() as u64;
                    *vocab.entry(w).or_insert(next)
                })
                .collect()
        })
        .collect()
}

/// Index of the first mismatch between two sequences. A strict prefix
/// diverges at its own length; identical sequences at their length.
pub fn first_mismatch<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    a.iter()
        .zip(b)
        .position(|(x, y)| x != y)
        .unwrap_or_else(|| a.len().min(b.len()))
}

/// Mean first-mismatch index over all unordered response pairs.
pub fn first_divergence_index(bundle: &ResponseBundle) -> Result<f64> {
    require_pairs(bundle)?;
    let seqs = token_sequences(bundle);
    let mut total = 0usize;
    let mut pairs = 0usize;
    for i in 0..seqs.len() {
        for j in i + 1..seqs.len() {
            total += first_mismatch(&seqs[i], &seqs[j]);
            pairs += 1;
        }
    }
    Ok(total as f64 / pairs as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EditDistanceStats {
    pub mean: f64,
    pub std: f64,
}

/// Mean and population standard deviation of the character-level
/// Levenshtein distance over all unordered response pairs.
pub fn edit_distance_stats(bundle: &ResponseBundle) -> Result<EditDistanceStats> {
    require_pairs(bundle)?;
    let texts = &bundle.responses;
    let mut distances = Vec::with_capacity(texts.len() * (texts.len() - 1) / 2);
    for i in 0..texts.len() {
        for j in i + 1..texts.len() {
            distances.push(strsim::levenshtein(&texts[i].text, &texts[j].text) as f64);
        }
    }
    let n = distances.len() as f64;
    let mean = distances.iter().sum::<f64>() / n;
    let var = distances.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n;
    Ok(EditDistanceStats { mean, std: var.sqrt() })
}

/// A top-k entry list renormalized to a distribution.
fn renormalize(top: &[(String, f64)]) -> Vec<(&str, f64)> {
    let max = top.iter().map(|(_, lp)| *lp).fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = top.iter().map(|(_, lp)| (lp - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    top.iter()
        .zip(weights)
        .map(|((tok, _), w)| (tok.as_str(), w / total))
        .collect()
}

/// Jensen-Shannon divergence (nats) between two sparse distributions,
/// taken over the union of their supports.
pub fn js_divergence_sparse(p: &[(&str, f64)], q: &[(&str, f64)]) -> f64 {
    let mut union: Vec<&str> = p.iter().chain(q).map(|(t, _)| *t).collect();
    union.sort_unstable();
    union.dedup();
    let lookup = |d: &[(&str, f64)], t: &str| d.iter().filter(|(k, _)| *k == t).map(|(_, v)| *v).sum::<f64>();
    let mut js = 0.0;
    for t in union {
        let (a, b) = (lookup(p, t), lookup(q, t));
        let m = 0.5 * (a + b);
        if a > 0.0 {
            js += 0.5 * a * (a / m).ln();
        }
        if b > 0.0 {
            js += 0.5 * b * (b / m).ln();
        }
    }
    js.clamp(0.0, std::f64::consts::LN_2)
}

/// Jensen-Shannon divergence (nats) between two dense distributions of equal
/// length.
pub fn js_divergence(p: &[f64], q: &[f64]) -> f64 {
    let names: Vec<String> = (0..p.len().max(q.len())).map(|i| i.to_string()).collect();
    let sparse = |d: &[f64]| -> Vec<(&str, f64)> {
        d.iter()
            .enumerate()
            .filter(|(_, v)| **v > 0.0)
            .map(|(i, v)| (names[i].as_str(), *v))
            .collect()
    };
    js_divergence_sparse(&sparse(p), &sparse(q))
}

fn logprob_tables(bundle: &ResponseBundle) -> Result<Vec<&Vec<Vec<(String, f64)>>>> {
    bundle
        .responses
        .iter()
        .map(|r| r.top_logprobs.as_ref())
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| Error::MetricUnavailable(MetricKind::JsDivergenceNextToken.to_string()))
}

/// Mean over response pairs of the position-averaged JS divergence between
/// the pair's top-k next-token distributions at matched positions.
pub fn js_divergence_next_token(bundle: &ResponseBundle) -> Result<f64> {
    require_pairs(bundle)?;
    let tables = logprob_tables(bundle)?;
    let dists: Vec<Vec<Vec<(&str, f64)>>> = tables
        .iter()
        .map(|t| t.iter().map(|top| renormalize(top)).collect())
        .collect();
    let mut pair_means = Vec::new();
    for i in 0..dists.len() {
        for j in i + 1..dists.len() {
            let positions = dists[i].len().min(dists[j].len());
            if positions == 0 {
                continue;
            }
            let sum: f64 = (0..positions)
                .map(|k| js_divergence_sparse(&dists[i][k], &dists[j][k]))
                .sum();
            pair_means.push(sum / positions as f64);
        }
    }
    if pair_means.is_empty() {
        return Err(Error::MetricUnavailable(MetricKind::JsDivergenceNextToken.to_string()));
    }
    Ok(pair_means.iter().sum::<f64>() / pair_means.len() as f64)
}

/// Mean entropy (nats) of the renormalized top-k next-token distributions
/// over all positions of all responses.
pub fn mean_entropy(bundle: &ResponseBundle) -> Result<f64> {
    let tables = logprob_tables(bundle).map_err(|_| Error::MetricUnavailable(MetricKind::MeanEntropy.to_string()))?;
    let entropies: Vec<f64> = tables
        .iter()
        .flat_map(|t| t.iter())
        .map(|top| {
            let probs: Vec<f64> = renormalize(top).into_iter().map(|(_, p)| p).collect();
            crate::sampling::entropy_slice(&probs)
        })
        .collect();
    if entropies.is_empty() {
        return Err(Error::MetricUnavailable(MetricKind::MeanEntropy.to_string()));
    }
    Ok(entropies.iter().sum::<f64>() / entropies.len() as f64)
}

/// Evaluates one metric on one bundle.
pub fn compute(metric: MetricKind, bundle: &ResponseBundle) -> Result<f64> {
    match metric {
        MetricKind::ExactMatchFraction => exact_match_fraction(bundle),
        MetricKind::FirstDivergenceIndex => first_divergence_index(bundle),
        MetricKind::EditDistanceMean => edit_distance_stats(bundle).map(|s| s.mean),
        MetricKind::EditDistanceStd => edit_distance_stats(bundle).map(|s| s.std),
        MetricKind::JsDivergenceNextToken => js_divergence_next_token(bundle),
        MetricKind::MeanEntropy => mean_entropy(bundle),
    }
}

/// Where a distribution's samples came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionSource {
    pub backend_id: String,
    pub temperature: Temperature,
    pub environment: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Omission {
    pub prompt_id: String,
    pub reason: String,
}

/// Empirical distribution of one metric over a prompt set: one value per
/// prompt, in prompt-set order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariabilityDistribution {
    pub metric: MetricKind,
    pub prompt_ids: Vec<String>,
    pub values: Vec<f64>,
    pub source: DistributionSource,
    #[serde(default)]
    pub omitted: Vec<Omission>,
}

impl VariabilityDistribution {
    /// Computes the metric for each `(prompt_id, bundle)` in order. Missing
    /// or undersized bundles, and bundles the metric cannot be computed on,
    /// are reported as omissions.
    pub fn from_bundles<'a>(
        metric: MetricKind,
        source: DistributionSource,
        bundles: impl IntoIterator<Item = (&'a str, Option<&'a ResponseBundle>)>,
    ) -> Result<Self> {
        let mut dist = Self {
            metric,
            prompt_ids: Vec::new(),
            values: Vec::new(),
            source,
            omitted: Vec::new(),
        };
        let mut unavailable = None;
        for (prompt_id, bundle) in bundles {
            let omit = |reason: String| Omission {
                prompt_id: prompt_id.to_string(),
                reason,
            };
            match bundle {
                None => dist.omitted.push(omit("no runs".into())),
                Some(b) if b.len() < metric.min_runs() => {
                    dist.omitted
                        .push(omit(format!("{} run(s), need {}", b.len(), metric.min_runs())))
                }
                Some(b) => match compute(metric, b) {
                    Ok(v) => {
                        dist.prompt_ids.push(prompt_id.to_string());
                        dist.values.push(v);
                    }
                    Err(e @ Error::MetricUnavailable(_)) => {
                        dist.omitted.push(omit(e.to_string()));
                        unavailable = Some(e);
                    }
                    Err(e) => dist.omitted.push(omit(e.to_string())),
                },
            }
        }
        if dist.values.is_empty() {
            return Err(unavailable.unwrap_or_else(|| {
                Error::Empty(format!(
                    "no {metric} values for {} at T={}",
                    dist.source.backend_id, dist.source.temperature
                ))
            }));
        }
        Ok(dist)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Keeps only values for the first `n` prompts of `prompts`.
    pub fn truncated(&self, prompts: &PromptSet, n: usize) -> Self {
        let keep: std::collections::HashSet<&str> =
            prompts.prompts.iter().take(n).map(|p| p.prompt_id.as_str()).collect();
        let mut out = self.clone();
        out.prompt_ids.clear();
        out.values.clear();
        for (id, v) in self.prompt_ids.iter().zip(&self.values) {
            if keep.contains(id.as_str()) {
                out.prompt_ids.push(id.clone());
                out.values.push(*v);
            }
        }
        out.omitted.retain(|o| keep.contains(o.prompt_id.as_str()));
        out
    }

    /// Is every value identical (a point mass)?
    pub fn is_degenerate(&self) -> bool {
        self.values.windows(2).all(|w| w[0] == w[1])
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "prompt_id,value")?;
        for (id, v) in self.prompt_ids.iter().zip(&self.values) {
            writeln!(out, "{},{}", csv_field(id), v)?;
        }
        Ok(())
    }
}

pub(crate) fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Distribution of `metric` over `prompts` from the slice
/// `(backend_id, temperature)` of the store.
pub fn build_distribution(
    metric: MetricKind,
    prompts: &PromptSet,
    store: &RunStore,
    backend_id: &str,
    temperature: Temperature,
) -> Result<VariabilityDistribution> {
    Ok(build_distributions(&[metric], prompts, store, backend_id, temperature, None)?.remove(0))
}

/// One distribution per metric from a single read of the slice. With
/// `max_runs`, only runs with index below it are used.
pub fn build_distributions(
    metrics: &[MetricKind],
    prompts: &PromptSet,
    store: &RunStore,
    backend_id: &str,
    temperature: Temperature,
    max_runs: Option<u32>,
) -> Result<Vec<VariabilityDistribution>> {
    let records = store.query(backend_id, temperature, None)?;
    if records.is_empty() {
        return Err(Error::Empty(format!(
            "store has no records for {backend_id} at T={temperature}"
        )));
    }
    let environment = records[0].environment.clone();
    let mut by_prompt: HashMap<&str, Vec<Response>> = HashMap::new();
    for r in records.iter().filter(|r| max_runs.is_none_or(|m| r.run_index < m)) {
        by_prompt
            .entry(r.prompt_id.as_str())
            .or_default()
            .push(Response::from(r));
    }
    let bundles: Vec<(&str, Option<ResponseBundle>)> = prompts
        .prompts
        .iter()
        .map(|p| {
            let id = p.prompt_id.as_str();
            (id, by_prompt.remove(id).map(|rs| ResponseBundle::new(id, rs)))
        })
        .collect();
    metrics
        .iter()
        .map(|metric| {
            VariabilityDistribution::from_bundles(
                *metric,
                DistributionSource {
                    backend_id: backend_id.to_string(),
                    temperature,
                    environment: environment.clone(),
                },
                bundles.iter().map(|(id, b)| (*id, b.as_ref())),
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bundle(texts: &[&str]) -> ResponseBundle {
        ResponseBundle::from_texts("p", texts)
    }

    fn with_ids(seqs: &[&[u32]]) -> ResponseBundle {
        ResponseBundle::new(
            "p",
            seqs.iter()
                .map(|s| Response {
                    text: String::new(),
                    token_ids: Some(s.to_vec()),
                    top_logprobs: None,
                })
                .collect(),
        )
    }

    fn logprob_response(dists: &[&[(&str, f64)]]) -> Response {
        Response {
            text: String::new(),
            token_ids: None,
            top_logprobs: Some(
                dists
                    .iter()
                    .map(|d| d.iter().map(|(t, p)| (t.to_string(), p.ln())).collect())
                    .collect(),
            ),
        }
    }

    #[test]
    fn exact_match_examples() {
        assert_eq!(exact_match_fraction(&bundle(&["a", "a", "a"])).unwrap(), 1.0);
        assert_eq!(exact_match_fraction(&bundle(&["a", "a", "b", "c"])).unwrap(), 0.5);
        let hundred = vec!["same answer"; 100];
        assert_eq!(exact_match_fraction(&bundle(&hundred)).unwrap(), 1.0);
        assert!(exact_match_fraction(&bundle(&[])).is_err());
    }

    #[test]
    fn exact_match_is_byte_exact_unless_trimmed() {
        let b = bundle(&["Paris", "Paris ", "Paris\n", "Paris"]);
        assert_eq!(exact_match_fraction(&b).unwrap(), 0.5);
        assert_eq!(exact_match_fraction_trimmed(&b).unwrap(), 1.0);
        // Unicode normalization forms are distinct byte strings.
        let b = bundle(&["caf\u{e9}", "cafe\u{301}"]);
        assert_eq!(exact_match_fraction(&b).unwrap(), 0.5);
    }

    #[test]
    fn first_divergence_examples() {
        assert_eq!(
            first_divergence_index(&with_ids(&[&[1, 2, 3], &[1, 2, 4]])).unwrap(),
            2.0
        );
        assert_eq!(
            first_divergence_index(&with_ids(&[&[1, 2, 3, 4, 5], &[1, 2, 3, 4, 5]])).unwrap(),
            5.0
        );
        // Pairs diverge at 2, 0 and 0.
        let b = with_ids(&[&[1, 2, 3], &[1, 2, 4], &[7, 2, 3]]);
        assert!((first_divergence_index(&b).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        // A strict prefix diverges at its own length.
        assert_eq!(first_divergence_index(&with_ids(&[&[1, 2], &[1, 2, 3]])).unwrap(), 2.0);
        assert!(first_divergence_index(&with_ids(&[&[1]])).is_err());
    }

    #[test]
    fn first_divergence_falls_back_to_words() {
        let b = bundle(&["the cat sat", "the cat ran", "the  cat sat"]);
        // pairs: (0,1)=2, (0,2)=3, (1,2)=2
        assert!((first_divergence_index(&b).unwrap() - 7.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn edit_distance_examples() {
        let s = edit_distance_stats(&bundle(&["abc", "abc"])).unwrap();
        assert_eq!((s.mean, s.std), (0.0, 0.0));
        let s = edit_distance_stats(&bundle(&["kitten", "sitting"])).unwrap();
        assert_eq!((s.mean, s.std), (3.0, 0.0));
        let s = edit_distance_stats(&bundle(&["a", "b", "a"])).unwrap();
        assert!((s.mean - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.std - 2f64.sqrt() / 3.0).abs() < 1e-15);
    }

    #[test]
    fn edit_distance_counts_characters_not_bytes() {
        let s = edit_distance_stats(&bundle(&["na\u{ef}ve", "naive"])).unwrap();
        assert_eq!(s.mean, 1.0);
    }

    #[test]
    fn js_examples() {
        assert_eq!(js_divergence(&[0.2, 0.8], &[0.2, 0.8]), 0.0);
        let ln2 = std::f64::consts::LN_2;
        assert!((js_divergence(&[1.0, 0.0], &[0.0, 1.0]) - ln2).abs() < 1e-15);
        // H([3/4, 1/4]) - ln(2)/2
        let expected = -(0.75f64 * 0.75f64.ln() + 0.25 * 0.25f64.ln()) - 0.5 * ln2;
        assert!((js_divergence(&[0.5, 0.5], &[1.0, 0.0]) - expected).abs() < 1e-15);
        assert!((expected - 0.215_761_6).abs() < 1e-7);
    }

    #[test]
    fn js_next_token_over_runs() {
        let a = logprob_response(&[&[("x", 0.5), ("y", 0.5)], &[("x", 1.0)]]);
        let b = logprob_response(&[&[("x", 1.0)], &[("x", 1.0)], &[("z", 1.0)]]);
        let b2 = ResponseBundle::new("p", vec![a.clone(), b]);
        let expected = (js_divergence(&[0.5, 0.5], &[1.0, 0.0]) + 0.0) / 2.0;
        assert!((js_divergence_next_token(&b2).unwrap() - expected).abs() < 1e-15);
        let same = ResponseBundle::new("p", vec![a.clone(), a]);
        assert_eq!(js_divergence_next_token(&same).unwrap(), 0.0);
    }

    #[test]
    fn js_unavailable_without_logprobs() {
        let err = js_divergence_next_token(&bundle(&["a", "b"])).unwrap_err();
        assert!(matches!(err, Error::MetricUnavailable(_)));
        assert!(matches!(
            mean_entropy(&bundle(&["a"])),
            Err(Error::MetricUnavailable(_))
        ));
    }

    #[test]
    fn mean_entropy_renormalizes_top_k() {
        // Top-2 of a wider distribution: (0.3, 0.3) renormalizes to uniform.
        let r = logprob_response(&[&[("a", 0.3), ("b", 0.3)], &[("a", 0.9)]]);
        let h = mean_entropy(&ResponseBundle::new("p", vec![r])).unwrap();
        assert!((h - std::f64::consts::LN_2 / 2.0).abs() < 1e-15);
    }

    #[test]
    fn metric_names_round_trip() {
        for k in MetricKind::ALL {
            assert_eq!(k.name().parse::<MetricKind>().unwrap(), k);
            assert_eq!(serde_json::to_string(&k).unwrap(), format!("\"{}\"", k.name()));
        }
        assert!("nope".parse::<MetricKind>().is_err());
    }

    #[test]
    fn distribution_reports_omissions() {
        let full = bundle(&["a", "a"]);
        let single = bundle(&["a"]);
        let source = DistributionSource {
            backend_id: "b".into(),
            temperature: Temperature::ZERO,
            environment: "e".into(),
        };
        let d = VariabilityDistribution::from_bundles(
            MetricKind::EditDistanceMean,
            source.clone(),
            [("p1", Some(&full)), ("p2", None), ("p3", Some(&single))],
        )
        .unwrap();
        assert_eq!(d.values, vec![0.0]);
        assert_eq!(d.omitted.len(), 2);
        assert!(VariabilityDistribution::from_bundles(MetricKind::EditDistanceMean, source, [("p2", None)],).is_err());
    }

    #[test]
    fn csv_export() {
        let d = VariabilityDistribution {
            metric: MetricKind::ExactMatchFraction,
            prompt_ids: vec!["q1".into(), "a,b".into()],
            values: vec![1.0, 0.5],
            source: DistributionSource {
                backend_id: "b".into(),
                temperature: Temperature::ZERO,
                environment: "e".into(),
            },
            omitted: vec![],
        };
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "prompt_id,value\nq1,1\n\"a,b\",0.5\n");
    }

    fn small_bundle() -> impl Strategy<Value = Vec<String>> {
        prop::collection::vec("[ab ]{0,6}", 2..8)
    }

    proptest! {
        #[test]
        fn exact_match_range_and_identity(texts in small_bundle()) {
            let b = ResponseBundle::from_texts("p", &texts);
            let v = exact_match_fraction(&b).unwrap();
            let n = texts.len() as f64;
            prop_assert!(v >= 1.0 / n - 1e-15 && v <= 1.0);
            let all_same = texts.iter().all(|t| *t == texts[0]);
            prop_assert_eq!(v == 1.0, all_same);
            let mean = edit_distance_stats(&b).unwrap().mean;
            prop_assert_eq!(mean == 0.0, all_same);
        }

        #[test]
        fn metrics_are_permutation_invariant(texts in small_bundle(), rot in 0usize..8) {
            let b = ResponseBundle::from_texts("p", &texts);
            let mut shuffled = texts.clone();
            let k = rot % shuffled.len();
            shuffled.rotate_left(k);
            shuffled.reverse();
            let s = ResponseBundle::from_texts("p", &shuffled);
            for metric in [
                MetricKind::ExactMatchFraction,
                MetricKind::FirstDivergenceIndex,
                MetricKind::EditDistanceMean,
                MetricKind::EditDistanceStd,
            ] {
                let (x, y) = (compute(metric, &b).unwrap(), compute(metric, &s).unwrap());
                prop_assert!((x - y).abs() < 1e-12, "{metric}: {x} vs {y}");
            }
        }

        #[test]
        fn js_is_a_bounded_symmetric_divergence(
            p in prop::collection::vec(0.0f64..1.0, 4),
            q in prop::collection::vec(0.0f64..1.0, 4),
        ) {
            let norm = |v: Vec<f64>| {
                let s: f64 = v.iter().sum();
                if s == 0.0 { vec![0.25; 4] } else { v.iter().map(|x| x / s).collect() }
            };
            let (p, q) = (norm(p), norm(q));
            let d = js_divergence(&p, &q);
            prop_assert!((0.0..=std::f64::consts::LN_2).contains(&d));
            prop_assert!((d - js_divergence(&q, &p)).abs() < 1e-15);
            prop_assert_eq!(js_divergence(&p, &p), 0.0);
        }
    }
}
