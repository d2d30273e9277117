//! Synthetic language-model laboratory.
//!
//! [`SyntheticLM`] is a deterministic toy autoregressive model whose
//! top-1/top-2 logit margins are controlled by a [`GapProfile`], so that the
//! fraction of near-tie decoding steps is known. [`PerturbationModel`]s stand
//! in for implementation nondeterminism and act on logits before the
//! temperature transform.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampling::{
    self, derive_seed, mix64, LogitVector, ProbabilityVector, SeededRng, Temperature, TokenId, Vocabulary,
};

/// Token id that ends a generation.
pub const EOS: TokenId = 0;

/// Number of top alternatives recorded per position when log-probabilities
/// are requested.
pub const TOP_LOGPROBS: usize = 5;

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

/// Controls the logit landscape of each decoding context.
///
/// Every context has a leading token and a runner-up trailing it by a margin
/// taken from `margins`. Each prompt visits the margins in its own seeded
/// order, cycling when a generation is longer than the list, so all prompts
/// share the same multiset of margins. The remaining tokens sit at least
/// `tail_gap` below the runner-up.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapProfile {
    pub margins: Vec<f64>,
    /// Relative log-uniform jitter on each margin; 0 keeps margins exact.
    #[serde(default)]
    pub jitter: f64,
    pub tail_gap: f64,
    pub tail_spread: f64,
}

impl GapProfile {
    /// A few near-tie positions spread over roughly two decades of margin,
    /// the rest decisive. Sensitive to temperatures between about 0.01 and 1.
    pub fn near_tie() -> Self {
        let mut margins = vec![0.03, 0.15, 0.3, 0.6, 1.2];
        margins.resize(32, 3.0);
        Self {
            margins,
            jitter: 0.0,
            tail_gap: 4.0,
            tail_spread: 2.0,
        }
    }

    /// Every step decisive by `margin`.
    pub fn uniform(margin: f64) -> Self {
        Self {
            margins: vec![margin],
            jitter: 0.0,
            tail_gap: 4.0,
            tail_spread: 2.0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.margins.is_empty() {
            return Err(Error::InvalidInput("gap profile needs at least one margin".into()));
        }
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !self.margins.iter().all(|m| finite_nonneg(*m))
            || !finite_nonneg(self.jitter)
            || !finite_nonneg(self.tail_gap)
            || !finite_nonneg(self.tail_spread)
        {
            return Err(Error::InvalidInput(
                "gap profile values must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

impl Default for GapProfile {
    fn default() -> Self {
        Self::near_tie()
    }
}

/// Unset fields take their [`Default`] values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticLMConfig {
    pub vocab_size: usize,
    pub logit_fn_seed: u64,
    pub context_window: usize,
    pub gap_profile: GapProfile,
}

impl Default for SyntheticLMConfig {
    fn default() -> Self {
        Self {
            vocab_size: 32,
            logit_fn_seed: 0x5eed,
            context_window: 128,
            gap_profile: GapProfile::default(),
        }
    }
}

/// Deterministic toy language model. Logits are a pure function of
/// `(logit_fn_seed, prompt, prefix)`.
#[derive(Debug, Clone)]
pub struct SyntheticLM {
    vocab: Vocabulary,
    logit_fn_seed: u64,
    context_window: usize,
    gap_profile: GapProfile,
}

impl SyntheticLM {
    pub fn new(config: &SyntheticLMConfig) -> Result<Self> {
        if config.vocab_size < 3 {
            return Err(Error::InvalidInput(
                "synthetic vocabulary needs end-of-sequence plus two content tokens".into(),
            ));
        }
        if config.context_window == 0 {
            return Err(Error::InvalidInput("context window must be positive".into()));
        }
        config.gap_profile.validate()?;
        Ok(Self {
            vocab: Vocabulary::synthetic(config.vocab_size)?,
            logit_fn_seed: config.logit_fn_seed,
            context_window: config.context_window,
            gap_profile: config.gap_profile.clone(),
        })
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn context_window(&self) -> usize {
        self.context_window
    }

    /// Maps prompt text to content tokens (never end-of-sequence).
    pub fn tokenize(&self, text: &str) -> Vec<TokenId> {
        let content = (self.vocab.size() - 1) as u32;
        text.bytes().map(|b| u32::from(b) % content + 1).collect()
    }

    /// Space-joined token strings, end-of-sequence omitted.
    pub fn detokenize(&self, tokens: &[TokenId]) -> String {
        tokens
            .iter()
            .filter(|t| **t != EOS)
            .filter_map(|t| self.vocab.token(*t))
            .collect::<Vec<_>>()
            .join(" ")
    }

    fn prompt_hash(&self, prompt: &[TokenId]) -> u64 {
        prompt.iter().fold(mix64(self.logit_fn_seed), |h, t| extend_hash(h, *t))
    }

    /// Margin at each position for this prompt: a seeded permutation of the
    /// profile's margins.
    fn margin_schedule(&self, prompt_hash: u64) -> Vec<f64> {
        let mut margins = self.gap_profile.margins.clone();
        let mut state = mix64(prompt_hash ^ 0xa076_1d64_78bd_642f);
        for i in (1..margins.len()).rev() {
            state = mix64(state);
            let j = (state % (i as u64 + 1)) as usize;
            margins.swap(i, j);
        }
        margins
    }

    fn fill_logits(&self, context_hash: u64, margin: f64, out: &mut [f64]) {
        let draw = |k: u64| unit_f64(mix64(context_hash.wrapping_add(k.wrapping_mul(GOLDEN))));
        let margin = if self.gap_profile.jitter > 0.0 {
            margin * (self.gap_profile.jitter * (2.0 * draw(0) - 1.0)).exp()
        } else {
            margin
        };
        let content = self.vocab.size() - 1;
        let top = 1 + (mix64(context_hash ^ 1) % content as u64) as usize;
        let mut second = 1 + (mix64(context_hash ^ 2) % (content as u64 - 1)) as usize;
        if second >= top {
            second += 1;
        }
        let floor = -(margin + self.gap_profile.tail_gap);
        for (i, z) in out.iter_mut().enumerate() {
            *z = floor - self.gap_profile.tail_spread * draw(3 + i as u64);
        }
        out[top] = 0.0;
        out[second] = -margin;
    }

    /// Logits for the next token after `prompt ++ prefix`.
    pub fn synth_logits(&self, prompt: &[TokenId], prefix: &[TokenId]) -> Result<LogitVector> {
        if prefix.len() >= self.context_window {
            return Err(Error::ContextOverflow {
                len: prefix.len(),
                window: self.context_window,
            });
        }
        let prompt_hash = self.prompt_hash(prompt);
        let schedule = self.margin_schedule(prompt_hash);
        let context_hash = prefix.iter().fold(prompt_hash, |h, t| extend_hash(h, *t));
        let mut out = vec![0.0; self.vocab.size()];
        self.fill_logits(context_hash, schedule[prefix.len() % schedule.len()], &mut out);
        LogitVector::new(out)
    }

    /// Autoregressive decoding: logits, perturbation, temperature transform,
    /// then a categorical draw (or argmax at `T = 0`). Stops after
    /// `max_tokens` tokens or on end-of-sequence, which is kept in the output.
    pub fn generate(
        &self,
        prompt: &[TokenId],
        temperature: Temperature,
        eps: &PerturbationModel,
        max_tokens: usize,
        rng: &mut SeededRng,
    ) -> Result<Generation> {
        self.generate_inner(prompt, temperature, eps, max_tokens, rng, false)
    }

    /// As [`generate`](Self::generate), also recording the top
    /// [`TOP_LOGPROBS`] log-probabilities of the perturbed model distribution
    /// at every position.
    pub fn generate_with_logprobs(
        &self,
        prompt: &[TokenId],
        temperature: Temperature,
        eps: &PerturbationModel,
        max_tokens: usize,
        rng: &mut SeededRng,
    ) -> Result<Generation> {
        self.generate_inner(prompt, temperature, eps, max_tokens, rng, true)
    }

    fn generate_inner(
        &self,
        prompt: &[TokenId],
        temperature: Temperature,
        eps: &PerturbationModel,
        max_tokens: usize,
        rng: &mut SeededRng,
        record_logprobs: bool,
    ) -> Result<Generation> {
        if max_tokens == 0 {
            return Err(Error::InvalidInput("max_tokens must be at least 1".into()));
        }
        eps.validate()?;
        let prompt_hash = self.prompt_hash(prompt);
        let schedule = self.margin_schedule(prompt_hash);
        let mut context_hash = prompt_hash;
        let mut logits = vec![0.0; self.vocab.size()];
        let mut tokens = Vec::with_capacity(max_tokens);
        let mut top_logprobs = Vec::new();

        for position in 0..max_tokens {
            if position >= self.context_window {
                return Err(Error::ContextOverflow {
                    len: position,
                    window: self.context_window,
                });
            }
            self.fill_logits(context_hash, schedule[position % schedule.len()], &mut logits);
            eps.apply_in_place(&mut logits, rng);
            if record_logprobs {
                top_logprobs.push(top_k_logprobs(&sampling::softmax_slice(&logits), TOP_LOGPROBS));
            }
            let token = if temperature.is_greedy() {
                argmax(&logits)
            } else {
                let t = temperature.value();
                let scaled: Vec<f64> = logits.iter().map(|z| z / t).collect();
                sampling::sample_index(&sampling::softmax_slice(&scaled), rng.next_f64())
            };
            tokens.push(token);
            if token == EOS {
                break;
            }
            context_hash = extend_hash(context_hash, token);
        }

        Ok(Generation {
            tokens,
            top_logprobs: record_logprobs.then_some(top_logprobs),
        })
    }
}

/// Output of one synthetic generation.
#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub tokens: Vec<TokenId>,
    pub top_logprobs: Option<Vec<Vec<(TokenId, f64)>>>,
}

fn extend_hash(h: u64, token: TokenId) -> u64 {
    mix64(h ^ (u64::from(token) + 1).wrapping_mul(GOLDEN))
}

fn unit_f64(bits: u64) -> f64 {
    (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

fn argmax(values: &[f64]) -> TokenId {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best as TokenId
}

/// Top `k` (token, natural-log probability) pairs, most probable first,
/// lowest token id first among equals.
pub fn top_k_logprobs(probs: &[f64], k: usize) -> Vec<(TokenId, f64)> {
    let mut idx: Vec<usize> = (0..probs.len()).filter(|i| probs[*i] > 0.0).collect();
    idx.sort_by(|a, b| probs[*b].total_cmp(&probs[*a]).then(a.cmp(b)));
    idx.truncate(k);
    idx.into_iter().map(|i| (i as TokenId, probs[i].ln())).collect()
}

/// Implementation-noise stand-in, applied to logits at every decoding step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PerturbationModel {
    #[default]
    None,
    /// I.i.d. `N(0, sigma^2)` added to every logit.
    GaussianLogitNoise { sigma: f64 },
    /// Logits rounded to the nearest multiple of `quant_step`.
    Quantization { quant_step: f64 },
    /// A batch size is drawn from `batch_size_distribution` each step and a
    /// fixed, batch-size-keyed offset vector with entries `N(0, sigma^2)` is
    /// added to the logits.
    BatchShapeNoise {
        sigma: f64,
        batch_size_distribution: Vec<(u32, f64)>,
        #[serde(default)]
        offset_seed: u64,
    },
}

impl PerturbationModel {
    pub fn validate(&self) -> Result<()> {
        match self {
            Self::None => Ok(()),
            Self::GaussianLogitNoise { sigma } if sigma.is_finite() && *sigma >= 0.0 => Ok(()),
            Self::Quantization { quant_step } if quant_step.is_finite() && *quant_step > 0.0 => Ok(()),
            Self::BatchShapeNoise {
                sigma,
                batch_size_distribution,
                ..
            } => {
                let total: f64 = batch_size_distribution.iter().map(|(_, p)| p).sum();
                if !(sigma.is_finite() && *sigma >= 0.0)
                    || batch_size_distribution.is_empty()
                    || batch_size_distribution
                        .iter()
                        .any(|(_, p)| !(p.is_finite() && *p >= 0.0))
                    || (total - 1.0).abs() > 1e-9
                {
                    return Err(Error::InvalidInput(
                        "batch_shape_noise needs sigma >= 0 and batch-size probabilities summing to 1".into(),
                    ));
                }
                Ok(())
            }
            other => Err(Error::InvalidInput(format!("invalid perturbation {other:?}"))),
        }
    }

    pub fn is_none(&self) -> bool {
        matches!(self, Self::None)
    }

    fn apply_in_place(&self, logits: &mut [f64], rng: &mut SeededRng) {
        match self {
            Self::None => {}
            Self::GaussianLogitNoise { sigma } => {
                if *sigma > 0.0 {
                    for z in logits.iter_mut() {
                        let n: f64 = StandardNormal.sample(rng.inner_mut());
                        *z += sigma * n;
                    }
                }
            }
            Self::Quantization { quant_step } => {
                for z in logits.iter_mut() {
                    *z = (*z / quant_step).round() * quant_step;
                }
            }
            Self::BatchShapeNoise {
                sigma,
                batch_size_distribution,
                offset_seed,
            } => {
                let probs: Vec<f64> = batch_size_distribution.iter().map(|(_, p)| *p).collect();
                let pick = sampling::sample_index(&probs, rng.next_f64()) as usize;
                let batch = batch_size_distribution[pick].0;
                let mut offsets = SeededRng::new(derive_seed(*offset_seed, &[u64::from(batch)]));
                for z in logits.iter_mut() {
                    let n: f64 = StandardNormal.sample(offsets.inner_mut());
                    *z += sigma * n;
                }
            }
        }
    }

    pub fn perturb_logits(&self, z: &LogitVector, rng: &mut SeededRng) -> LogitVector {
        let mut values = z.as_slice().to_vec();
        self.apply_in_place(&mut values, rng);
        LogitVector::new(values).expect("perturbations keep logits finite")
    }

    /// Perturbs a distribution through its log-probabilities. Zero-mass
    /// tokens stay at zero.
    pub fn perturb_probs(&self, p: &ProbabilityVector, rng: &mut SeededRng) -> ProbabilityVector {
        if self.is_none() {
            return p.clone();
        }
        let support: Vec<usize> = (0..p.len()).filter(|i| p.as_slice()[*i] > 0.0).collect();
        let mut logits: Vec<f64> = support.iter().map(|i| p.as_slice()[*i].ln()).collect();
        self.apply_in_place(&mut logits, rng);
        let q = sampling::softmax_slice(&logits);
        let mut out = vec![0.0; p.len()];
        for (i, v) in support.into_iter().zip(q) {
            out[i] = v;
        }
        ProbabilityVector::new(out).expect("softmax output is normalized")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Synthetic,
    Remote,
}

/// An inference environment: the set of implementation factors a
/// generation ran under. Remote environments cannot be observed, only
/// labeled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentDescriptor {
    pub id: String,
    pub backend_kind: BackendKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perturbation: Option<PerturbationModel>,
    #[serde(default)]
    pub metadata: std::collections::BTreeMap<String, String>,
    pub observed: bool,
}

impl EnvironmentDescriptor {
    pub fn synthetic(id: impl Into<String>, perturbation: PerturbationModel) -> Self {
        Self {
            id: id.into(),
            backend_kind: BackendKind::Synthetic,
            perturbation: Some(perturbation),
            metadata: Default::default(),
            observed: true,
        }
    }

    pub fn remote(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            backend_kind: BackendKind::Remote,
            perturbation: None,
            metadata: Default::default(),
            observed: false,
        }
    }
}
