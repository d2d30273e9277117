//! Generation backends and the campaign-slice runner that fills the store.
//!
//! Remote systems are reached over the OpenAI-style chat-completions
//! protocol, one request per run. The synthetic lab model implements the
//! same [`Generator`] trait so reference and SUT campaigns share one code
//! path.

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;
use std::thread;
use std::time::Duration;

use chrono::Utc;
use log::{debug, info, warn};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::lab::{PerturbationModel, SyntheticLM, SyntheticLMConfig};
use crate::sampling::{derive_seed, hash_str, SeededRng, Temperature};
use crate::store::{GenerationRecord, Prompt, PromptSet, RecordKey, RunStore};

/// Records are flushed to the store in batches of this size.
const APPEND_BATCH: usize = 64;

fn default_timeout() -> f64 {
    60.0
}
fn default_retries() -> u32 {
    5
}
fn default_concurrency() -> usize {
    4
}
fn default_backoff_base() -> u64 {
    1_000
}
fn default_backoff_cap() -> u64 {
    60_000
}
fn default_max_tokens() -> usize {
    32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub base_url: String,
    pub model_name: String,
    /// Name of the environment variable holding the API key. Without one no
    /// `Authorization` header is sent.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: usize,
    #[serde(default)]
    pub temperature: Temperature,
    /// Seconds.
    #[serde(default = "default_timeout")]
    pub request_timeout: f64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_concurrency")]
    pub max_concurrency: usize,
    #[serde(default)]
    pub logprobs_requested: bool,
    #[serde(default = "default_backoff_base")]
    pub backoff_base_ms: u64,
    #[serde(default = "default_backoff_cap")]
    pub backoff_cap_ms: u64,
}

impl BackendConfig {
    pub fn new(base_url: impl Into<String>, model_name: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model_name: model_name.into(),
            api_key_env: None,
            max_tokens: default_max_tokens(),
            temperature: Temperature::ZERO,
            request_timeout: default_timeout(),
            max_retries: default_retries(),
            max_concurrency: default_concurrency(),
            logprobs_requested: false,
            backoff_base_ms: default_backoff_base(),
            backoff_cap_ms: default_backoff_cap(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_tokens == 0 {
            return Err(Error::Config("max_tokens must be at least 1".into()));
        }
        if self.max_concurrency == 0 {
            return Err(Error::Config("max_concurrency must be at least 1".into()));
        }
        if !(self.request_timeout > 0.0) {
            return Err(Error::Config("request_timeout must be positive".into()));
        }
        if !self.base_url.starts_with("http://") && !self.base_url.starts_with("https://") {
            return Err(Error::Config(format!(
                "base_url {:?} is not an http(s) URL",
                self.base_url
            )));
        }
        Ok(())
    }

    /// Delay before retry number `attempt` (1-based): exponential in the
    /// attempt, capped, scaled by a jitter factor in `[0.5, 1)`.
    pub fn backoff(&self, attempt: u32, jitter: f64) -> Duration {
        let exp = self
            .backoff_base_ms
            .saturating_mul(1u64 << (attempt.saturating_sub(1)).min(30));
        let ms = exp.min(self.backoff_cap_ms) as f64 * (0.5 + 0.5 * jitter.clamp(0.0, 1.0));
        Duration::from_micros((ms * 1000.0) as u64)
    }
}

/// One completed generation, before it is keyed into a record.
#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub text: String,
    pub token_ids: Option<Vec<u32>>,
    pub token_logprob_tops: Option<Vec<Vec<(String, f64)>>>,
    pub attempts: u32,
}

/// Anything that produces one completion per (prompt, temperature, seed).
pub trait Generator: Sync {
    fn backend_id(&self) -> &str;
    fn environment_id(&self) -> &str;
    fn max_concurrency(&self) -> usize {
        1
    }
    fn generate(&self, prompt: &Prompt, temperature: Temperature, seed: u64) -> Result<Completion>;
}

/// Seed of one run, derived from the campaign seed and the run's key so
/// that results do not depend on scheduling order.
pub fn run_seed(base: u64, backend_id: &str, prompt_id: &str, temperature: Temperature, run: u32) -> u64 {
    derive_seed(
        base,
        &[
            hash_str(backend_id),
            hash_str(prompt_id),
            temperature.value().to_bits(),
            u64::from(run),
        ],
    )
}

/// Synthetic backend: the lab model under a perturbation.
#[derive(Debug, Clone)]
pub struct SyntheticGenerator {
    id: String,
    environment: String,
    lm: SyntheticLM,
    perturbation: PerturbationModel,
    max_tokens: usize,
    logprobs: bool,
}

impl SyntheticGenerator {
    pub fn new(
        id: impl Into<String>,
        config: &SyntheticLMConfig,
        perturbation: PerturbationModel,
        max_tokens: usize,
    ) -> Result<Self> {
        perturbation.validate()?;
        if max_tokens == 0 {
            return Err(Error::Config("max_tokens must be at least 1".into()));
        }
        let id = id.into();
        Ok(Self {
            environment: id.clone(),
            id,
            lm: SyntheticLM::new(config)?,
            perturbation,
            max_tokens,
            logprobs: false,
        })
    }

    pub fn with_environment(mut self, environment: impl Into<String>) -> Self {
        self.environment = environment.into();
        self
    }

    pub fn with_logprobs(mut self, on: bool) -> Self {
        self.logprobs = on;
        self
    }

    pub fn lm(&self) -> &SyntheticLM {
        &self.lm
    }

    pub fn perturbation(&self) -> &PerturbationModel {
        &self.perturbation
    }
}

impl Generator for SyntheticGenerator {
    fn backend_id(&self) -> &str {
        &self.id
    }

    fn environment_id(&self) -> &str {
        &self.environment
    }

    fn generate(&self, prompt: &Prompt, temperature: Temperature, seed: u64) -> Result<Completion> {
        let mut rng = SeededRng::new(seed);
        let tokens = self.lm.tokenize(&prompt.text);
        let generation = if self.logprobs {
            self.lm
                .generate_with_logprobs(&tokens, temperature, &self.perturbation, self.max_tokens, &mut rng)?
        } else {
            self.lm
                .generate(&tokens, temperature, &self.perturbation, self.max_tokens, &mut rng)?
        };
        let vocab = self.lm.vocab();
        let tops = generation.top_logprobs.map(|steps| {
            steps
                .into_iter()
                .map(|step| {
                    step.into_iter()
                        .map(|(id, lp)| (vocab.token(id).unwrap_or_default().to_string(), lp))
                        .collect()
                })
                .collect()
        });
        Ok(Completion {
            text: self.lm.detokenize(&generation.tokens),
            token_ids: Some(generation.tokens),
            token_logprob_tops: tops,
            attempts: 1,
        })
    }
}

/// Chat-completions client for one remote model.
#[derive(Debug, Clone)]
pub struct BackendClient {
    id: String,
    environment: String,
    config: BackendConfig,
    agent: ureq::Agent,
    api_key: Option<String>,
}

impl BackendClient {
    /// Reads the API key from the configured environment variable; the key
    /// lives only in memory.
    pub fn new(id: impl Into<String>, config: BackendConfig) -> Result<Self> {
        config.validate()?;
        let api_key = match &config.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| Error::MissingApiKey(var.clone()))?),
            None => None,
        };
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(config.request_timeout)))
            .http_status_as_error(false)
            .build()
            .into();
        let id = id.into();
        Ok(Self {
            environment: id.clone(),
            id,
            config,
            agent,
            api_key,
        })
    }

    pub fn with_environment(mut self, environment: impl Into<String>) -> Self {
        self.environment = environment.into();
        self
    }

    pub fn config(&self) -> &BackendConfig {
        &self.config
    }

    pub fn request_body(&self, prompt: &str, temperature: Temperature) -> Value {
        let mut body = json!({
            "model": self.config.model_name,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": temperature.value(),
            "max_tokens": self.config.max_tokens,
        });
        if self.config.logprobs_requested {
            body["logprobs"] = json!(true);
            body["top_logprobs"] = json!(crate::lab::TOP_LOGPROBS);
        }
        body
    }

    /// One completion at the configured temperature.
    pub fn complete(&self, prompt_id: &str, prompt: &str, run_index: u32) -> Result<GenerationRecord> {
        let temperature = self.config.temperature;
        let c = self.request(prompt, temperature)?;
        Ok(GenerationRecord {
            prompt_id: prompt_id.to_string(),
            run_index,
            backend_id: self.id.clone(),
            temperature,
            text: c.text,
            token_ids: c.token_ids,
            token_logprob_tops: c.token_logprob_tops,
            timestamp: Utc::now(),
            environment: self.environment.clone(),
            attempts: c.attempts,
        })
    }

    fn request(&self, prompt: &str, temperature: Temperature) -> Result<Completion> {
        let url = format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'));
        let body = serde_json::to_vec(&self.request_body(prompt, temperature))?;
        let mut attempt = 0u32;
        loop {
            attempt += 1;
            let mut req = self.agent.post(&url).header("Content-Type", "application/json");
            if let Some(key) = &self.api_key {
                req = req.header("Authorization", format!("Bearer {key}"));
            }
            let (status, message, retry_after) = match req.send(&body[..]) {
                Ok(mut resp) => {
                    let status = resp.status().as_u16();
                    if (200..300).contains(&status) {
                        let value: Value = resp.body_mut().read_json().map_err(|e| Error::Backend {
                            status: Some(status),
                            attempts: attempt,
                            message: format!("unreadable response body: {e}"),
                        })?;
                        let mut c = parse_completion(&value)?;
                        c.attempts = attempt;
                        return Ok(c);
                    }
                    let retry_after = resp
                        .headers()
                        .get("retry-after")
                        .and_then(|v| v.to_str().ok())
                        .and_then(|v| v.trim().parse::<f64>().ok());
                    let text = resp.body_mut().read_to_string().unwrap_or_default();
                    if status == 401 || status == 403 {
                        return Err(Error::Auth { status, message: text });
                    }
                    if status != 429 && status < 500 {
                        return Err(Error::Backend {
                            status: Some(status),
                            attempts: attempt,
                            message: text,
                        });
                    }
                    (Some(status), text, retry_after)
                }
                Err(e) => (None, e.to_string(), None),
            };
            if attempt > self.config.max_retries {
                return Err(Error::Backend {
                    status,
                    attempts: attempt,
                    message,
                });
            }
            let mut delay = self.config.backoff(attempt, rand::random::<f64>());
            if let Some(secs) = retry_after {
                delay = delay.max(Duration::from_secs_f64(
                    secs.min(self.config.backoff_cap_ms as f64 / 1000.0),
                ));
            }
            warn!(
                "{}: attempt {attempt} failed ({}), retrying in {delay:?}",
                self.id,
                status.map_or_else(|| message.clone(), |s| s.to_string())
            );
            thread::sleep(delay);
        }
    }
}

impl Generator for BackendClient {
    fn backend_id(&self) -> &str {
        &self.id
    }

    fn environment_id(&self) -> &str {
        &self.environment
    }

    fn max_concurrency(&self) -> usize {
        self.config.max_concurrency
    }

    /// Remote sampling is not seedable; the seed is ignored.
    fn generate(&self, prompt: &Prompt, temperature: Temperature, _seed: u64) -> Result<Completion> {
        self.request(&prompt.text, temperature)
    }
}

fn parse_completion(value: &Value) -> Result<Completion> {
    let choice = value
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| Error::Backend {
            status: None,
            attempts: 1,
            message: "response has no choices".into(),
        })?;
    let text = choice
        .pointer("/message/content")
        .and_then(Value::as_str)
        .unwrap_or_default()
        .to_string();
    let tops = choice
        .pointer("/logprobs/content")
        .and_then(Value::as_array)
        .map(|positions| {
            positions
                .iter()
                .map(|pos| {
                    pos.get("top_logprobs")
                        .and_then(Value::as_array)
                        .map(|alts| {
                            alts.iter()
                                .filter_map(|a| {
                                    Some((a.get("token")?.as_str()?.to_string(), a.get("logprob")?.as_f64()?))
                                })
                                .collect()
                        })
                        .unwrap_or_default()
                })
                .collect()
        });
    Ok(Completion {
        text,
        token_ids: None,
        token_logprob_tops: tops,
        attempts: 1,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub prompt_id: String,
    pub run_index: u32,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SliceSummary {
    pub backend_id: String,
    pub temperature: Temperature,
    pub requested: usize,
    pub written: usize,
    pub skipped: usize,
    pub failures: Vec<RunFailure>,
}

/// Fills the slice `(backend, temperature)` with `runs_per_prompt` runs of
/// every prompt, skipping runs already in the store. Workers generate in
/// parallel up to the backend's concurrency; this thread is the only
/// writer. A failed run is reported and does not stop the others.
pub fn run_campaign_slice(
    generator: &dyn Generator,
    prompts: &PromptSet,
    temperature: Temperature,
    runs_per_prompt: u32,
    seed: u64,
    store: &mut RunStore,
) -> Result<SliceSummary> {
    let backend_id = generator.backend_id().to_string();
    let jobs: Vec<(&Prompt, u32)> = prompts
        .prompts
        .iter()
        .flat_map(|p| (0..runs_per_prompt).map(move |r| (p, r)))
        .filter(|(p, r)| {
            !store.contains(&RecordKey {
                backend_id: backend_id.clone(),
                temperature,
                prompt_id: p.prompt_id.clone(),
                run_index: *r,
            })
        })
        .collect();
    let mut summary = SliceSummary {
        backend_id: backend_id.clone(),
        temperature,
        requested: prompts.len() * runs_per_prompt as usize,
        skipped: prompts.len() * runs_per_prompt as usize - jobs.len(),
        ..Default::default()
    };
    if jobs.is_empty() {
        debug!("{backend_id} T={temperature}: slice complete, nothing to do");
        return Ok(summary);
    }

    let workers = generator.max_concurrency().clamp(1, jobs.len());
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel::<(usize, Result<Completion>)>();
    let environment = generator.environment_id().to_string();
    let mut pending = Vec::with_capacity(APPEND_BATCH);
    let mut write_error = None;

    thread::scope(|scope| {
        for _ in 0..workers {
            let tx = tx.clone();
            let (next, jobs) = (&next, &jobs);
            let backend_id = backend_id.as_str();
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some((prompt, run)) = jobs.get(i) else { break };
                let seed = run_seed(seed, backend_id, &prompt.prompt_id, temperature, *run);
                if tx.send((i, generator.generate(prompt, temperature, seed))).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        for (i, outcome) in rx {
            let (prompt, run) = jobs[i];
            match outcome {
                Ok(c) => pending.push(GenerationRecord {
                    prompt_id: prompt.prompt_id.clone(),
                    run_index: run,
                    backend_id: backend_id.clone(),
                    temperature,
                    text: c.text,
                    token_ids: c.token_ids,
                    token_logprob_tops: c.token_logprob_tops,
                    timestamp: Utc::now(),
                    environment: environment.clone(),
                    attempts: c.attempts,
                }),
                Err(e) => {
                    warn!("{backend_id} {} run {run}: {e}", prompt.prompt_id);
                    summary.failures.push(RunFailure {
                        prompt_id: prompt.prompt_id.clone(),
                        run_index: run,
                        message: e.to_string(),
                    });
                }
            }
            if pending.len() >= APPEND_BATCH && write_error.is_none() {
                match store.append_batch(&pending) {
                    Ok(()) => summary.written += pending.len(),
                    Err(e) => write_error = Some(e),
                }
                pending.clear();
            }
            if write_error.is_some() {
                // Stop handing out work; in-flight requests drain.
                next.store(jobs.len(), Ordering::Relaxed);
            }
        }
    });
    if let Some(e) = write_error {
        return Err(e);
    }
    if !pending.is_empty() {
        store.append_batch(&pending)?;
        summary.written += pending.len();
    }
    summary
        .failures
        .sort_by(|a, b| (&a.prompt_id, a.run_index).cmp(&(&b.prompt_id, b.run_index)));
    info!(
        "{backend_id} T={temperature}: {} new, {} present, {} failed",
        summary.written,
        summary.skipped,
        summary.failures.len()
    );
    Ok(summary)
}

/// Prompts of `prompts` whose slice holds fewer than `runs` runs.
pub fn incomplete_prompts(
    store: &RunStore,
    backend_id: &str,
    temperature: Temperature,
    prompts: &PromptSet,
    runs: u32,
) -> BTreeSet<String> {
    let counts = store.run_counts(backend_id, temperature);
    prompts
        .prompts
        .iter()
        .filter(|p| counts.get(&p.prompt_id).copied().unwrap_or(0) < runs as usize)
        .map(|p| p.prompt_id.clone())
        .collect()
}
