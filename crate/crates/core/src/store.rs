//! Prompt sets, temperature grids and the append-only run store.
//!
//! The store keeps one JSONL log per `(backend, temperature)` slice under
//! `<root>/<backend>/T=<temperature>.jsonl`, with a sidecar index mapping
//! `(prompt_id, run_index)` to the byte offset of the record. The sidecar
//! records the log length it covers; a log that has grown past it (a crash
//! between appending and indexing) is re-indexed on open.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampling::Temperature;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptCategory {
    #[default]
    General,
    Task,
    EdgeAdversarial,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub prompt_id: String,
    pub text: String,
    #[serde(default)]
    pub category: PromptCategory,
}

// CSV leaves an absent category as an empty cell.
#[derive(Deserialize)]
struct CsvPrompt {
    prompt_id: String,
    text: String,
    #[serde(default)]
    category: Option<PromptCategory>,
}

/// An ordered, id-unique prompt collection. Order is significant: prompt
/// subsets are taken by prefix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSet {
    pub id: String,
    pub prompts: Vec<Prompt>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptFormat {
    Jsonl,
    Csv,
}

impl PromptFormat {
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => Self::Csv,
            _ => Self::Jsonl,
        }
    }
}

impl PromptSet {
    pub fn new(id: impl Into<String>, prompts: Vec<Prompt>) -> Result<Self> {
        let mut seen = HashSet::new();
        for (i, p) in prompts.iter().enumerate() {
            if !seen.insert(p.prompt_id.as_str()) {
                return Err(Error::DuplicatePrompt {
                    id: p.prompt_id.clone(),
                    line: i + 1,
                });
            }
        }
        Ok(Self { id: id.into(), prompts })
    }

    /// `n` prompts named `p000`, `p001`, ... with distinct texts.
    pub fn synthetic(n: usize) -> Self {
        let prompts = (0..n)
            .map(|i| Prompt {
                prompt_id: format!("p{i:03}"),
                text: format!("synthetic prompt number {i}"),
                category: PromptCategory::Synthetic,
            })
            .collect();
        Self {
            id: format!("synthetic-{n}"),
            prompts,
        }
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    /// The first `n` prompts in stored order.
    pub fn truncated(&self, n: usize) -> Self {
        Self {
            id: format!("{}[..{n}]", self.id),
            prompts: self.prompts.iter().take(n).cloned().collect(),
        }
    }
}

/// Reads a prompt file. Rows keep file order; a missing category defaults
/// to `general`. Errors name the offending line.
pub fn load_prompts(path: &Path, format: PromptFormat) -> Result<PromptSet> {
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut prompts = Vec::new();
    let mut seen = HashSet::new();
    let mut push = |prompt: Prompt, line: usize| {
        if !seen.insert(prompt.prompt_id.clone()) {
            return Err(Error::DuplicatePrompt {
                id: prompt.prompt_id,
                line,
            });
        }
        prompts.push(prompt);
        Ok(())
    };

    match format {
        PromptFormat::Jsonl => {
            let reader = BufReader::new(File::open(path)?);
            for (i, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let prompt: Prompt = serde_json::from_str(&line).map_err(|e| parse_err(i + 1, e.to_string()))?;
                push(prompt, i + 1)?;
            }
        }
        PromptFormat::Csv => {
            let mut reader = csv::Reader::from_path(path).map_err(|e| parse_err(1, e.to_string()))?;
            let headers = reader.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
            for row in reader.records() {
                let row = row.map_err(|e| {
                    let line = e.position().map_or(0, |p| p.line() as usize);
                    parse_err(line, e.to_string())
                })?;
                let line = row.position().map_or(0, |p| p.line() as usize);
                let row: CsvPrompt = row
                    .deserialize(Some(&headers))
                    .map_err(|e| parse_err(line, e.to_string()))?;
                let prompt = Prompt {
                    prompt_id: row.prompt_id,
                    text: row.text,
                    category: row.category.unwrap_or_default(),
                };
                push(prompt, line)?;
            }
        }
    }
    Ok(PromptSet { id, prompts })
}

/// Candidate temperatures, strictly increasing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Temperature>", into = "Vec<Temperature>")]
pub struct TemperatureGrid(Vec<Temperature>);

impl TemperatureGrid {
    pub fn new(temperatures: Vec<Temperature>) -> Result<Self> {
        if temperatures.is_empty() {
            return Err(Error::InvalidInput("temperature grid is empty".into()));
        }
        if temperatures.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidInput(
                "temperature grid must be strictly increasing".into(),
            ));
        }
        Ok(Self(temperatures))
    }

    pub fn from_values(values: &[f64]) -> Result<Self> {
        Self::new(values.iter().map(|v| Temperature::new(*v)).collect::<Result<_>>()?)
    }

    /// Steps of 0.01 on [0, 0.2], 0.05 on (0.2, 0.5], 0.1 on (0.5, 1].
    pub fn standard() -> Self {
        let hundredths = (0..=20).chain((25..=50).step_by(5)).chain((60..=100).step_by(10));
        Self(hundredths.map(centi).collect())
    }

    /// [`standard`](Self::standard) plus steps of 0.05 on (1, 1.5].
    pub fn extended() -> Self {
        let mut grid = Self::standard().0;
        grid.extend((105..=150).step_by(5).map(centi));
        Self(grid)
    }

    pub fn temperatures(&self) -> &[Temperature] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn position(&self, t: Temperature) -> Option<usize> {
        self.0.binary_search(&t).ok()
    }

    /// The closed interval between the grid neighbours of `t`, which must be
    /// a grid point: the values "within one grid step" of it.
    pub fn neighbourhood(&self, t: Temperature) -> Option<(f64, f64)> {
        let i = self.position(t)?;
        let lo = self.0[i.saturating_sub(1)].value();
        let hi = self.0[(i + 1).min(self.0.len() - 1)].value();
        Some((lo, hi))
    }
}

fn centi(i: u32) -> Temperature {
    Temperature::new(f64::from(i) / 100.0).expect("grid values are non-negative")
}

impl TryFrom<Vec<Temperature>> for TemperatureGrid {
    type Error = Error;

    fn try_from(v: Vec<Temperature>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<TemperatureGrid> for Vec<Temperature> {
    fn from(g: TemperatureGrid) -> Self {
        g.0
    }
}

/// One persisted response with its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub prompt_id: String,
    pub run_index: u32,
    pub backend_id: String,
    pub temperature: Temperature,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_ids: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_logprob_tops: Option<Vec<Vec<(String, f64)>>>,
    pub timestamp: DateTime<Utc>,
    pub environment: String,
    /// Requests issued to obtain this record (1 when no retry was needed).
    #[serde(default = "one")]
    pub attempts: u32,
}

fn one() -> u32 {
    1
}

impl GenerationRecord {
    pub fn key(&self) -> RecordKey {
        RecordKey {
            backend_id: self.backend_id.clone(),
            temperature: self.temperature,
            prompt_id: self.prompt_id.clone(),
            run_index: self.run_index,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RecordKey {
    pub backend_id: String,
    pub temperature: Temperature,
    pub prompt_id: String,
    pub run_index: u32,
}

impl std::fmt::Display for RecordKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}@T={}/{}#{}",
            self.backend_id, self.temperature, self.prompt_id, self.run_index
        )
    }
}

/// Byte offsets of the records in one slice log.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SliceIndex {
    /// Length of the log this index covers.
    pub log_len: u64,
    pub entries: BTreeMap<String, BTreeMap<u32, u64>>,
}

impl SliceIndex {
    fn contains(&self, prompt_id: &str, run_index: u32) -> bool {
        self.entries
            .get(prompt_id)
            .is_some_and(|runs| runs.contains_key(&run_index))
    }

    fn insert(&mut self, prompt_id: &str, run_index: u32, offset: u64) {
        self.entries
            .entry(prompt_id.to_string())
            .or_default()
            .insert(run_index, offset);
    }

    pub fn len(&self) -> usize {
        self.entries.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

type SliceId = (String, Temperature);

/// Append-only record store. Single writer (`&mut self`), any number of
/// readers of flushed records.
#[derive(Debug)]
pub struct RunStore {
    root: PathBuf,
    indexes: HashMap<SliceId, SliceIndex>,
}

impl RunStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        let mut store = Self {
            root,
            indexes: HashMap::new(),
        };
        for slice in store.scan_slices()? {
            let index = store.load_index(&slice)?;
            store.indexes.insert(slice, index);
        }
        Ok(store)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn slice_dir(&self, backend_id: &str) -> PathBuf {
        self.root.join(encode_component(backend_id))
    }

    fn log_path(&self, (backend_id, t): &SliceId) -> PathBuf {
        self.slice_dir(backend_id).join(format!("T={}.jsonl", t.value()))
    }

    fn index_path(&self, (backend_id, t): &SliceId) -> PathBuf {
        self.slice_dir(backend_id).join(format!("T={}.idx.json", t.value()))
    }

    fn scan_slices(&self) -> Result<Vec<SliceId>> {
        let mut slices = Vec::new();
        for dir in fs::read_dir(&self.root)? {
            let dir = dir?;
            if !dir.file_type()?.is_dir() {
                continue;
            }
            let Some(backend_id) = decode_component(&dir.file_name().to_string_lossy()) else {
                continue;
            };
            for file in fs::read_dir(dir.path())? {
                let name = file?.file_name().to_string_lossy().into_owned();
                let parsed = name
                    .strip_prefix("T=")
                    .and_then(|rest| rest.strip_suffix(".jsonl"))
                    .and_then(|t| t.parse::<f64>().ok())
                    .and_then(|t| Temperature::new(t).ok());
                if let Some(t) = parsed {
                    slices.push((backend_id.clone(), t));
                }
            }
        }
        slices.sort();
        Ok(slices)
    }

    fn load_index(&self, slice: &SliceId) -> Result<SliceIndex> {
        let log_len = fs::metadata(self.log_path(slice)).map(|m| m.len()).unwrap_or(0);
        let sidecar = fs::read(self.index_path(slice))
            .ok()
            .and_then(|bytes| serde_json::from_slice::<SliceIndex>(&bytes).ok());
        match sidecar {
            Some(index) if index.log_len == log_len => Ok(index),
            _ => {
                log::info!(
                    "re-indexing {} (sidecar missing or stale)",
                    self.log_path(slice).display()
                );
                let index = self.rebuild_index(slice)?;
                self.write_index(slice, &index)?;
                Ok(index)
            }
        }
    }

    /// Builds a slice index by scanning its log. A torn final line (no
    /// trailing newline) is cut off.
    pub fn rebuild_index(&self, slice: &SliceId) -> Result<SliceIndex> {
        let path = self.log_path(slice);
        let mut index = SliceIndex::default();
        let Ok(mut file) = OpenOptions::new().read(true).write(true).open(&path) else {
            return Ok(index);
        };
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes)?;
        let complete = bytes.iter().rposition(|b| *b == b'\n').map_or(0, |i| i + 1);
        if complete < bytes.len() {
            log::warn!("truncating torn record at end of {}", path.display());
            file.set_len(complete as u64)?;
            file.sync_all()?;
        }
        let mut offset = 0u64;
        for (lineno, line) in bytes[..complete].split(|b| *b == b'\n').enumerate() {
            if line.is_empty() {
                offset += 1;
                continue;
            }
            let record: GenerationRecord = serde_json::from_slice(line).map_err(|e| Error::Parse {
                path: path.clone(),
                line: lineno + 1,
                message: e.to_string(),
            })?;
            index.insert(&record.prompt_id, record.run_index, offset);
            offset += line.len() as u64 + 1;
        }
        index.log_len = complete as u64;
        Ok(index)
    }

    fn write_index(&self, slice: &SliceId, index: &SliceIndex) -> Result<()> {
        let path = self.index_path(slice);
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, serde_json::to_vec(index)?)?;
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn contains(&self, key: &RecordKey) -> bool {
        self.indexes
            .get(&(key.backend_id.clone(), key.temperature))
            .is_some_and(|i| i.contains(&key.prompt_id, key.run_index))
    }

    pub fn len(&self) -> usize {
        self.indexes.values().map(SliceIndex::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Appends one record, durable before returning.
    pub fn append(&mut self, record: &GenerationRecord) -> Result<()> {
        self.append_batch(std::slice::from_ref(record))
    }

    /// Appends records with one flush per touched slice. Fails without
    /// writing anything if any key is already stored or repeated.
    pub fn append_batch(&mut self, records: &[GenerationRecord]) -> Result<()> {
        let mut batch_keys = HashSet::new();
        for r in records {
            let key = r.key();
            if self.contains(&key) || !batch_keys.insert(key.clone()) {
                return Err(Error::KeyCollision(key.to_string()));
            }
        }
        let mut by_slice: BTreeMap<SliceId, Vec<&GenerationRecord>> = BTreeMap::new();
        for r in records {
            by_slice
                .entry((r.backend_id.clone(), r.temperature))
                .or_default()
                .push(r);
        }
        for (slice, recs) in by_slice {
            fs::create_dir_all(self.slice_dir(&slice.0))?;
            let mut index = match self.indexes.remove(&slice) {
                Some(i) => i,
                None => self.load_index(&slice)?,
            };
            let mut file = OpenOptions::new()
                .create(true)
                .append(true)
                .open(self.log_path(&slice))?;
            let mut offset = file.seek(SeekFrom::End(0))?;
            let mut buf = Vec::new();
            for r in recs {
                let line_start = buf.len() as u64;
                serde_json::to_writer(&mut buf, r)?;
                buf.push(b'\n');
                index.insert(&r.prompt_id, r.run_index, offset + line_start);
            }
            file.write_all(&buf)?;
            file.sync_all()?;
            offset += buf.len() as u64;
            index.log_len = offset;
            self.write_index(&slice, &index)?;
            self.indexes.insert(slice, index);
        }
        Ok(())
    }

    /// Records of one slice, optionally for one prompt, sorted by
    /// `(prompt_id, run_index)`.
    pub fn query(
        &self,
        backend_id: &str,
        temperature: Temperature,
        prompt_id: Option<&str>,
    ) -> Result<Vec<GenerationRecord>> {
        let slice = (backend_id.to_string(), temperature);
        let Some(index) = self.indexes.get(&slice) else {
            return Ok(Vec::new());
        };
        let path = self.log_path(&slice);
        let mut reader = BufReader::new(File::open(&path)?);
        let mut out = Vec::new();
        let mut line = String::new();
        let mut read_at = |offset: u64, out: &mut Vec<GenerationRecord>| -> Result<()> {
            reader.seek(SeekFrom::Start(offset))?;
            line.clear();
            reader.read_line(&mut line)?;
            out.push(serde_json::from_str(line.trim_end_matches('\n'))?);
            Ok(())
        };
        match prompt_id {
            Some(id) => {
                for offset in index.entries.get(id).into_iter().flat_map(|r| r.values()) {
                    read_at(*offset, &mut out)?;
                }
            }
            None => {
                for runs in index.entries.values() {
                    for offset in runs.values() {
                        read_at(*offset, &mut out)?;
                    }
                }
            }
        }
        Ok(out)
    }

    /// All `(backend, temperature)` slices with at least one record.
    pub fn slices(&self) -> Vec<(String, Temperature)> {
        let mut v: Vec<_> = self
            .indexes
            .iter()
            .filter(|(_, i)| !i.is_empty())
            .map(|(k, _)| k.clone())
            .collect();
        v.sort();
        v
    }

    /// Number of stored runs per prompt in one slice.
    pub fn run_counts(&self, backend_id: &str, temperature: Temperature) -> BTreeMap<String, usize> {
        self.indexes
            .get(&(backend_id.to_string(), temperature))
            .map(|i| i.entries.iter().map(|(k, v)| (k.clone(), v.len())).collect())
            .unwrap_or_default()
    }

    pub fn index(&self, backend_id: &str, temperature: Temperature) -> Option<&SliceIndex> {
        self.indexes.get(&(backend_id.to_string(), temperature))
    }
}

/// Percent-encodes everything outside `[A-Za-z0-9._-]` so any backend id
/// maps to one safe directory name.
pub fn encode_component(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for b in s.bytes() {
        if b.is_ascii_alphanumeric() || b"._-".contains(&b) {
            out.push(b as char);
        } else {
            out.push_str(&format!("%{b:02X}"));
        }
    }
    if out.starts_with('.') {
        out.replace_range(0..1, "%2E");
    }
    out
}

fn decode_component(s: &str) -> Option<String> {
    let bytes = s.as_bytes();
    let mut out = Vec::with_capacity(bytes.len());
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'%' {
            let hex = s.get(i + 1..i + 3)?;
            out.push(u8::from_str_radix(hex, 16).ok()?);
            i += 3;
        } else {
            out.push(bytes[i]);
            i += 1;
        }
    }
    String::from_utf8(out).ok()
}
