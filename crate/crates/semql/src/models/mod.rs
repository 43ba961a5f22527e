//! Provider abstraction for all inference.
//!
//! Everything the engine asks a model goes through [`Provider::invoke`], so
//! deterministic stand-ins (scripted fixtures, synthetic seeded models) make
//! call counts and results exactly reproducible offline. The `http` feature
//! adds a real chat-completions client.

#[cfg(feature = "http")]
pub mod http;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, Write as _};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::estimate_tokens;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, Hash)]
pub enum TaskKind {
    Complete,
    FilterBool,
    ClassifyMulti,
    Extract,
    Combine,
    Summarize,
    FastAggregate,
    RewriteOracle,
}

impl TaskKind {
    pub fn name(&self) -> &'static str {
        match self {
            TaskKind::Complete => "complete",
            TaskKind::FilterBool => "filter_bool",
            TaskKind::ClassifyMulti => "classify_multi",
            TaskKind::Extract => "extract",
            TaskKind::Combine => "combine",
            TaskKind::Summarize => "summarize",
            TaskKind::FastAggregate => "fast_aggregate",
            TaskKind::RewriteOracle => "rewrite_oracle",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRequest {
    pub task: TaskKind,
    pub model_name: String,
    pub prompt: String,
    /// Candidate labels; required for ClassifyMulti, forbidden otherwise.
    pub labels: Option<Vec<String>>,
    pub max_output_tokens: u64,
}

impl ModelRequest {
    pub fn new(task: TaskKind, model_name: &str, prompt: &str) -> ModelRequest {
        ModelRequest {
            task,
            model_name: model_name.to_string(),
            prompt: prompt.to_string(),
            labels: None,
            max_output_tokens: 256,
        }
    }

    pub fn with_labels(mut self, labels: Vec<String>) -> ModelRequest {
        self.labels = Some(labels);
        self
    }

    pub fn validate(&self) -> Result<(), ProviderError> {
        if self.prompt.is_empty() {
            return Err(ProviderError::fatal("empty prompt"));
        }
        let has_labels = self.labels.as_ref().is_some_and(|l| !l.is_empty());
        if (self.task == TaskKind::ClassifyMulti) != has_labels {
            return Err(ProviderError::fatal(
                "labels must be present exactly for ClassifyMulti requests",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ModelResponse {
    pub text: String,
    pub bool_value: Option<bool>,
    pub labels: Option<Vec<String>>,
    pub confidence: Option<f64>,
    pub prompt_tokens: u64,
    pub output_tokens: u64,
}

impl ModelResponse {
    pub fn boolean(value: bool, confidence: f64) -> ModelResponse {
        ModelResponse {
            text: format!("{value} {confidence}"),
            bool_value: Some(value),
            confidence: Some(confidence),
            ..Default::default()
        }
    }

    pub fn text(text: &str) -> ModelResponse {
        ModelResponse {
            text: text.to_string(),
            ..Default::default()
        }
    }

    pub fn classified(labels: Vec<String>) -> ModelResponse {
        ModelResponse {
            text: labels.join(", "),
            labels: Some(labels),
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProviderError {
    pub retryable: bool,
    pub message: String,
}

impl ProviderError {
    pub fn fatal(message: impl Into<String>) -> ProviderError {
        ProviderError {
            retryable: false,
            message: message.into(),
        }
    }

    pub fn transient(message: impl Into<String>) -> ProviderError {
        ProviderError {
            retryable: true,
            message: message.into(),
        }
    }
}

impl fmt::Display for ProviderError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "provider error ({}): {}",
            if self.retryable { "retryable" } else { "fatal" },
            self.message
        )
    }
}

impl std::error::Error for ProviderError {}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ModelStats {
    pub call_count: u64,
    pub total_prompt_tokens: u64,
    pub total_output_tokens: u64,
}

/// Per-model counters, all monotone.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ProviderStats {
    pub per_model: BTreeMap<String, ModelStats>,
    pub label_hallucinations: u64,
}

impl ProviderStats {
    pub fn total_calls(&self) -> u64 {
        self.per_model.values().map(|m| m.call_count).sum()
    }
}

pub trait Provider: Send + Sync {
    fn invoke(&self, req: &ModelRequest) -> Result<ModelResponse, ProviderError>;
    fn stats(&self) -> ProviderStats;
}

/// Shared bookkeeping every concrete provider funnels responses through:
/// usage accounting plus ClassifyMulti label normalization.
struct Instrument {
    stats: Mutex<ProviderStats>,
}

impl Instrument {
    fn new() -> Instrument {
        Instrument {
            stats: Mutex::new(ProviderStats::default()),
        }
    }

    fn finish(&self, req: &ModelRequest, mut resp: ModelResponse) -> ModelResponse {
        resp.prompt_tokens = estimate_tokens(&req.prompt)
            + req
                .labels
                .iter()
                .flatten()
                .map(|l| estimate_tokens(l))
                .sum::<u64>();
        resp.output_tokens = estimate_tokens(&resp.text);
        let mut dropped = 0u64;
        if let (Some(labels), Some(allowed)) = (&mut resp.labels, &req.labels) {
            let allowed: BTreeSet<&String> = allowed.iter().collect();
            let before = labels.len();
            labels.retain(|l| allowed.contains(l));
            dropped = (before - labels.len()) as u64;
        }
        let mut stats = self.stats.lock().unwrap();
        let m = stats.per_model.entry(req.model_name.clone()).or_default();
        m.call_count += 1;
        m.total_prompt_tokens += resp.prompt_tokens;
        m.total_output_tokens += resp.output_tokens;
        stats.label_hallucinations += dropped;
        resp
    }

    fn snapshot(&self) -> ProviderStats {
        self.stats.lock().unwrap().clone()
    }
}

/// Canonical request key: SHA-256 over task, model, prompt and sorted labels.
pub fn request_digest(req: &ModelRequest) -> String {
    let mut hasher = Sha256::new();
    hasher.update(req.task.name().as_bytes());
    hasher.update([0]);
    hasher.update(req.model_name.as_bytes());
    hasher.update([0]);
    hasher.update(req.prompt.as_bytes());
    if let Some(labels) = &req.labels {
        let mut sorted: Vec<&String> = labels.iter().collect();
        sorted.sort();
        for label in sorted {
            hasher.update([0]);
            hasher.update(label.as_bytes());
        }
    }
    let out = hasher.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FixtureEntry {
    task: TaskKind,
    model: String,
    digest: String,
    response: ModelResponse,
}

#[derive(Debug)]
pub struct FixtureParseError {
    pub line: usize,
    pub message: String,
}

impl fmt::Display for FixtureParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "fixture line {}: {}", self.line, self.message)
    }
}

impl std::error::Error for FixtureParseError {}

/// Answers by exact digest lookup against a recorded JSONL fixture. A pure
/// function of the request; missing entries are fatal errors.
pub struct ScriptedProvider {
    entries: BTreeMap<(TaskKind, String, String), ModelResponse>,
    instrument: Instrument,
    pub duplicate_keys: u64,
}

impl ScriptedProvider {
    pub fn from_path(path: &Path) -> Result<ScriptedProvider, FixtureParseError> {
        let file = std::fs::File::open(path).map_err(|e| FixtureParseError {
            line: 0,
            message: e.to_string(),
        })?;
        let reader = std::io::BufReader::new(file);
        let mut entries = BTreeMap::new();
        let mut duplicates = 0u64;
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| FixtureParseError {
                line: i + 1,
                message: e.to_string(),
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: FixtureEntry =
                serde_json::from_str(&line).map_err(|e| FixtureParseError {
                    line: i + 1,
                    message: e.to_string(),
                })?;
            // Duplicate key: last entry wins.
            if entries
                .insert((entry.task, entry.model, entry.digest), entry.response)
                .is_some()
            {
                duplicates += 1;
            }
        }
        if duplicates > 0 {
            eprintln!("warning: fixture has {duplicates} duplicate keys; last entries win");
        }
        Ok(ScriptedProvider {
            entries,
            instrument: Instrument::new(),
            duplicate_keys: duplicates,
        })
    }

    pub fn from_entries(
        entries: impl IntoIterator<Item = (ModelRequest, ModelResponse)>,
    ) -> ScriptedProvider {
        let mut map = BTreeMap::new();
        for (req, resp) in entries {
            map.insert(
                (req.task, req.model_name.clone(), request_digest(&req)),
                resp,
            );
        }
        ScriptedProvider {
            entries: map,
            instrument: Instrument::new(),
            duplicate_keys: 0,
        }
    }
}

impl Provider for ScriptedProvider {
    fn invoke(&self, req: &ModelRequest) -> Result<ModelResponse, ProviderError> {
        req.validate()?;
        let key = (req.task, req.model_name.clone(), request_digest(req));
        match self.entries.get(&key) {
            Some(resp) => Ok(self.instrument.finish(req, resp.clone())),
            None => Err(ProviderError::fatal(format!(
                "no fixture entry for {} request to '{}' (digest {})",
                req.task.name(),
                req.model_name,
                &key.2[..12],
            ))),
        }
    }

    fn stats(&self) -> ProviderStats {
        self.instrument.snapshot()
    }
}

/// How often the synthetic provider answers correctly and how sharply its
/// confidence concentrates. `calibration_noise` jitters confidence around
/// the calibrated value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AccuracyProfile {
    pub p_correct: f64,
    pub calibration_noise: f64,
}

impl AccuracyProfile {
    pub fn oracle() -> AccuracyProfile {
        AccuracyProfile {
            p_correct: 1.0,
            calibration_noise: 0.0,
        }
    }

    pub fn proxy(p_correct: f64) -> AccuracyProfile {
        AccuracyProfile {
            p_correct,
            calibration_noise: 0.1,
        }
    }
}

/// Seeded boolean model over an explicit ground-truth map (key = prompt).
///
/// An oracle profile always answers the truth with confidence 1. A proxy
/// answers correctly with probability drawn per prompt: easy rows get
/// confidence near 1, hard rows near 0.5, deterministically under the seed.
pub struct SyntheticBooleanProvider {
    ground_truth: BTreeMap<String, bool>,
    profile: AccuracyProfile,
    seed: u64,
    instrument: Instrument,
}

impl SyntheticBooleanProvider {
    pub fn new(
        ground_truth: BTreeMap<String, bool>,
        profile: AccuracyProfile,
        seed: u64,
    ) -> SyntheticBooleanProvider {
        SyntheticBooleanProvider {
            ground_truth,
            profile,
            seed,
            instrument: Instrument::new(),
        }
    }

    fn rng_for(&self, req: &ModelRequest) -> ChaCha8Rng {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(request_digest(req).as_bytes());
        let out = hasher.finalize();
        let mut key = [0u8; 32];
        key.copy_from_slice(&out);
        ChaCha8Rng::from_seed(key)
    }

    fn truth_for(&self, prompt: &str) -> bool {
        if let Some(v) = self.ground_truth.get(prompt) {
            return *v;
        }
        // Substring lookup lets callers wrap row text in larger prompts.
        self.ground_truth
            .iter()
            .find(|(k, _)| prompt.contains(k.as_str()))
            .map(|(_, v)| *v)
            .unwrap_or(false)
    }
}

impl Provider for SyntheticBooleanProvider {
    fn invoke(&self, req: &ModelRequest) -> Result<ModelResponse, ProviderError> {
        req.validate()?;
        if req.task != TaskKind::FilterBool {
            return Err(ProviderError::fatal(
                "synthetic boolean provider only answers FilterBool",
            ));
        }
        let truth = self.truth_for(&req.prompt);
        let mut rng = self.rng_for(req);
        // Per-row difficulty: calibrated confidence in [0.5, 1.0].
        let difficulty: f64 = rng.gen_range(0.0..1.0);
        let calibrated = 1.0 - 0.5 * difficulty;
        let p_correct_here = if self.profile.p_correct >= 1.0 {
            1.0
        } else {
            // Easy rows (low difficulty) are answered correctly more often.
            (self.profile.p_correct + (1.0 - difficulty) * (1.0 - self.profile.p_correct) * 0.5)
                .min(1.0)
        };
        let correct = rng.gen_range(0.0..1.0) < p_correct_here;
        let answer = if correct { truth } else { !truth };
        let noise = if self.profile.calibration_noise > 0.0 {
            rng.gen_range(-self.profile.calibration_noise..self.profile.calibration_noise)
        } else {
            0.0
        };
        let confidence = if self.profile.p_correct >= 1.0 {
            1.0
        } else {
            (calibrated + noise).clamp(0.5, 1.0)
        };
        Ok(self
            .instrument
            .finish(req, ModelResponse::boolean(answer, confidence)))
    }

    fn stats(&self) -> ProviderStats {
        self.instrument.snapshot()
    }
}

/// A stub whose FilterBool and ClassifyMulti answers agree: classify
/// returns exactly the labels its filter would accept. Truth is the set of
/// (row text, label) pairs given at construction; a FilterBool prompt is
/// true iff it contains both members of some pair.
pub struct ConsistentProvider {
    pairs: Vec<(String, String)>,
    instrument: Instrument,
}

impl ConsistentProvider {
    pub fn new(pairs: Vec<(String, String)>) -> ConsistentProvider {
        ConsistentProvider {
            pairs,
            instrument: Instrument::new(),
        }
    }

    fn filter_truth(&self, prompt: &str) -> bool {
        self.pairs
            .iter()
            .any(|(row, label)| prompt.contains(row.as_str()) && prompt.contains(label.as_str()))
    }

    fn labels_for(&self, prompt: &str, candidates: &[String]) -> Vec<String> {
        candidates
            .iter()
            .filter(|cand| {
                self.pairs
                    .iter()
                    .any(|(row, label)| label == *cand && prompt.contains(row.as_str()))
            })
            .cloned()
            .collect()
    }
}

impl Provider for ConsistentProvider {
    fn invoke(&self, req: &ModelRequest) -> Result<ModelResponse, ProviderError> {
        req.validate()?;
        let resp = match req.task {
            TaskKind::FilterBool => ModelResponse::boolean(self.filter_truth(&req.prompt), 1.0),
            TaskKind::ClassifyMulti => {
                let labels = self.labels_for(&req.prompt, req.labels.as_deref().unwrap());
                ModelResponse::classified(labels)
            }
            _ => {
                return Err(ProviderError::fatal(
                    "consistent provider only answers FilterBool/ClassifyMulti",
                ))
            }
        };
        Ok(self.instrument.finish(req, resp))
    }

    fn stats(&self) -> ProviderStats {
        self.instrument.snapshot()
    }
}

/// Wraps any provider and appends (digest -> response) fixture entries so a
/// real session can be replayed later by a [`ScriptedProvider`].
pub struct RecordingProvider<P> {
    inner: P,
    sink: Mutex<Vec<FixtureEntry>>,
}

impl<P: Provider> RecordingProvider<P> {
    pub fn new(inner: P) -> RecordingProvider<P> {
        RecordingProvider {
            inner,
            sink: Mutex::new(Vec::new()),
        }
    }

    pub fn write_fixture(&self, path: &Path) -> std::io::Result<()> {
        let mut file = std::fs::File::create(path)?;
        for entry in self.sink.lock().unwrap().iter() {
            writeln!(file, "{}", serde_json::to_string(entry).unwrap())?;
        }
        Ok(())
    }
}

impl<P: Provider> Provider for RecordingProvider<P> {
    fn invoke(&self, req: &ModelRequest) -> Result<ModelResponse, ProviderError> {
        let resp = self.inner.invoke(req)?;
        self.sink.lock().unwrap().push(FixtureEntry {
            task: req.task,
            model: req.model_name.clone(),
            digest: request_digest(req),
            response: resp.clone(),
        });
        Ok(resp)
    }

    fn stats(&self) -> ProviderStats {
        self.inner.stats()
    }
}

/// Retries retryable errors up to 3 times with exponential backoff
/// (base 100ms, jittered). Tests shrink the base to zero.
pub struct RetryProvider<P> {
    inner: P,
    base_delay: Duration,
    attempts_counter: AtomicU64,
}

impl<P: Provider> RetryProvider<P> {
    pub fn new(inner: P) -> RetryProvider<P> {
        RetryProvider::with_base_delay(inner, Duration::from_millis(100))
    }

    pub fn with_base_delay(inner: P, base_delay: Duration) -> RetryProvider<P> {
        RetryProvider {
            inner,
            base_delay,
            attempts_counter: AtomicU64::new(0),
        }
    }

    /// Total invoke attempts across all calls (for retry tests).
    pub fn attempts(&self) -> u64 {
        self.attempts_counter.load(Ordering::Relaxed)
    }
}

impl<P: Provider> Provider for RetryProvider<P> {
    fn invoke(&self, req: &ModelRequest) -> Result<ModelResponse, ProviderError> {
        let mut last = None;
        for attempt in 0..4u32 {
            self.attempts_counter.fetch_add(1, Ordering::Relaxed);
            match self.inner.invoke(req) {
                Ok(resp) => return Ok(resp),
                Err(e) if e.retryable && attempt < 3 => {
                    let backoff = self.base_delay * 2u32.pow(attempt);
                    if !backoff.is_zero() {
                        // Deterministic jitter keyed on the request.
                        let jitter_ms = (request_digest(req).as_bytes()[0] as u64) % 50;
                        std::thread::sleep(backoff + Duration::from_millis(jitter_ms));
                    }
                    last = Some(e);
                }
                Err(e) => return Err(e),
            }
        }
        Err(last.unwrap_or_else(|| ProviderError::fatal("retries exhausted")))
    }

    fn stats(&self) -> ProviderStats {
        self.inner.stats()
    }
}

/// Caps in-flight invoke calls (default 8) with a counting semaphore.
pub struct ConcurrencyLimited<P> {
    inner: P,
    permits: Mutex<usize>,
    cv: Condvar,
}

impl<P: Provider> ConcurrencyLimited<P> {
    pub fn new(inner: P) -> ConcurrencyLimited<P> {
        ConcurrencyLimited::with_cap(inner, 8)
    }

    pub fn with_cap(inner: P, cap: usize) -> ConcurrencyLimited<P> {
        ConcurrencyLimited {
            inner,
            permits: Mutex::new(cap.max(1)),
            cv: Condvar::new(),
        }
    }
}

impl<P: Provider> Provider for ConcurrencyLimited<P> {
    fn invoke(&self, req: &ModelRequest) -> Result<ModelResponse, ProviderError> {
        let mut permits = self.permits.lock().unwrap();
        while *permits == 0 {
            permits = self.cv.wait(permits).unwrap();
        }
        *permits -= 1;
        drop(permits);
        let result = self.inner.invoke(req);
        *self.permits.lock().unwrap() += 1;
        self.cv.notify_one();
        result
    }

    fn stats(&self) -> ProviderStats {
        self.inner.stats()
    }
}

impl<P: Provider + ?Sized> Provider for std::sync::Arc<P> {
    fn invoke(&self, req: &ModelRequest) -> Result<ModelResponse, ProviderError> {
        (**self).invoke(req)
    }

    fn stats(&self) -> ProviderStats {
        (**self).stats()
    }
}

/// Parses `true|false <float>` per the boolean prompt contract. Anything
/// else is a fatal error; guessing would corrupt cascade statistics.
pub fn parse_bool_confidence(text: &str) -> Result<(bool, f64), ProviderError> {
    let mut parts = text.split_whitespace();
    let value = match parts.next() {
        Some(t) if t.eq_ignore_ascii_case("true") => true,
        Some(t) if t.eq_ignore_ascii_case("false") => false,
        _ => {
            return Err(ProviderError::fatal(format!(
                "expected 'true|false <confidence>', got '{text}'"
            )))
        }
    };
    let confidence = match parts.next() {
        None => 1.0,
        Some(c) => c
            .parse::<f64>()
            .ok()
            .filter(|c| (0.0..=1.0).contains(c))
            .ok_or_else(|| {
                ProviderError::fatal(format!("unparseable confidence in '{text}'"))
            })?,
    };
    Ok((value, confidence))
}

/// Provider config file entry: {name, kind, params...}.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProviderConfig {
    pub name: String,
    pub kind: String,
    #[serde(default)]
    pub params: serde_json::Value,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProviderConfigFile {
    pub providers: Vec<ProviderConfig>,
}

pub fn load_provider_config(path: &Path) -> Result<ProviderConfigFile, String> {
    let text = std::fs::read_to_string(path).map_err(|e| e.to_string())?;
    serde_json::from_str(&text).map_err(|e| e.to_string())
}
