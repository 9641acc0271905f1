//! Compound-type detection by repeated LLM prompting, idiomatic meaning
//! generation, and query-text resolution.
//!
//! The LLM itself sits behind [`LlmTransport`]: an OpenAI-compatible HTTP client
//! for real runs, a scripted [`MockTransport`] for tests and offline replays,
//! and a [`CachedTransport`] wrapper that persists every raw response.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Mutex, OnceLock};
use std::thread;
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CompoundType, Sample};
use crate::seed;

/// Number of classification prompts per compound.
pub const DEFAULT_VOTES: usize = 5;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("HTTP {status} from {url}: {body}")]
    Http {
        status: u16,
        url: String,
        body: String,
    },
    #[error("request to {url} failed: {message}")]
    Network { url: String, message: String },
    #[error("malformed chat completion response: {0}")]
    Response(String),
    #[error("environment variable {0} holding the API key is not set")]
    MissingApiKey(String),
    #[error("no scripted response for {0:?}")]
    NoFixture(String),
    #[error("fixture {path}: {message}")]
    Fixture { path: PathBuf, message: String },
    #[error("response cache {path}: {message}")]
    Cache { path: PathBuf, message: String },
}

#[derive(Debug, Error)]
pub enum GateError {
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("compound {compound_id}: all {t} responses were unparseable")]
    Unparseable { compound_id: String, t: usize },
    #[error("vote count must be at least 1")]
    ZeroVotes,
    #[error("compound {0} was decided literal; meaning generation requires force")]
    NotIdiomatic(String),
    #[error("compound {compound_id}: {llm} returned an empty meaning")]
    EmptyMeaning { compound_id: String, llm: String },
    #[error("compound {0} is idiomatic but no meaning was supplied")]
    MissingMeaning(String),
    #[error("{votes} votes but {golds} gold labels")]
    LengthMismatch { votes: usize, golds: usize },
    #[error("compound {0} has no gold type")]
    MissingGold(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptKind {
    Classify,
    Meaning,
}

impl PromptKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PromptKind::Classify => "classify",
            PromptKind::Meaning => "meaning",
        }
    }
}

/// One chat-completion call.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChatRequest {
    pub kind: PromptKind,
    pub compound: String,
    pub prompt: String,
    pub temperature: f64,
    pub seed: u64,
    /// Index of this call among the repeated prompts for one compound.
    pub repeat: usize,
}

impl ChatRequest {
    /// Content hash identifying this exact request for caching.
    pub fn prompt_hash(&self) -> String {
        let key = format!(
            "{}\u{1f}{}\u{1f}{}\u{1f}{}\u{1f}{}",
            self.kind.as_str(),
            self.prompt,
            self.temperature,
            self.seed,
            self.repeat
        );
        seed::sha256_hex(key.as_bytes())
    }

    /// Key under which mock fixtures script responses.
    pub fn fixture_key(&self) -> String {
        format!("{}|{}", self.kind.as_str(), self.compound)
    }
}

pub trait LlmTransport: Send + Sync {
    /// Model name recorded with every generated artifact.
    fn name(&self) -> &str;

    fn complete(&self, request: &ChatRequest) -> Result<String, TransportError>;
}

impl<T: LlmTransport + ?Sized> LlmTransport for Box<T> {
    fn name(&self) -> &str {
        (**self).name()
    }

    fn complete(&self, request: &ChatRequest) -> Result<String, TransportError> {
        (**self).complete(request)
    }
}

/// Replays scripted responses keyed by `"<prompt_kind>|<compound>"`.
///
/// Each key's responses are consumed in order and cycle when exhausted.
pub struct MockTransport {
    name: String,
    script: HashMap<String, Vec<String>>,
    cursors: Mutex<HashMap<String, usize>>,
    calls: AtomicUsize,
}

impl MockTransport {
    pub fn new(name: impl Into<String>, script: HashMap<String, Vec<String>>) -> Self {
        Self {
            name: name.into(),
            script,
            cursors: Mutex::new(HashMap::new()),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn from_fixture(name: impl Into<String>, path: &Path) -> Result<Self, TransportError> {
        let fixture_err = |message: String| TransportError::Fixture {
            path: path.to_path_buf(),
            message,
        };
        let text = fs::read_to_string(path).map_err(|e| fixture_err(e.to_string()))?;
        let script: HashMap<String, Vec<String>> =
            serde_json::from_str(&text).map_err(|e| fixture_err(e.to_string()))?;
        if let Some((key, _)) = script.iter().find(|(_, v)| v.is_empty()) {
            return Err(fixture_err(format!("key {key:?} has no responses")));
        }
        Ok(Self::new(name, script))
    }

    /// Total number of `complete` calls served so far.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl LlmTransport for MockTransport {
    fn name(&self) -> &str {
        &self.name
    }

    fn complete(&self, request: &ChatRequest) -> Result<String, TransportError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let key = request.fixture_key();
        let responses = self
            .script
            .get(&key)
            .ok_or_else(|| TransportError::NoFixture(key.clone()))?;
        let mut cursors = self.cursors.lock().expect("mock cursor lock");
        let cursor = cursors.entry(key).or_insert(0);
        let response = responses[*cursor % responses.len()].clone();
        *cursor += 1;
        Ok(response)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HttpConfig {
    /// Base URL of the API, e.g. `https://api.openai.com/v1`.
    pub base_url: String,
    pub model: String,
    /// Environment variable holding the bearer token.
    #[serde(default = "default_key_env")]
    pub api_key_env: String,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "default_attempts")]
    pub max_attempts: u32,
    #[serde(default = "default_backoff")]
    pub backoff_ms: u64,
}

fn default_key_env() -> String {
    "OPENAI_API_KEY".into()
}

fn default_timeout() -> u64 {
    60
}

fn default_attempts() -> u32 {
    3
}

fn default_backoff() -> u64 {
    500
}

impl HttpConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model: model.into(),
            api_key_env: default_key_env(),
            timeout_secs: default_timeout(),
            max_attempts: default_attempts(),
            backoff_ms: default_backoff(),
        }
    }
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatCompletionBody<'a> {
    model: &'a str,
    messages: [ChatMessage<'a>; 1],
    temperature: f64,
    seed: u64,
}

#[derive(Deserialize)]
struct ChatCompletionResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ResponseMessage,
}

#[derive(Deserialize)]
struct ResponseMessage {
    #[serde(default)]
    content: Option<String>,
}

/// Blocking client for an OpenAI-compatible `/chat/completions` endpoint.
pub struct HttpChatTransport {
    name: String,
    config: HttpConfig,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

impl HttpChatTransport {
    /// Reads the API key from the configured environment variable. A missing
    /// key is an error unless the endpoint is local.
    pub fn new(name: impl Into<String>, config: HttpConfig) -> Result<Self, TransportError> {
        let api_key = std::env::var(&config.api_key_env).ok();
        let local =
            config.base_url.contains("://127.0.0.1") || config.base_url.contains("://localhost");
        if api_key.is_none() && !local {
            return Err(TransportError::MissingApiKey(config.api_key_env.clone()));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| TransportError::Network {
                url: config.base_url.clone(),
                message: e.to_string(),
            })?;
        Ok(Self {
            name: name.into(),
            config,
            api_key,
            client,
        })
    }

    fn endpoint(&self) -> String {
        format!(
            "{}/chat/completions",
            self.config.base_url.trim_end_matches('/')
        )
    }

    fn attempt(&self, request: &ChatRequest) -> Result<String, TransportError> {
        let url = self.endpoint();
        let body = ChatCompletionBody {
            model: &self.config.model,
            messages: [ChatMessage {
                role: "user",
                content: &request.prompt,
            }],
            temperature: request.temperature,
            seed: request.seed,
        };
        let mut builder = self.client.post(&url).json(&body);
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let response = builder.send().map_err(|e| TransportError::Network {
            url: url.clone(),
            message: e.to_string(),
        })?;
        let status = response.status();
        let text = response.text().map_err(|e| TransportError::Network {
            url: url.clone(),
            message: e.to_string(),
        })?;
        if !status.is_success() {
            return Err(TransportError::Http {
                status: status.as_u16(),
                url,
                body: text.chars().take(500).collect(),
            });
        }
        let parsed: ChatCompletionResponse =
            serde_json::from_str(&text).map_err(|e| TransportError::Response(e.to_string()))?;
        parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| TransportError::Response("no choices[0].message.content".into()))
    }
}

fn is_retryable(err: &TransportError) -> bool {
    match err {
        TransportError::Network { .. } => true,
        TransportError::Http { status, .. } => *status == 429 || *status >= 500,
        _ => false,
    }
}

impl LlmTransport for HttpChatTransport {
    fn name(&self) -> &str {
        &self.name
    }

    fn complete(&self, request: &ChatRequest) -> Result<String, TransportError> {
        let attempts = self.config.max_attempts.max(1);
        let mut attempt = 0;
        loop {
            attempt += 1;
            match self.attempt(request) {
                Ok(text) => return Ok(text),
                Err(e) if attempt < attempts && is_retryable(&e) => {
                    let wait = self.config.backoff_ms << (attempt - 1);
                    log::warn!(
                        "{}: attempt {attempt} failed ({e}); retrying in {wait} ms",
                        self.name
                    );
                    thread::sleep(Duration::from_millis(wait));
                }
                Err(e) => return Err(e),
            }
        }
    }
}

#[derive(Serialize, Deserialize)]
struct CacheLine {
    model: String,
    prompt_hash: String,
    response: String,
}

/// Persists raw responses in a JSONL file keyed by (model, prompt hash).
pub struct CachedTransport<T> {
    inner: T,
    path: PathBuf,
    entries: Mutex<HashMap<(String, String), String>>,
    file: Mutex<File>,
}

impl<T: LlmTransport> CachedTransport<T> {
    pub fn open(inner: T, path: &Path) -> Result<Self, TransportError> {
        let cache_err = |e: std::io::Error| TransportError::Cache {
            path: path.to_path_buf(),
            message: e.to_string(),
        };
        let mut entries = HashMap::new();
        if path.exists() {
            let reader = BufReader::new(File::open(path).map_err(cache_err)?);
            for (i, line) in reader.lines().enumerate() {
                let line = line.map_err(cache_err)?;
                if line.trim().is_empty() {
                    continue;
                }
                let entry: CacheLine =
                    serde_json::from_str(&line).map_err(|e| TransportError::Cache {
                        path: path.to_path_buf(),
                        message: format!("line {}: {e}", i + 1),
                    })?;
                entries.insert((entry.model, entry.prompt_hash), entry.response);
            }
        }
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(cache_err)?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(cache_err)?;
        Ok(Self {
            inner,
            path: path.to_path_buf(),
            entries: Mutex::new(entries),
            file: Mutex::new(file),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn inner(&self) -> &T {
        &self.inner
    }
}

impl<T: LlmTransport> LlmTransport for CachedTransport<T> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn complete(&self, request: &ChatRequest) -> Result<String, TransportError> {
        let key = (self.inner.name().to_string(), request.prompt_hash());
        if let Some(hit) = self.entries.lock().expect("cache lock").get(&key) {
            return Ok(hit.clone());
        }
        let response = self.inner.complete(request)?;
        let line = serde_json::to_string(&CacheLine {
            model: key.0.clone(),
            prompt_hash: key.1.clone(),
            response: response.clone(),
        })
        .expect("cache line serializes");
        {
            let mut file = self.file.lock().expect("cache file lock");
            writeln!(file, "{line}").map_err(|e| TransportError::Cache {
                path: self.path.clone(),
                message: e.to_string(),
            })?;
        }
        self.entries
            .lock()
            .expect("cache lock")
            .insert(key, response.clone());
        Ok(response)
    }
}

/// Prompt templates and sampling temperatures.
///
/// Templates substitute `{compound}` and `{sentence}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PromptConfig {
    pub classify_template: String,
    pub meaning_template: String,
    pub classify_temperature: f64,
    pub meaning_temperature: f64,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            classify_template: concat!(
                "Determine whether the nominal compound \"{compound}\" is used idiomatically ",
                "or literally in the following sentence.\n",
                "Sentence: {sentence}\n",
                "Answer with exactly one word: Idiomatic or Literal."
            )
            .into(),
            meaning_template: concat!(
                "The nominal compound \"{compound}\" is used idiomatically in the sentence: ",
                "{sentence}\n",
                "Give its idiomatic meaning as a short phrase, without any explanation."
            )
            .into(),
            classify_temperature: 1.0,
            meaning_temperature: 0.7,
        }
    }
}

impl PromptConfig {
    fn render(template: &str, sample: &Sample) -> String {
        template
            .replace("{compound}", &sample.compound)
            .replace("{sentence}", &sample.sentence)
    }

    pub fn classify_prompt(&self, sample: &Sample) -> String {
        Self::render(&self.classify_template, sample)
    }

    pub fn meaning_prompt(&self, sample: &Sample) -> String {
        Self::render(&self.meaning_template, sample)
    }
}

/// A single parsed classification response.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Vote {
    Idiomatic,
    Literal,
    Unparseable,
}

fn label_patterns() -> &'static (Regex, Regex) {
    static PATTERNS: OnceLock<(Regex, Regex)> = OnceLock::new();
    PATTERNS.get_or_init(|| {
        (
            Regex::new(r"(?i)\bidiomatic\b").expect("valid regex"),
            Regex::new(r"(?i)\bliteral\b").expect("valid regex"),
        )
    })
}

/// Case-insensitive label search; both or neither label is unparseable.
pub fn parse_label(response: &str) -> Vote {
    let (idiomatic, literal) = label_patterns();
    match (idiomatic.is_match(response), literal.is_match(response)) {
        (true, false) => Vote::Idiomatic,
        (false, true) => Vote::Literal,
        _ => Vote::Unparseable,
    }
}

/// Majority over parseable votes; ties go to idiomatic. `None` when no vote
/// parsed.
pub fn decide(votes: &[Vote]) -> Option<CompoundType> {
    let idiomatic = votes.iter().filter(|v| **v == Vote::Idiomatic).count();
    let literal = votes.iter().filter(|v| **v == Vote::Literal).count();
    if idiomatic + literal == 0 {
        None
    } else if idiomatic >= literal {
        Some(CompoundType::Idiomatic)
    } else {
        Some(CompoundType::Literal)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeVote {
    pub compound_id: String,
    pub votes: Vec<Vote>,
    pub decision: CompoundType,
    pub t: usize,
    /// Raw responses, in the order they were received.
    #[serde(default)]
    pub responses: Vec<String>,
}

/// Prompts `t` times and takes the majority label.
pub fn classify_compound(
    sample: &Sample,
    transport: &dyn LlmTransport,
    prompts: &PromptConfig,
    t: usize,
    seed: u64,
) -> Result<TypeVote, GateError> {
    if t == 0 {
        return Err(GateError::ZeroVotes);
    }
    let prompt = prompts.classify_prompt(sample);
    let mut votes = Vec::with_capacity(t);
    let mut responses = Vec::with_capacity(t);
    for repeat in 0..t {
        let request = ChatRequest {
            kind: PromptKind::Classify,
            compound: sample.compound.clone(),
            prompt: prompt.clone(),
            temperature: prompts.classify_temperature,
            seed: seed::derive_seed(seed, &format!("classify/{}/{repeat}", sample.sample_id)),
            repeat,
        };
        let response = transport.complete(&request)?;
        votes.push(parse_label(&response));
        responses.push(response);
    }
    let decision = decide(&votes).ok_or_else(|| GateError::Unparseable {
        compound_id: sample.sample_id.clone(),
        t,
    })?;
    Ok(TypeVote {
        compound_id: sample.sample_id.clone(),
        votes,
        decision,
        t,
        responses,
    })
}

/// Classifies many samples with at most `max_in_flight` compounds in flight.
/// Votes for one compound are issued sequentially; output follows input order.
pub fn classify_all(
    samples: &[Sample],
    transport: &dyn LlmTransport,
    prompts: &PromptConfig,
    t: usize,
    seed: u64,
    max_in_flight: usize,
) -> Vec<Result<TypeVote, GateError>> {
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(max_in_flight.max(1))
        .build()
        .expect("thread pool");
    pool.install(|| {
        samples
            .par_iter()
            .map(|s| classify_compound(s, transport, prompts, t, seed))
            .collect()
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeaningRecord {
    pub compound_id: String,
    pub llm_name: String,
    pub meaning_text: String,
    pub prompt_hash: String,
}

/// Asks the transport for the idiomatic meaning of the sample's compound.
pub fn generate_meaning(
    sample: &Sample,
    decision: CompoundType,
    forced: bool,
    transport: &dyn LlmTransport,
    prompts: &PromptConfig,
) -> Result<MeaningRecord, GateError> {
    if decision != CompoundType::Idiomatic && !forced {
        return Err(GateError::NotIdiomatic(sample.sample_id.clone()));
    }
    let request = ChatRequest {
        kind: PromptKind::Meaning,
        compound: sample.compound.clone(),
        prompt: prompts.meaning_prompt(sample),
        temperature: prompts.meaning_temperature,
        seed: 0,
        repeat: 0,
    };
    let response = transport.complete(&request)?;
    let meaning = clean_meaning(&response);
    if meaning.is_empty() {
        return Err(GateError::EmptyMeaning {
            compound_id: sample.sample_id.clone(),
            llm: transport.name().to_string(),
        });
    }
    Ok(MeaningRecord {
        compound_id: sample.sample_id.clone(),
        llm_name: transport.name().to_string(),
        meaning_text: meaning,
        prompt_hash: request.prompt_hash(),
    })
}

fn clean_meaning(response: &str) -> String {
    let trimmed = response.trim();
    let unquoted = trimmed
        .strip_prefix('"')
        .and_then(|s| s.strip_suffix('"'))
        .unwrap_or(trimmed);
    unquoted.trim().to_string()
}

/// Text whose embedding stands in for the compound: the compound itself when
/// literal, the generated meaning when idiomatic.
pub fn resolve_query_text(
    sample: &Sample,
    decision: CompoundType,
    meaning: Option<&MeaningRecord>,
) -> Result<String, GateError> {
    match decision {
        CompoundType::Literal => Ok(sample.compound.clone()),
        CompoundType::Idiomatic => meaning
            .map(|m| m.meaning_text.clone())
            .ok_or_else(|| GateError::MissingMeaning(sample.sample_id.clone())),
    }
}

/// Fraction of decisions matching the gold types.
pub fn type_detection_accuracy(
    votes: &[TypeVote],
    golds: &[Option<CompoundType>],
) -> Result<f64, GateError> {
    if votes.len() != golds.len() {
        return Err(GateError::LengthMismatch {
            votes: votes.len(),
            golds: golds.len(),
        });
    }
    if votes.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for (vote, gold) in votes.iter().zip(golds) {
        let gold = gold.ok_or_else(|| GateError::MissingGold(vote.compound_id.clone()))?;
        if vote.decision == gold {
            correct += 1;
        }
    }
    Ok(correct as f64 / votes.len() as f64)
}

/// One line of the query file handed to the embedding sidecar: which text to
/// encode as the query for (sample, llm).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub sample_id: String,
    pub llm_name: String,
    pub decision: CompoundType,
    pub query_text: String,
    #[serde(default)]
    pub meaning: Option<String>,
    #[serde(default)]
    pub prompt_hash: Option<String>,
}
