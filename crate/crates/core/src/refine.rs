//! Language-model refinement of retrieved candidate sentences.
//!
//! A request carries only retrieved texts, never the ground truth. Clients
//! are pluggable: an offline fallback (top-1 candidate), an HTTP completion
//! endpoint, a local subprocess, and a replayer for recorded transcripts.

use std::collections::{HashMap, VecDeque};
use std::io::{BufRead, Read, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

pub const DEFAULT_LLM_MODEL: &str = "meta-llama/Meta-Llama-3-8B";
pub const ENDPOINT_ENV: &str = "EEGRAG_LLM_ENDPOINT";
pub const DEFAULT_K: usize = 3;

pub const INSTRUCTION: &str = "You are given three similar sentences. Your task is to generate one single, fluent, \
grammatically correct sentence that captures the same meaning, without adding or removing information. Only output \
the corrected sentence.";

/// Default template; `{sentences}` expands to the numbered candidates.
pub fn default_prompt_template() -> String {
    format!("{INSTRUCTION}\n\n{{sentences}}\n")
}

#[derive(Debug, thiserror::Error)]
pub enum RefineError {
    #[error("refine request has no retrieved sentences")]
    EmptyInput,
    #[error("retrieved sentence {0} is empty")]
    EmptySentence(usize),
    #[error("client {client} timed out after {timeout_ms} ms")]
    Timeout { client: String, timeout_ms: u64 },
    #[error("client {client} unavailable: {message}")]
    Unavailable { client: String, message: String },
    #[error("malformed output after {attempts} attempts: {last:?}")]
    Malformed { attempts: usize, last: String },
    #[error("no recorded response for prompt in transcript {0}")]
    ReplayMiss(String),
    #[error("invalid client config: {0}")]
    Config(String),
    #[error("transcript {path}: {message}")]
    Transcript { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineRequest {
    retrieved: Vec<String>,
    prompt_template: String,
}

impl RefineRequest {
    pub fn new(retrieved: Vec<String>, prompt_template: impl Into<String>) -> Result<Self, RefineError> {
        if retrieved.is_empty() {
            return Err(RefineError::EmptyInput);
        }
        if let Some(i) = retrieved.iter().position(|s| s.trim().is_empty()) {
            return Err(RefineError::EmptySentence(i));
        }
        Ok(Self { retrieved, prompt_template: prompt_template.into() })
    }

    pub fn with_default_prompt(retrieved: Vec<String>) -> Result<Self, RefineError> {
        Self::new(retrieved, default_prompt_template())
    }

    pub fn retrieved(&self) -> &[String] {
        &self.retrieved
    }

    pub fn prompt(&self) -> String {
        let numbered: Vec<String> =
            self.retrieved.iter().enumerate().map(|(i, s)| format!("{}. {}", i + 1, s.trim())).collect();
        self.prompt_template.replace("{sentences}", &numbered.join("\n"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineResult {
    pub output_sentence: String,
    pub client_name: String,
    pub latency_ms: f64,
}

pub trait RefineClient {
    fn name(&self) -> &str;
    /// Raw completion for `prompt`.
    fn generate(&self, prompt: &str, request: &RefineRequest) -> Result<String, RefineError>;
    /// Whether raw output needs label/echo stripping.
    fn post_process(&self) -> bool {
        true
    }
}

/// Returns the top-1 retrieved sentence.
#[derive(Debug, Clone, Default)]
pub struct OfflineRefiner;

impl RefineClient for OfflineRefiner {
    fn name(&self) -> &str {
        "offline-top1"
    }

    fn generate(&self, _prompt: &str, request: &RefineRequest) -> Result<String, RefineError> {
        Ok(request.retrieved[0].trim().to_string())
    }

    fn post_process(&self) -> bool {
        false
    }
}

const LABELS: &[&str] = &["corrected sentence", "output sentence", "sentence", "output", "answer", "response"];
const QUOTES: &[char] = &['"', '\'', '`', '\u{201c}', '\u{201d}', '\u{2018}', '\u{2019}'];

fn strip_label(s: &str) -> &str {
    let lower = s.to_lowercase();
    for label in LABELS {
        if lower.starts_with(label) {
            let rest = s[label.len()..].trim_start();
            if let Some(r) = rest.strip_prefix(':').or_else(|| rest.strip_prefix('-')) {
                return r.trim_start();
            }
        }
    }
    s
}

fn first_sentence(s: &str) -> &str {
    for (i, c) in s.char_indices() {
        if !matches!(c, '.' | '!' | '?') {
            continue;
        }
        let mut end = i + 1;
        if let Some(q) = s[end..].chars().next().filter(|q| QUOTES.contains(q)) {
            end += q.len_utf8();
        }
        let mut rest = s[end..].chars();
        if rest.next() == Some(' ') && rest.next().is_some_and(|c| c.is_uppercase()) {
            return &s[..end];
        }
    }
    s
}

/// Cleans one raw completion; `None` if nothing usable remains.
pub fn post_process(raw: &str, prompt: &str) -> Option<String> {
    let mut text = raw.trim();
    if let Some(rest) = text.strip_prefix(prompt.trim()) {
        text = rest;
    }
    let marker = "Only output the corrected sentence.";
    if let Some(pos) = text.rfind(marker) {
        text = &text[pos + marker.len()..];
    }
    let line = text.lines().map(str::trim).find(|l| !l.is_empty())?;
    let line = strip_label(line).trim_matches(|c: char| QUOTES.contains(&c) || c.is_whitespace());
    let line = first_sentence(line).trim_matches(|c: char| QUOTES.contains(&c) || c.is_whitespace());
    if line.is_empty() || line.contains(INSTRUCTION) {
        return None;
    }
    Some(line.to_string())
}

/// Runs one request; malformed outputs are retried up to `retries` times.
pub fn refine(client: &dyn RefineClient, request: &RefineRequest, retries: usize) -> Result<RefineResult, RefineError> {
    let prompt = request.prompt();
    let start = Instant::now();
    let mut last = String::new();
    for _ in 0..=retries {
        let raw = client.generate(&prompt, request)?;
        let cleaned = if client.post_process() {
            post_process(&raw, &prompt)
        } else {
            Some(raw.trim().to_string()).filter(|s| !s.is_empty())
        };
        if let Some(output_sentence) = cleaned {
            return Ok(RefineResult {
                output_sentence,
                client_name: client.name().to_string(),
                latency_ms: start.elapsed().as_secs_f64() * 1000.0,
            });
        }
        last = raw;
    }
    Err(RefineError::Malformed { attempts: retries + 1, last })
}

/// `POST {endpoint}` with `{model, prompt, temperature, max_tokens}`. Accepts
/// `{"text"}`, `[{"generated_text"}]` or `{"choices": [{"text"}]}` replies.
pub struct HttpClient {
    model: String,
    endpoint: String,
    temperature: f64,
    max_tokens: u32,
    timeout_ms: u64,
    agent: ureq::Agent,
}

impl HttpClient {
    pub fn connect(
        model: &str,
        endpoint: &str,
        temperature: f64,
        max_tokens: u32,
        timeout_ms: u64,
    ) -> Result<Self, RefineError> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        agent
            .get(endpoint)
            .call()
            .map_err(|e| RefineError::Unavailable { client: model.into(), message: format!("{endpoint}: {e}") })?;
        Ok(Self { model: model.into(), endpoint: endpoint.into(), temperature, max_tokens, timeout_ms, agent })
    }

    fn extract(value: &serde_json::Value) -> Option<String> {
        let s = value
            .get("text")
            .or_else(|| value.get(0).and_then(|v| v.get("generated_text")))
            .or_else(|| value.get("choices").and_then(|c| c.get(0)).and_then(|c| c.get("text")))?;
        s.as_str().map(str::to_string)
    }
}

impl RefineClient for HttpClient {
    fn name(&self) -> &str {
        &self.model
    }

    fn generate(&self, prompt: &str, _request: &RefineRequest) -> Result<String, RefineError> {
        let body = serde_json::json!({
            "model": self.model,
            "prompt": prompt,
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
        });
        let unavailable = |message: String| RefineError::Unavailable { client: self.model.clone(), message };
        let mut resp = self.agent.post(&self.endpoint).send_json(&body).map_err(|e| match e {
            ureq::Error::Timeout(_) => RefineError::Timeout { client: self.model.clone(), timeout_ms: self.timeout_ms },
            e => unavailable(e.to_string()),
        })?;
        if !resp.status().is_success() {
            return Err(unavailable(format!("HTTP {}", resp.status())));
        }
        let value: serde_json::Value = resp.body_mut().read_json().map_err(|e| unavailable(e.to_string()))?;
        // An unrecognized body counts as malformed output, which is retried.
        Ok(Self::extract(&value).unwrap_or_default())
    }
}

/// Runs `command` per request with the prompt on stdin; stdout is the completion.
pub struct SubprocessClient {
    name: String,
    program: PathBuf,
    args: Vec<String>,
    timeout_ms: u64,
}

fn find_program(program: &str) -> Option<PathBuf> {
    let p = Path::new(program);
    if p.components().count() > 1 {
        return p.is_file().then(|| p.to_path_buf());
    }
    std::env::var_os("PATH")
        .into_iter()
        .flat_map(|paths| std::env::split_paths(&paths).collect::<Vec<_>>())
        .map(|dir| dir.join(program))
        .find(|c| c.is_file())
}

impl SubprocessClient {
    pub fn new(name: &str, command: &[String], timeout_ms: u64) -> Result<Self, RefineError> {
        let (program, args) = command.split_first().ok_or_else(|| RefineError::Config("empty command".into()))?;
        let resolved = find_program(program).ok_or_else(|| RefineError::Unavailable {
            client: name.into(),
            message: format!("{program} not found"),
        })?;
        Ok(Self { name: name.into(), program: resolved, args: args.to_vec(), timeout_ms })
    }
}

impl RefineClient for SubprocessClient {
    fn name(&self) -> &str {
        &self.name
    }

    fn generate(&self, prompt: &str, _request: &RefineRequest) -> Result<String, RefineError> {
        let unavailable = |message: String| RefineError::Unavailable { client: self.name.clone(), message };
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| unavailable(e.to_string()))?;
        child
            .stdin
            .take()
            .expect("stdin piped")
            .write_all(prompt.as_bytes())
            .map_err(|e| unavailable(e.to_string()))?;
        let mut stdout = child.stdout.take().expect("stdout piped");
        let reader = std::thread::spawn(move || {
            let mut s = String::new();
            stdout.read_to_string(&mut s).map(|_| s)
        });
        let deadline = Instant::now() + Duration::from_millis(self.timeout_ms);
        loop {
            match child.try_wait().map_err(|e| unavailable(e.to_string()))? {
                Some(status) if status.success() => break,
                Some(status) => return Err(unavailable(format!("exited with {status}"))),
                None if Instant::now() >= deadline => {
                    let _ = child.kill();
                    let _ = child.wait();
                    return Err(RefineError::Timeout { client: self.name.clone(), timeout_ms: self.timeout_ms });
                }
                None => std::thread::sleep(Duration::from_millis(5)),
            }
        }
        reader.join().expect("reader thread").map_err(|e| unavailable(e.to_string()))
    }
}

/// One recorded interaction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub client: String,
    pub prompt: String,
    pub response: String,
}

pub fn read_transcript(path: &Path) -> Result<Vec<TranscriptEntry>, RefineError> {
    let err = |message: String| RefineError::Transcript { path: path.display().to_string(), message };
    let f = std::fs::File::open(path).map_err(|e| err(e.to_string()))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| err(e.to_string()))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line).map_err(|e| err(format!("line {}: {e}", i + 1)))?);
        }
    }
    Ok(out)
}

/// Serves recorded responses, matched by prompt and consumed in order.
pub struct ReplayClient {
    name: String,
    source: String,
    responses: Mutex<HashMap<String, VecDeque<String>>>,
}

impl ReplayClient {
    pub fn from_entries(name: &str, source: &str, entries: Vec<TranscriptEntry>) -> Self {
        let mut responses: HashMap<String, VecDeque<String>> = HashMap::new();
        for e in entries {
            responses.entry(e.prompt).or_default().push_back(e.response);
        }
        Self { name: name.into(), source: source.into(), responses: Mutex::new(responses) }
    }

    pub fn open(path: &Path) -> Result<Self, RefineError> {
        let entries = read_transcript(path)?;
        let name = entries.first().map_or_else(|| "replay".to_string(), |e| format!("replay:{}", e.client));
        Ok(Self::from_entries(&name, &path.display().to_string(), entries))
    }
}

impl RefineClient for ReplayClient {
    fn name(&self) -> &str {
        &self.name
    }

    fn generate(&self, prompt: &str, _request: &RefineRequest) -> Result<String, RefineError> {
        let mut map = self.responses.lock().expect("replay lock");
        map.get_mut(prompt).and_then(VecDeque::pop_front).ok_or_else(|| RefineError::ReplayMiss(self.source.clone()))
    }
}

/// Appends every interaction of `inner` to a JSONL transcript (created if missing).
pub struct RecordingClient<C> {
    inner: C,
    path: PathBuf,
    out: Mutex<std::io::BufWriter<std::fs::File>>,
}

impl<C: RefineClient> RecordingClient<C> {
    pub fn create(inner: C, path: &Path) -> Result<Self, RefineError> {
        let f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| RefineError::Transcript { path: path.display().to_string(), message: e.to_string() })?;
        Ok(Self { inner, path: path.to_path_buf(), out: Mutex::new(std::io::BufWriter::new(f)) })
    }
}

impl<C: RefineClient> RefineClient for RecordingClient<C> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn generate(&self, prompt: &str, request: &RefineRequest) -> Result<String, RefineError> {
        let response = self.inner.generate(prompt, request)?;
        let entry = TranscriptEntry { client: self.inner.name().into(), prompt: prompt.into(), response: response.clone() };
        let mut out = self.out.lock().expect("transcript lock");
        writeln!(out, "{}", serde_json::to_string(&entry).expect("entry serializes"))
            .and_then(|_| out.flush())
            .map_err(|e| RefineError::Transcript { path: self.path.display().to_string(), message: e.to_string() })?;
        Ok(response)
    }

    fn post_process(&self) -> bool {
        self.inner.post_process()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClientKind {
    Offline,
    ExternalHttp,
    Subprocess,
    Replay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClientConfig {
    pub kind: ClientKind,
    #[serde(default = "default_model")]
    pub model: String,
    /// Falls back to `EEGRAG_LLM_ENDPOINT`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub command: Option<Vec<String>>,
    /// Transcript to replay from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transcript: Option<PathBuf>,
    /// Transcript to record external interactions to.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub record: Option<PathBuf>,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_retries")]
    pub retries: usize,
    #[serde(default = "default_prompt_template")]
    pub prompt_template: String,
}

fn default_model() -> String {
    DEFAULT_LLM_MODEL.into()
}
fn default_max_tokens() -> u32 {
    64
}
fn default_timeout_ms() -> u64 {
    60_000
}
fn default_retries() -> usize {
    2
}

impl ClientConfig {
    pub fn offline() -> Self {
        Self {
            kind: ClientKind::Offline,
            model: default_model(),
            endpoint: None,
            command: None,
            transcript: None,
            record: None,
            temperature: 0.0,
            max_tokens: default_max_tokens(),
            timeout_ms: default_timeout_ms(),
            retries: default_retries(),
            prompt_template: default_prompt_template(),
        }
    }
}

impl Default for ClientConfig {
    fn default() -> Self {
        Self::offline()
    }
}

fn maybe_record<C: RefineClient + 'static>(
    client: C,
    record: &Option<PathBuf>,
) -> Result<Box<dyn RefineClient>, RefineError> {
    Ok(match record {
        Some(path) => Box::new(RecordingClient::create(client, path)?),
        None => Box::new(client),
    })
}

pub fn make_client(config: &ClientConfig) -> Result<Box<dyn RefineClient>, RefineError> {
    if !config.prompt_template.contains("{sentences}") {
        return Err(RefineError::Config("prompt_template lacks {sentences}".into()));
    }
    match config.kind {
        ClientKind::Offline => Ok(Box::new(OfflineRefiner)),
        ClientKind::ExternalHttp => {
            let endpoint = config
                .endpoint
                .clone()
                .or_else(|| std::env::var(ENDPOINT_ENV).ok())
                .ok_or_else(|| RefineError::Config(format!("external_http needs endpoint or {ENDPOINT_ENV}")))?;
            let c = HttpClient::connect(&config.model, &endpoint, config.temperature, config.max_tokens, config.timeout_ms)?;
            maybe_record(c, &config.record)
        }
        ClientKind::Subprocess => {
            let command = config.command.as_deref().ok_or_else(|| RefineError::Config("subprocess needs command".into()))?;
            maybe_record(SubprocessClient::new(&config.model, command, config.timeout_ms)?, &config.record)
        }
        ClientKind::Replay => {
            let path = config.transcript.as_ref().ok_or_else(|| RefineError::Config("replay needs transcript".into()))?;
            Ok(Box::new(ReplayClient::open(path)?))
        }
    }
}
