//! Label-set generation through a text-completion backend.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hierarchy::{postprocess_label_set, HierarchyError, LabelMap};

/// Environment variable holding the HTTP backend credential.
pub const API_KEY_ENV: &str = "CHILS_LLM_API_KEY";
pub const DEFAULT_TEMPERATURE: f64 = 0.7;
pub const DEFAULT_SET_SIZE: usize = 10;

#[derive(Debug, Error)]
pub enum LabelGenError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed fixture file {path}: {reason}")]
    Fixture { path: PathBuf, reason: String },
    #[error("fixture has no response for query {0:?}")]
    FixtureMiss(String),
    #[error("request failed: {0}")]
    Request(String),
    #[error("unexpected response body: {0}")]
    Response(String),
    #[error("backend failed for class {class:?} after {attempts} attempt(s): {source}")]
    Exhausted {
        class: String,
        attempts: usize,
        #[source]
        source: Box<LabelGenError>,
    },
    #[error("set size m must be at least 1")]
    ZeroSetSize,
    #[error(transparent)]
    Hierarchy(#[from] HierarchyError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelGenRequest {
    pub class_name: String,
    pub m: usize,
    pub context: Option<String>,
    pub temperature: f64,
}

/// The completion prompt asking for `m` kinds of a class.
pub fn build_query(request: &LabelGenRequest) -> String {
    match &request.context {
        Some(ctx) => format!(
            "Generate a list of {} types of the following {}: {}",
            request.m, ctx, request.class_name
        ),
        None => format!(
            "Generate a list of {} types of the following: {}",
            request.m, request.class_name
        ),
    }
}

/// Splits a completion into labels: one per non-empty line, with list
/// markers, surrounding whitespace and trailing punctuation removed, in
/// lowercase.
pub fn parse_label_list(response_text: &str) -> Vec<String> {
    response_text
        .lines()
        .filter_map(|line| {
            let label = strip_marker(line.trim())
                .trim()
                .trim_end_matches(|c: char| c.is_ascii_punctuation())
                .trim();
            (!label.is_empty()).then(|| label.to_lowercase())
        })
        .collect()
}

fn strip_marker(line: &str) -> &str {
    if let Some(rest) = line.strip_prefix('-') {
        return rest;
    }
    let digits = line.len() - line.trim_start_matches(|c: char| c.is_ascii_digit()).len();
    if digits > 0 {
        let rest = &line[digits..];
        if let Some(r) = rest.strip_prefix('.').or_else(|| rest.strip_prefix(')')) {
            return r;
        }
    }
    line
}

/// Something that turns a query into completion text.
pub trait GenerationBackend {
    fn complete(&self, query: &str, temperature: f64) -> Result<String, LabelGenError>;

    /// Attempts made per query before giving up.
    fn attempts(&self) -> usize {
        1
    }
}

/// Canned responses keyed by exact query text.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FixtureBackend {
    responses: BTreeMap<String, String>,
}

impl FixtureBackend {
    pub fn new(responses: BTreeMap<String, String>) -> Self {
        Self { responses }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, LabelGenError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| LabelGenError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| LabelGenError::Fixture {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

impl GenerationBackend for FixtureBackend {
    fn complete(&self, query: &str, _temperature: f64) -> Result<String, LabelGenError> {
        self.responses
            .get(query)
            .cloned()
            .ok_or_else(|| LabelGenError::FixtureMiss(query.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub attempts: usize,
    pub initial_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            initial_backoff: Duration::from_secs(1),
        }
    }
}

impl RetryPolicy {
    /// Calls `f` up to `attempts` times, doubling the pause after each failure.
    pub fn run<T>(&self, mut f: impl FnMut() -> Result<T, LabelGenError>) -> Result<T, LabelGenError> {
        let mut delay = self.initial_backoff;
        let attempts = self.attempts.max(1);
        let mut last = None;
        for attempt in 0..attempts {
            match f() {
                Ok(v) => return Ok(v),
                Err(e) => last = Some(e),
            }
            if attempt + 1 < attempts {
                thread::sleep(delay);
                delay *= 2;
            }
        }
        Err(last.expect("at least one attempt"))
    }
}

#[derive(Debug, Serialize)]
struct CompletionRequest<'a> {
    model: &'a str,
    prompt: &'a str,
    temperature: f64,
    max_tokens: u32,
}

/// Completion-style HTTP endpoint.
#[derive(Debug, Clone)]
pub struct HttpBackend {
    pub endpoint: String,
    pub model: String,
    pub api_key: Option<String>,
    pub max_tokens: u32,
    pub retry: RetryPolicy,
    pub timeout: Duration,
}

impl HttpBackend {
    /// Backend with the credential taken from [`API_KEY_ENV`].
    pub fn from_env(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key: std::env::var(API_KEY_ENV).ok(),
            max_tokens: 256,
            retry: RetryPolicy::default(),
            timeout: Duration::from_secs(60),
        }
    }

    fn send(&self, client: &reqwest::blocking::Client, query: &str, temperature: f64) -> Result<String, LabelGenError> {
        let body = CompletionRequest {
            model: &self.model,
            prompt: query,
            temperature,
            max_tokens: self.max_tokens,
        };
        let mut req = client.post(&self.endpoint).json(&body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| LabelGenError::Request(e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            return Err(LabelGenError::Request(format!("HTTP {status}")));
        }
        let value: serde_json::Value = resp.json().map_err(|e| LabelGenError::Response(e.to_string()))?;
        completion_text(&value).ok_or_else(|| LabelGenError::Response(value.to_string()))
    }
}

/// Extracts `choices[0].text` (or a chat-style `choices[0].message.content`).
fn completion_text(value: &serde_json::Value) -> Option<String> {
    let choice = value.get("choices")?.get(0)?;
    choice
        .get("text")
        .or_else(|| choice.get("message")?.get("content"))?
        .as_str()
        .map(str::to_string)
}

impl GenerationBackend for HttpBackend {
    fn complete(&self, query: &str, temperature: f64) -> Result<String, LabelGenError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(self.timeout)
            .build()
            .map_err(|e| LabelGenError::Request(e.to_string()))?;
        self.retry.run(|| self.send(&client, query, temperature))
    }

    fn attempts(&self) -> usize {
        self.retry.attempts.max(1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelGenOptions {
    pub m: usize,
    pub context: Option<String>,
    pub temperature: f64,
    pub append_superclass: bool,
    pub include_superclass: bool,
}

impl Default for LabelGenOptions {
    fn default() -> Self {
        Self {
            m: DEFAULT_SET_SIZE,
            context: None,
            temperature: DEFAULT_TEMPERATURE,
            append_superclass: true,
            include_superclass: true,
        }
    }
}

/// What happened for one class, kept for auditing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub class: String,
    pub query: String,
    pub raw_response: String,
    pub parsed: Vec<String>,
    pub label_set: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct GeneratedLabelMap {
    pub map: LabelMap,
    pub audit: Vec<AuditEntry>,
}

/// Queries the backend once per class, in order, and assembles a label map.
pub fn generate_label_map<S: AsRef<str>>(
    classes: &[S],
    backend: &dyn GenerationBackend,
    options: &LabelGenOptions,
) -> Result<GeneratedLabelMap, LabelGenError> {
    if options.m == 0 {
        return Err(LabelGenError::ZeroSetSize);
    }
    let mut audit = Vec::with_capacity(classes.len());
    for class in classes {
        let class = class.as_ref();
        let query = build_query(&LabelGenRequest {
            class_name: class.to_string(),
            m: options.m,
            context: options.context.clone(),
            temperature: options.temperature,
        });
        let raw_response = backend
            .complete(&query, options.temperature)
            .map_err(|e| LabelGenError::Exhausted {
                class: class.to_string(),
                attempts: backend.attempts(),
                source: Box::new(e),
            })?;
        let parsed = parse_label_list(&raw_response);
        let label_set = postprocess_label_set(
            class,
            &parsed,
            options.append_superclass,
            options.include_superclass,
        )?;
        audit.push(AuditEntry {
            class: class.to_string(),
            query,
            raw_response,
            parsed,
            label_set,
        });
    }
    let map = LabelMap::new(audit.iter().map(|a| (a.class.clone(), a.label_set.clone())))?;
    Ok(GeneratedLabelMap { map, audit })
}
