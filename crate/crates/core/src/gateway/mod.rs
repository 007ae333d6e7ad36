//! Run execution: every rendered prompt goes to every rater exactly once.
//!
//! Layout of a run directory written here:
//!
//! ```text
//! manifest.json                    RunManifest, no timestamps
//! requests.log.jsonl               one line per outbound attempt
//! responses/<rater-slug>/<sid>.json  RawResponse, text stored byte-exact
//! ```
//!
//! A stored response is reused when its template hash and params hash match
//! the current run, so a warm rerun sends nothing. Each request is a single
//! user turn carrying only the rendered prompt.

pub mod providers;

use std::collections::{BTreeMap, HashSet, VecDeque};
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{render_prompt, PromptTemplate, Scenario};
use crate::sha256_hex;

pub use providers::{DefaultProviders, Provider, ProviderError, ProviderFactory, Reply, Request};

pub const DEFAULT_TEMPERATURE: f64 = 0.2;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("no raters configured")]
    NoRaters,
    #[error("invalid rater configuration: {0}")]
    InvalidRater(String),
    #[error("run directory {0} has no manifest; execute a run first")]
    NoManifest(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, GatewayError>;

fn io_err(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> GatewayError {
    let context = context.into();
    move |source| GatewayError::Io { context, source }
}

fn json_err(context: impl Into<String>) -> impl FnOnce(serde_json::Error) -> GatewayError {
    let context = context.into();
    move |source| GatewayError::Json { context, source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RaterKind {
    /// Provider HTTP API.
    Remote,
    /// Local model runner command.
    Local,
    /// Filled through the audit log, never by the gateway.
    Human,
    /// Scripted replies from a JSON-lines file, for offline runs and tests.
    Mock,
}

fn default_temperature() -> f64 {
    DEFAULT_TEMPERATURE
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RaterSpec {
    pub name: String,
    pub kind: RaterKind,
    /// Adapter for remote raters, e.g. `openai`, `anthropic`, `gemini`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provider: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    /// Base URL (remote), executable (local) or replies file (mock).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra_params: BTreeMap<String, String>,
}

impl RaterSpec {
    /// Digest of the template hash and every request-shaping field.
    pub fn params_hash(&self, template_hash: &str) -> String {
        let v = serde_json::json!({
            "template_hash": template_hash,
            "kind": self.kind,
            "provider": self.provider,
            "model": self.model,
            "endpoint": self.endpoint,
            "temperature": self.temperature,
            "extra_params": self.extra_params,
        });
        sha256_hex(v.to_string())
    }

    /// Directory name for this rater's responses.
    pub fn slug(&self) -> String {
        rater_slug(&self.name)
    }
}

pub fn rater_slug(name: &str) -> String {
    let mut s: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '-' })
        .collect();
    while s.contains("--") {
        s = s.replace("--", "-");
    }
    let s = s.trim_matches('-');
    format!("{}-{}", s, &sha256_hex(name)[..8])
}

pub fn validate_raters(raters: &[RaterSpec]) -> Result<()> {
    if raters.is_empty() {
        return Err(GatewayError::NoRaters);
    }
    let mut names = HashSet::new();
    for r in raters {
        if r.name.trim().is_empty() {
            return Err(GatewayError::InvalidRater("empty rater name".into()));
        }
        if !names.insert(r.name.as_str()) {
            return Err(GatewayError::InvalidRater(format!("duplicate rater name {:?}", r.name)));
        }
        if !r.temperature.is_finite() || r.temperature < 0.0 {
            return Err(GatewayError::InvalidRater(format!(
                "rater {:?}: temperature must be finite and >= 0",
                r.name
            )));
        }
    }
    Ok(())
}

/// Load a raters file: a JSON array of [`RaterSpec`].
pub fn load_raters(path: &Path) -> Result<Vec<RaterSpec>> {
    let text = fs::read_to_string(path).map_err(io_err(format!("reading {}", path.display())))?;
    let raters: Vec<RaterSpec> = serde_json::from_str(&text).map_err(json_err(format!("parsing {}", path.display())))?;
    validate_raters(&raters)?;
    Ok(raters)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawResponse {
    pub rater: String,
    pub scenario_id: String,
    /// Reply exactly as received.
    pub text: String,
    /// RFC 3339 time the successful request was sent.
    pub requested_at: String,
    pub template_hash: String,
    pub params_hash: String,
    /// Temperature reported by the provider, else the requested value.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub effective_temperature: Option<f64>,
}

impl RawResponse {
    /// Response with empty provenance fields, for callers that only need text.
    pub fn new(rater: impl Into<String>, scenario_id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            rater: rater.into(),
            scenario_id: scenario_id.into(),
            text: text.into(),
            requested_at: String::new(),
            template_hash: String::new(),
            params_hash: String::new(),
            effective_temperature: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellStatus {
    Ok,
    Failed,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub rater: String,
    pub scenario_id: String,
    pub status: CellStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub effective_temperature: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRater {
    pub name: String,
    pub kind: RaterKind,
    pub params_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub template_hash: String,
    pub scenario_count: usize,
    pub raters: Vec<ManifestRater>,
    /// Every (rater, scenario) pair in rater order, then corpus order.
    pub cells: Vec<Cell>,
}

impl RunManifest {
    pub fn count(&self, status: CellStatus) -> usize {
        self.cells.iter().filter(|c| c.status == status).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GatewayConfig {
    /// Requests in flight per rater.
    pub parallelism: usize,
    /// Retries after the first attempt for retryable errors.
    pub max_retries: u32,
    /// Delay before retry `i` is `backoff_base * 2^i`.
    pub backoff_base: Duration,
    /// Never contact the network; uncached network cells are skipped.
    pub offline: bool,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            parallelism: 4,
            max_retries: 3,
            backoff_base: Duration::from_millis(500),
            offline: false,
        }
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const REQUEST_LOG_FILE: &str = "requests.log.jsonl";
pub const RESPONSES_DIR: &str = "responses";

pub fn response_path(run_dir: &Path, rater: &str, scenario_id: &str) -> PathBuf {
    run_dir
        .join(RESPONSES_DIR)
        .join(rater_slug(rater))
        .join(format!("{scenario_id}.json"))
}

fn read_response(path: &Path) -> Option<RawResponse> {
    let text = fs::read_to_string(path).ok()?;
    serde_json::from_str(&text).ok()
}

fn write_json_atomic(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(json_err("serializing"))?;
    text.push('\n');
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, text).map_err(io_err(format!("writing {}", tmp.display())))?;
    fs::rename(&tmp, path).map_err(io_err(format!("renaming to {}", path.display())))
}

#[derive(Serialize)]
struct LogLine<'a> {
    at: String,
    rater: &'a str,
    scenario_id: &'a str,
    attempt: u32,
    prompt: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    reply: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

struct RequestLog {
    file: Mutex<fs::File>,
}

impl RequestLog {
    fn open(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join(REQUEST_LOG_FILE);
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(io_err(format!("opening {}", path.display())))?;
        Ok(Self { file: Mutex::new(file) })
    }

    fn append(&self, line: &LogLine<'_>) {
        let mut text = serde_json::to_string(line).expect("log line serializes");
        text.push('\n');
        let mut f = self.file.lock().unwrap_or_else(|e| e.into_inner());
        // Logging must not abort a run; a failed write loses only the log line.
        let _ = f.write_all(text.as_bytes());
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

struct Job<'a> {
    scenario: &'a Scenario,
    prompt: String,
}

fn send_with_retries(
    provider: &dyn Provider,
    request: &Request<'_>,
    rater: &str,
    config: &GatewayConfig,
    log: &RequestLog,
) -> std::result::Result<Reply, ProviderError> {
    let mut attempt = 0;
    loop {
        let result = provider.send(request);
        log.append(&LogLine {
            at: now(),
            rater,
            scenario_id: request.scenario_id,
            attempt,
            prompt: request.prompt,
            reply: result.as_ref().ok().map(|r| r.text.as_str()),
            error: result.as_ref().err().map(ToString::to_string),
        });
        match result {
            Err(e) if e.is_retryable() && attempt < config.max_retries => {
                thread::sleep(config.backoff_base * 2u32.pow(attempt));
                attempt += 1;
            }
            other => return other,
        }
    }
}

/// Execute (or resume) a run and write its manifest.
pub fn execute_run(
    run_dir: &Path,
    corpus: &[Scenario],
    template: &PromptTemplate,
    raters: &[RaterSpec],
    factory: &dyn ProviderFactory,
    config: &GatewayConfig,
) -> Result<RunManifest> {
    validate_raters(raters)?;
    fs::create_dir_all(run_dir.join(RESPONSES_DIR)).map_err(io_err(format!("creating {}", run_dir.display())))?;
    let log = RequestLog::open(run_dir)?;
    let template_hash = template.hash();
    let prompts: Vec<Job<'_>> = corpus
        .iter()
        .map(|s| Job {
            scenario: s,
            prompt: render_prompt(s, template).text,
        })
        .collect();

    let results: Vec<Vec<Cell>> = thread::scope(|scope| {
        let handles: Vec<_> = raters
            .iter()
            .map(|spec| {
                let (prompts, log, template_hash) = (&prompts, &log, template_hash.as_str());
                scope.spawn(move || run_rater(run_dir, spec, prompts, template_hash, factory, config, log))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("rater worker panicked")).collect()
    });

    let manifest = RunManifest {
        run_id: run_dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        template_hash: template_hash.clone(),
        scenario_count: corpus.len(),
        raters: raters
            .iter()
            .map(|r| ManifestRater {
                name: r.name.clone(),
                kind: r.kind,
                params_hash: r.params_hash(&template_hash),
            })
            .collect(),
        cells: results.into_iter().flatten().collect(),
    };
    write_json_atomic(&run_dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

fn run_rater(
    run_dir: &Path,
    spec: &RaterSpec,
    jobs: &[Job<'_>],
    template_hash: &str,
    factory: &dyn ProviderFactory,
    config: &GatewayConfig,
    log: &RequestLog,
) -> Vec<Cell> {
    let params_hash = spec.params_hash(template_hash);
    let cell = |sid: &str, status, reason: Option<String>, temp| Cell {
        rater: spec.name.clone(),
        scenario_id: sid.to_owned(),
        status,
        reason,
        effective_temperature: temp,
    };
    let mut cells: Vec<Option<Cell>> = vec![None; jobs.len()];
    let mut pending = VecDeque::new();
    for (i, job) in jobs.iter().enumerate() {
        let sid = job.scenario.id.as_str();
        if spec.kind == RaterKind::Human {
            cells[i] = Some(cell(sid, CellStatus::Skipped, Some("human rater; filled through the audit log".into()), None));
            continue;
        }
        let path = response_path(run_dir, &spec.name, sid);
        match read_response(&path) {
            Some(r) if r.template_hash == template_hash && r.params_hash == params_hash => {
                cells[i] = Some(cell(sid, CellStatus::Ok, None, r.effective_temperature));
            }
            _ => pending.push_back(i),
        }
    }
    if pending.is_empty() {
        return cells.into_iter().map(Option::unwrap).collect();
    }

    let provider = match factory.provider(spec) {
        Ok(p) => p,
        Err(e) => {
            for i in pending {
                cells[i] = Some(cell(&jobs[i].scenario.id, CellStatus::Failed, Some(e.to_string()), None));
            }
            return cells.into_iter().map(Option::unwrap).collect();
        }
    };
    if config.offline && provider.uses_network() {
        for i in pending {
            cells[i] = Some(cell(
                &jobs[i].scenario.id,
                CellStatus::Skipped,
                Some("offline: response not cached".into()),
                None,
            ));
        }
        return cells.into_iter().map(Option::unwrap).collect();
    }

    let dir = run_dir.join(RESPONSES_DIR).join(spec.slug());
    if let Err(e) = fs::create_dir_all(&dir) {
        for i in pending {
            cells[i] = Some(cell(&jobs[i].scenario.id, CellStatus::Failed, Some(e.to_string()), None));
        }
        return cells.into_iter().map(Option::unwrap).collect();
    }

    let queue = Mutex::new(pending);
    let done = Mutex::new(Vec::new());
    let workers = config.parallelism.max(1);
    thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let Some(i) = queue.lock().unwrap().pop_front() else { break };
                let job = &jobs[i];
                let sid = job.scenario.id.as_str();
                let request = Request {
                    scenario_id: sid,
                    prompt: &job.prompt,
                    model: spec.model.as_deref(),
                    temperature: spec.temperature,
                    extra_params: &spec.extra_params,
                };
                let requested_at = now();
                let result = match send_with_retries(provider.as_ref(), &request, &spec.name, config, log) {
                    Ok(reply) => {
                        let effective = reply.effective_temperature.unwrap_or(spec.temperature);
                        let raw = RawResponse {
                            rater: spec.name.clone(),
                            scenario_id: sid.to_owned(),
                            text: reply.text,
                            requested_at,
                            template_hash: template_hash.to_owned(),
                            params_hash: params_hash.clone(),
                            effective_temperature: Some(effective),
                        };
                        match write_json_atomic(&response_path(run_dir, &spec.name, sid), &raw) {
                            Ok(()) => cell(sid, CellStatus::Ok, None, Some(effective)),
                            Err(e) => cell(sid, CellStatus::Failed, Some(e.to_string()), None),
                        }
                    }
                    Err(e) => cell(sid, CellStatus::Failed, Some(e.to_string()), None),
                };
                done.lock().unwrap().push((i, result));
            });
        }
    });
    for (i, c) in done.into_inner().unwrap() {
        cells[i] = Some(c);
    }
    cells.into_iter().map(Option::unwrap).collect()
}

pub fn load_manifest(run_dir: &Path) -> Result<RunManifest> {
    let path = run_dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|_| GatewayError::NoManifest(run_dir.display().to_string()))?;
    serde_json::from_str(&text).map_err(json_err(format!("parsing {}", path.display())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissingCell {
    pub rater: String,
    pub scenario_id: String,
    pub status: CellStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseSet {
    pub run_id: String,
    /// Sorted by rater name, then scenario id.
    pub responses: Vec<RawResponse>,
    /// Manifest cells with no usable stored response.
    pub missing: Vec<MissingCell>,
}

/// Stored responses of a run, without any provider access.
pub fn replay_from_cache(run_dir: &Path) -> Result<ResponseSet> {
    let manifest = load_manifest(run_dir)?;
    let hashes: BTreeMap<&str, &str> = manifest
        .raters
        .iter()
        .map(|r| (r.name.as_str(), r.params_hash.as_str()))
        .collect();
    let mut responses = Vec::new();
    let mut missing = Vec::new();
    for c in &manifest.cells {
        let stored = read_response(&response_path(run_dir, &c.rater, &c.scenario_id)).filter(|r| {
            r.template_hash == manifest.template_hash && hashes.get(c.rater.as_str()) == Some(&r.params_hash.as_str())
        });
        match stored {
            Some(r) if c.status == CellStatus::Ok => responses.push(r),
            _ => missing.push(MissingCell {
                rater: c.rater.clone(),
                scenario_id: c.scenario_id.clone(),
                status: c.status,
                reason: c.reason.clone(),
            }),
        }
    }
    responses.sort_by(|a, b| (&a.rater, &a.scenario_id).cmp(&(&b.rater, &b.scenario_id)));
    missing.sort_by(|a, b| (&a.rater, &a.scenario_id).cmp(&(&b.rater, &b.scenario_id)));
    Ok(ResponseSet {
        run_id: manifest.run_id,
        responses,
        missing,
    })
}
