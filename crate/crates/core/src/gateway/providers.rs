//! Provider adapters.
//!
//! | provider            | API style          | default base URL                                        | key variable        |
//! |---------------------|--------------------|---------------------------------------------------------|---------------------|
//! | `openai`            | chat completions   | `https://api.openai.com/v1`                             | `OPENAI_API_KEY`    |
//! | `mistral`           | chat completions   | `https://api.mistral.ai/v1`                             | `MISTRAL_API_KEY`   |
//! | `xai`               | chat completions   | `https://api.x.ai/v1`                                   | `XAI_API_KEY`       |
//! | `qwen`, `dashscope` | chat completions   | `https://dashscope-intl.aliyuncs.com/compatible-mode/v1` | `DASHSCOPE_API_KEY` |
//! | `together`          | chat completions   | `https://api.together.xyz/v1`                           | `TOGETHER_API_KEY`  |
//! | `openai-compatible` | chat completions   | `endpoint` (required)                                   | optional            |
//! | `anthropic`         | messages           | `https://api.anthropic.com`                             | `ANTHROPIC_API_KEY` |
//! | `gemini`, `google`  | generateContent    | `https://generativelanguage.googleapis.com`             | `GEMINI_API_KEY`    |
//! | `cohere`            | v2 chat            | `https://api.cohere.com`                                | `COHERE_API_KEY`    |
//!
//! `endpoint` overrides the base URL and the `api_key_env` extra parameter
//! overrides the key variable. Other extra parameters are merged into the
//! request body, parsed as JSON when possible (`"max_tokens": "256"` becomes a
//! number). The reserved keys `api_key_env`, `args` and `timeout_secs` are
//! never sent.
//!
//! Local raters run `endpoint` with the prompt on stdin and take stdout as the
//! reply. The `args` extra parameter is split on whitespace, with `{model}`
//! and `{temperature}` substituted.
//!
//! Mock raters read scripted replies from a JSON-lines file of
//! `{"rater": ..., "scenario_id": ..., "text": ...}` rows; rows without
//! `rater` apply to every mock rater.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde::Deserialize;
use serde_json::{json, Map, Value};
use thiserror::Error;

use super::{RaterKind, RaterSpec};

/// One single-turn request.
#[derive(Debug, Clone, Copy)]
pub struct Request<'a> {
    pub scenario_id: &'a str,
    pub prompt: &'a str,
    pub model: Option<&'a str>,
    pub temperature: f64,
    pub extra_params: &'a BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reply {
    pub text: String,
    /// Temperature the provider reports having used, when it says so.
    pub effective_temperature: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProviderError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("transport: {0}")]
    Transport(String),
    #[error("HTTP {code}: {body}")]
    Status { code: u16, body: String },
    #[error("unexpected reply: {0}")]
    Protocol(String),
    #[error("command: {0}")]
    Command(String),
}

impl ProviderError {
    /// Transport failures, rate limits and server errors are retried.
    pub fn is_retryable(&self) -> bool {
        match self {
            ProviderError::Transport(_) => true,
            ProviderError::Status { code, .. } => *code == 408 || *code == 429 || *code >= 500,
            _ => false,
        }
    }
}

pub trait Provider: Send + Sync {
    fn send(&self, request: &Request<'_>) -> Result<Reply, ProviderError>;

    /// Whether `send` contacts a remote service.
    fn uses_network(&self) -> bool;
}

pub trait ProviderFactory: Sync {
    fn provider(&self, spec: &RaterSpec) -> Result<Arc<dyn Provider>, ProviderError>;
}

const RESERVED: [&str; 3] = ["api_key_env", "args", "timeout_secs"];
const DEFAULT_TIMEOUT: Duration = Duration::from_secs(120);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ApiStyle {
    ChatCompletions,
    AnthropicMessages,
    GeminiGenerate,
    CohereChat,
}

struct ProviderInfo {
    style: ApiStyle,
    base_url: Option<&'static str>,
    key_env: Option<&'static str>,
}

fn provider_info(name: &str) -> Option<ProviderInfo> {
    use ApiStyle::*;
    let (style, base_url, key_env) = match name {
        "openai" => (ChatCompletions, Some("https://api.openai.com/v1"), Some("OPENAI_API_KEY")),
        "mistral" => (ChatCompletions, Some("https://api.mistral.ai/v1"), Some("MISTRAL_API_KEY")),
        "xai" => (ChatCompletions, Some("https://api.x.ai/v1"), Some("XAI_API_KEY")),
        "qwen" | "dashscope" => (
            ChatCompletions,
            Some("https://dashscope-intl.aliyuncs.com/compatible-mode/v1"),
            Some("DASHSCOPE_API_KEY"),
        ),
        "together" => (ChatCompletions, Some("https://api.together.xyz/v1"), Some("TOGETHER_API_KEY")),
        "openai-compatible" => (ChatCompletions, None, None),
        "anthropic" => (AnthropicMessages, Some("https://api.anthropic.com"), Some("ANTHROPIC_API_KEY")),
        "gemini" | "google" => (
            GeminiGenerate,
            Some("https://generativelanguage.googleapis.com"),
            Some("GEMINI_API_KEY"),
        ),
        "cohere" => (CohereChat, Some("https://api.cohere.com"), Some("COHERE_API_KEY")),
        _ => return None,
    };
    Some(ProviderInfo {
        style,
        base_url,
        key_env,
    })
}

/// Adapter for the providers' HTTP chat APIs.
pub struct HttpChatProvider {
    style: ApiStyle,
    base_url: String,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl HttpChatProvider {
    pub fn new(style: ApiStyle, base_url: impl Into<String>, api_key: Option<String>, timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            style,
            base_url: base_url.into().trim_end_matches('/').to_owned(),
            api_key,
            agent,
        }
    }

    /// Build from a remote rater spec, reading the key from the environment.
    pub fn from_spec(spec: &RaterSpec) -> Result<Self, ProviderError> {
        let provider = spec
            .provider
            .as_deref()
            .ok_or_else(|| ProviderError::Config(format!("rater {:?} has no provider", spec.name)))?;
        let info = provider_info(provider)
            .ok_or_else(|| ProviderError::Config(format!("unknown provider {provider:?}")))?;
        if spec.model.is_none() {
            return Err(ProviderError::Config(format!("rater {:?} has no model", spec.name)));
        }
        let base_url = spec
            .endpoint
            .clone()
            .or(info.base_url.map(str::to_owned))
            .ok_or_else(|| ProviderError::Config(format!("provider {provider:?} needs an endpoint")))?;
        let key_env = spec
            .extra_params
            .get("api_key_env")
            .map(String::as_str)
            .or(info.key_env);
        let api_key = match key_env {
            Some(var) => Some(
                std::env::var(var)
                    .ok()
                    .filter(|v| !v.is_empty())
                    .ok_or_else(|| ProviderError::Config(format!("{var} is not set")))?,
            ),
            None => None,
        };
        let timeout = spec
            .extra_params
            .get("timeout_secs")
            .and_then(|s| s.parse().ok())
            .map(Duration::from_secs)
            .unwrap_or(DEFAULT_TIMEOUT);
        Ok(Self::new(info.style, base_url, api_key, timeout))
    }

    fn body(&self, request: &Request<'_>) -> Value {
        let model = request.model.unwrap_or_default();
        let mut body = match self.style {
            ApiStyle::ChatCompletions | ApiStyle::CohereChat => json!({
                "model": model,
                "messages": [{"role": "user", "content": request.prompt}],
                "temperature": request.temperature,
            }),
            ApiStyle::AnthropicMessages => json!({
                "model": model,
                "max_tokens": 1024,
                "messages": [{"role": "user", "content": request.prompt}],
                "temperature": request.temperature,
            }),
            ApiStyle::GeminiGenerate => json!({
                "contents": [{"role": "user", "parts": [{"text": request.prompt}]}],
                "generationConfig": {"temperature": request.temperature},
            }),
        };
        merge_extra(body.as_object_mut().expect("object body"), request.extra_params);
        body
    }

    fn url(&self, request: &Request<'_>) -> String {
        match self.style {
            ApiStyle::ChatCompletions => format!("{}/chat/completions", self.base_url),
            ApiStyle::AnthropicMessages => format!("{}/v1/messages", self.base_url),
            ApiStyle::GeminiGenerate => format!(
                "{}/v1beta/models/{}:generateContent",
                self.base_url,
                request.model.unwrap_or_default()
            ),
            ApiStyle::CohereChat => format!("{}/v2/chat", self.base_url),
        }
    }

    fn extract(&self, reply: &Value) -> Option<String> {
        let joined = |parts: &Vec<Value>| -> Option<String> {
            let texts: Vec<&str> = parts.iter().filter_map(|p| p.get("text")?.as_str()).collect();
            (!texts.is_empty()).then(|| texts.concat())
        };
        match self.style {
            ApiStyle::ChatCompletions => reply
                .pointer("/choices/0/message/content")?
                .as_str()
                .map(str::to_owned),
            ApiStyle::AnthropicMessages => joined(reply.get("content")?.as_array()?),
            ApiStyle::GeminiGenerate => joined(reply.pointer("/candidates/0/content/parts")?.as_array()?),
            ApiStyle::CohereChat => joined(reply.pointer("/message/content")?.as_array()?),
        }
    }
}

impl Provider for HttpChatProvider {
    fn send(&self, request: &Request<'_>) -> Result<Reply, ProviderError> {
        let mut req = self.agent.post(&self.url(request));
        if let Some(key) = &self.api_key {
            req = match self.style {
                ApiStyle::AnthropicMessages => req.header("x-api-key", key).header("anthropic-version", "2023-06-01"),
                ApiStyle::GeminiGenerate => req.header("x-goog-api-key", key),
                _ => req.header("Authorization", &format!("Bearer {key}")),
            };
        }
        let mut resp = req
            .send_json(self.body(request))
            .map_err(|e| ProviderError::Transport(e.to_string()))?;
        let code = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| ProviderError::Transport(e.to_string()))?;
        if !(200..300).contains(&code) {
            return Err(ProviderError::Status { code, body: text });
        }
        let value: Value = serde_json::from_str(&text).map_err(|e| ProviderError::Protocol(e.to_string()))?;
        let reply = self
            .extract(&value)
            .ok_or_else(|| ProviderError::Protocol("no reply text in response".into()))?;
        Ok(Reply {
            text: reply,
            effective_temperature: value.get("temperature").and_then(Value::as_f64),
        })
    }

    fn uses_network(&self) -> bool {
        true
    }
}

/// Runs a local model command per request.
pub struct CommandProvider {
    program: PathBuf,
    args: Vec<String>,
}

impl CommandProvider {
    pub fn new(program: impl Into<PathBuf>, args: Vec<String>) -> Self {
        Self {
            program: program.into(),
            args,
        }
    }

    pub fn from_spec(spec: &RaterSpec, base_dir: &Path) -> Result<Self, ProviderError> {
        let program = spec
            .endpoint
            .as_deref()
            .ok_or_else(|| ProviderError::Config(format!("local rater {:?} has no endpoint", spec.name)))?;
        let program = if program.contains('/') { base_dir.join(program) } else { PathBuf::from(program) };
        let args = spec
            .extra_params
            .get("args")
            .map(|a| a.split_whitespace().map(str::to_owned).collect())
            .unwrap_or_default();
        Ok(Self::new(program, args))
    }
}

impl Provider for CommandProvider {
    fn send(&self, request: &Request<'_>) -> Result<Reply, ProviderError> {
        let temperature = request.temperature.to_string();
        let args: Vec<String> = self
            .args
            .iter()
            .map(|a| {
                a.replace("{temperature}", &temperature)
                    .replace("{model}", request.model.unwrap_or_default())
            })
            .collect();
        let mut child = Command::new(&self.program)
            .args(&args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| ProviderError::Command(format!("{}: {e}", self.program.display())))?;
        let mut stdin = child.stdin.take().expect("piped stdin");
        let prompt = request.prompt.as_bytes().to_vec();
        let writer = std::thread::spawn(move || stdin.write_all(&prompt));
        let out = child
            .wait_with_output()
            .map_err(|e| ProviderError::Command(e.to_string()))?;
        let _ = writer.join();
        if !out.status.success() {
            return Err(ProviderError::Command(format!(
                "exit status {}: {}",
                out.status,
                String::from_utf8_lossy(&out.stderr).trim()
            )));
        }
        let text = String::from_utf8(out.stdout).map_err(|e| ProviderError::Protocol(e.to_string()))?;
        Ok(Reply {
            text,
            effective_temperature: None,
        })
    }

    fn uses_network(&self) -> bool {
        false
    }
}

#[derive(Debug, Deserialize)]
struct ScriptRow {
    #[serde(default)]
    rater: Option<String>,
    scenario_id: String,
    text: String,
}

/// Scripted replies keyed by scenario id; counts calls to `send`.
#[derive(Debug, Default)]
pub struct ScriptedProvider {
    replies: HashMap<String, String>,
    calls: AtomicUsize,
}

impl ScriptedProvider {
    pub fn new(replies: HashMap<String, String>) -> Self {
        Self {
            replies,
            calls: AtomicUsize::new(0),
        }
    }

    /// Rows of `path` for `rater` (or with no rater field).
    pub fn from_file(path: &Path, rater: &str) -> Result<Self, ProviderError> {
        let text = fs::read_to_string(path)
            .map_err(|e| ProviderError::Config(format!("{}: {e}", path.display())))?;
        let mut replies = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let row: ScriptRow = serde_json::from_str(line)
                .map_err(|e| ProviderError::Config(format!("{} line {}: {e}", path.display(), i + 1)))?;
            if row.rater.as_deref().is_none_or(|r| r == rater) {
                replies.insert(row.scenario_id, row.text);
            }
        }
        Ok(Self::new(replies))
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl Provider for ScriptedProvider {
    fn send(&self, request: &Request<'_>) -> Result<Reply, ProviderError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.replies
            .get(request.scenario_id)
            .map(|t| Reply {
                text: t.clone(),
                effective_temperature: None,
            })
            .ok_or_else(|| ProviderError::Protocol(format!("no scripted reply for {}", request.scenario_id)))
    }

    fn uses_network(&self) -> bool {
        false
    }
}

/// Builds adapters from rater specs. Relative local and mock paths resolve
/// against `base_dir` (normally the directory of the raters file).
#[derive(Debug, Clone)]
pub struct DefaultProviders {
    pub base_dir: PathBuf,
}

impl DefaultProviders {
    pub fn new(base_dir: impl Into<PathBuf>) -> Self {
        Self {
            base_dir: base_dir.into(),
        }
    }
}

impl ProviderFactory for DefaultProviders {
    fn provider(&self, spec: &RaterSpec) -> Result<Arc<dyn Provider>, ProviderError> {
        match spec.kind {
            RaterKind::Remote => Ok(Arc::new(HttpChatProvider::from_spec(spec)?)),
            RaterKind::Local => Ok(Arc::new(CommandProvider::from_spec(spec, &self.base_dir)?)),
            RaterKind::Mock => {
                let file = spec
                    .endpoint
                    .as_deref()
                    .ok_or_else(|| ProviderError::Config(format!("mock rater {:?} has no endpoint", spec.name)))?;
                Ok(Arc::new(ScriptedProvider::from_file(&self.base_dir.join(file), &spec.name)?))
            }
            RaterKind::Human => Err(ProviderError::Config(format!(
                "rater {:?} is human; its cells come from the audit log",
                spec.name
            ))),
        }
    }
}

fn merge_extra(body: &mut Map<String, Value>, extra: &BTreeMap<String, String>) {
    for (k, v) in extra {
        if !RESERVED.contains(&k.as_str()) {
            body.insert(k.clone(), serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.clone())));
        }
    }
}
