//! Gateway behaviour against a local HTTP stub and scripted providers.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use ethiclens_core::corpus::{PromptTemplate, Scenario};
use ethiclens_core::gateway::providers::{ApiStyle, HttpChatProvider, ScriptedProvider};
use ethiclens_core::gateway::{
    self, execute_run, replay_from_cache, CellStatus, GatewayConfig, GatewayError, Provider, ProviderError,
    ProviderFactory, RaterKind, RaterSpec, Request,
};
use serde_json::Value;

struct Captured {
    path: String,
    headers: HashMap<String, String>,
    body: Value,
}

/// Serves one canned `(status, body)` per connection, in order, and records
/// what it received.
fn stub(responses: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<Captured>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = format!("http://{}", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    thread::spawn(move || {
        for (status, body) in responses {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut line = String::new();
            reader.read_line(&mut line).unwrap();
            let path = line.split_whitespace().nth(1).unwrap_or_default().to_owned();
            let mut headers = HashMap::new();
            loop {
                let mut h = String::new();
                reader.read_line(&mut h).unwrap();
                let h = h.trim_end();
                if h.is_empty() {
                    break;
                }
                let (k, v) = h.split_once(':').unwrap();
                headers.insert(k.trim().to_lowercase(), v.trim().to_owned());
            }
            let len: usize = headers.get("content-length").and_then(|v| v.parse().ok()).unwrap_or(0);
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).unwrap();
            log.lock().unwrap().push(Captured {
                path,
                headers,
                body: serde_json::from_slice(&buf).unwrap_or(Value::Null),
            });
            let mut s = stream;
            write!(
                s,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
        }
    });
    (addr, seen)
}

fn request<'a>(extra: &'a BTreeMap<String, String>) -> Request<'a> {
    Request {
        scenario_id: "s01",
        prompt: "Given the following scenario: x",
        model: Some("m-1"),
        temperature: 0.2,
        extra_params: extra,
    }
}

#[test]
fn chat_completions_sends_bearer_key_and_temperature() {
    let reply = r#"{"choices":[{"message":{"content":"1) Deontology\n2) Yes\n3) Fine."}}]}"#;
    let (url, seen) = stub(vec![(200, reply.into())]);
    let p = HttpChatProvider::new(ApiStyle::ChatCompletions, url, Some("k-123".into()), Duration::from_secs(5));
    let extra = BTreeMap::from([("max_tokens".to_string(), "256".to_string())]);
    let r = p.send(&request(&extra)).unwrap();
    assert_eq!(r.text, "1) Deontology\n2) Yes\n3) Fine.");
    let seen = seen.lock().unwrap();
    assert_eq!(seen[0].path, "/chat/completions");
    assert_eq!(seen[0].headers["authorization"], "Bearer k-123");
    assert_eq!(seen[0].body["temperature"], 0.2);
    assert_eq!(seen[0].body["model"], "m-1");
    assert_eq!(seen[0].body["max_tokens"], 256);
    let messages = seen[0].body["messages"].as_array().unwrap();
    assert_eq!(messages.len(), 1, "single user turn, no system message");
    assert_eq!(messages[0]["role"], "user");
}

#[test]
fn anthropic_and_gemini_shapes() {
    let (url, seen) = stub(vec![(200, r#"{"content":[{"type":"text","text":"a"},{"type":"text","text":"b"}]}"#.into())]);
    let p = HttpChatProvider::new(ApiStyle::AnthropicMessages, url, Some("ak".into()), Duration::from_secs(5));
    let extra = BTreeMap::new();
    assert_eq!(p.send(&request(&extra)).unwrap().text, "ab");
    let s = seen.lock().unwrap();
    assert_eq!(s[0].path, "/v1/messages");
    assert_eq!(s[0].headers["x-api-key"], "ak");
    assert!(s[0].body.get("system").is_none());

    let (url, seen) = stub(vec![(200, r#"{"candidates":[{"content":{"parts":[{"text":"g"}]}}]}"#.into())]);
    let p = HttpChatProvider::new(ApiStyle::GeminiGenerate, url, Some("gk".into()), Duration::from_secs(5));
    assert_eq!(p.send(&request(&extra)).unwrap().text, "g");
    let s = seen.lock().unwrap();
    assert_eq!(s[0].path, "/v1beta/models/m-1:generateContent");
    assert_eq!(s[0].body["generationConfig"]["temperature"], 0.2);
}

#[test]
fn server_errors_are_retryable_client_errors_are_not() {
    let (url, _) = stub(vec![(500, "{}".into())]);
    let p = HttpChatProvider::new(ApiStyle::ChatCompletions, url, None, Duration::from_secs(5));
    let extra = BTreeMap::new();
    let err = p.send(&request(&extra)).unwrap_err();
    assert!(matches!(err, ProviderError::Status { code: 500, .. }));
    assert!(err.is_retryable());
    assert!(!ProviderError::Status { code: 401, body: String::new() }.is_retryable());
    assert!(ProviderError::Status { code: 429, body: String::new() }.is_retryable());
}

fn corpus() -> Vec<Scenario> {
    ["s01", "s02"]
        .iter()
        .map(|id| Scenario {
            id: id.to_string(),
            statement: format!("Statement {id}."),
            tags: Vec::new(),
            source: None,
        })
        .collect()
}

fn spec(name: &str, kind: RaterKind) -> RaterSpec {
    RaterSpec {
        name: name.into(),
        kind,
        provider: None,
        model: None,
        endpoint: None,
        temperature: 0.2,
        extra_params: BTreeMap::new(),
    }
}

/// Factory over a shared HTTP stub; counts providers handed out.
struct StubFactory {
    url: String,
    built: AtomicUsize,
}

impl ProviderFactory for StubFactory {
    fn provider(&self, _: &RaterSpec) -> Result<Arc<dyn Provider>, ProviderError> {
        self.built.fetch_add(1, Ordering::SeqCst);
        Ok(Arc::new(HttpChatProvider::new(
            ApiStyle::ChatCompletions,
            self.url.clone(),
            None,
            Duration::from_secs(5),
        )))
    }
}

fn fast() -> GatewayConfig {
    GatewayConfig {
        parallelism: 1,
        max_retries: 2,
        backoff_base: Duration::from_millis(1),
        offline: false,
    }
}

#[test]
fn retry_after_500_then_warm_rerun_sends_nothing() {
    let ok = |t: &str| (200, format!(r#"{{"choices":[{{"message":{{"content":"{t}"}}}}]}}"#));
    let (url, seen) = stub(vec![(500, "{}".into()), ok("1) Deontology 2) Yes 3) A."), ok("1) Deontology 2) No 3) B.")]);
    let dir = tempfile::tempdir().unwrap();
    let factory = StubFactory { url, built: AtomicUsize::new(0) };
    let raters = [spec("Remote A", RaterKind::Remote)];
    let template = PromptTemplate::default_template();
    let m = execute_run(dir.path(), &corpus(), &template, &raters, &factory, &fast()).unwrap();
    assert_eq!(m.count(CellStatus::Ok), 2);
    assert_eq!(seen.lock().unwrap().len(), 3);
    let log = std::fs::read_to_string(dir.path().join(gateway::REQUEST_LOG_FILE)).unwrap();
    assert_eq!(log.lines().count(), 3);

    let first_manifest = std::fs::read(dir.path().join(gateway::MANIFEST_FILE)).unwrap();
    let again = execute_run(dir.path(), &corpus(), &template, &raters, &factory, &fast()).unwrap();
    assert_eq!(again.count(CellStatus::Ok), 2);
    assert_eq!(factory.built.load(Ordering::SeqCst), 1, "warm rerun builds no provider");
    assert_eq!(seen.lock().unwrap().len(), 3, "warm rerun sends no request");
    assert_eq!(std::fs::read(dir.path().join(gateway::MANIFEST_FILE)).unwrap(), first_manifest);
}

#[test]
fn changed_temperature_invalidates_cache() {
    let dir = tempfile::tempdir().unwrap();
    let script = dir.path().join("replies.jsonl");
    std::fs::write(&script, "{\"scenario_id\":\"s01\",\"text\":\"a\"}\n{\"scenario_id\":\"s02\",\"text\":\"b\"}\n").unwrap();
    struct Counting(Arc<ScriptedProvider>);
    impl ProviderFactory for Counting {
        fn provider(&self, _: &RaterSpec) -> Result<Arc<dyn Provider>, ProviderError> {
            Ok(self.0.clone())
        }
    }
    let p = Arc::new(ScriptedProvider::from_file(&script, "m").unwrap());
    let f = Counting(p.clone());
    let run = dir.path().join("run");
    let t = PromptTemplate::default_template();
    let mut r = spec("m", RaterKind::Mock);
    execute_run(&run, &corpus(), &t, &[r.clone()], &f, &fast()).unwrap();
    assert_eq!(p.calls(), 2);
    execute_run(&run, &corpus(), &t, &[r.clone()], &f, &fast()).unwrap();
    assert_eq!(p.calls(), 2);
    r.temperature = 0.7;
    execute_run(&run, &corpus(), &t, &[r], &f, &fast()).unwrap();
    assert_eq!(p.calls(), 4);
}

#[test]
fn zero_raters_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let f = StubFactory { url: "http://127.0.0.1:9".into(), built: AtomicUsize::new(0) };
    let err = execute_run(dir.path(), &corpus(), &PromptTemplate::default_template(), &[], &f, &fast()).unwrap_err();
    assert!(matches!(err, GatewayError::NoRaters));
}

#[test]
fn offline_skips_uncached_network_cells_and_replay_lists_them() {
    let dir = tempfile::tempdir().unwrap();
    let script = dir.path().join("replies.jsonl");
    std::fs::write(&script, "{\"scenario_id\":\"s01\",\"text\":\"x\"}\n{\"scenario_id\":\"s02\",\"text\":\"y\"}\n").unwrap();
    let run = dir.path().join("run");
    let mut mock = spec("Zed mock", RaterKind::Mock);
    mock.endpoint = Some("replies.jsonl".into());
    let mut remote = spec("Alpha remote", RaterKind::Remote);
    remote.provider = Some("openai-compatible".into());
    remote.model = Some("m".into());
    remote.endpoint = Some("http://127.0.0.1:9".into());
    let human = spec("Expert", RaterKind::Human);
    let cfg = GatewayConfig { offline: true, ..fast() };
    let factory = gateway::DefaultProviders::new(dir.path());
    let m = execute_run(&run, &corpus(), &PromptTemplate::default_template(), &[mock, remote, human], &factory, &cfg).unwrap();
    assert_eq!(m.count(CellStatus::Ok), 2);
    assert_eq!(m.count(CellStatus::Skipped), 4);
    assert!(!run.join(gateway::REQUEST_LOG_FILE).exists() || std::fs::read_to_string(run.join(gateway::REQUEST_LOG_FILE)).unwrap().lines().all(|l| l.contains("Zed mock")));

    let set = replay_from_cache(&run).unwrap();
    let got: Vec<(&str, &str)> = set.responses.iter().map(|r| (r.rater.as_str(), r.scenario_id.as_str())).collect();
    assert_eq!(got, [("Zed mock", "s01"), ("Zed mock", "s02")]);
    let missing: Vec<(&str, &str)> = set.missing.iter().map(|r| (r.rater.as_str(), r.scenario_id.as_str())).collect();
    assert_eq!(missing, [("Alpha remote", "s01"), ("Alpha remote", "s02"), ("Expert", "s01"), ("Expert", "s02")]);
    assert_eq!(set.responses[0].text, "x");
}

#[test]
fn stored_text_is_byte_exact() {
    let dir = tempfile::tempdir().unwrap();
    let text = "  1) Deontology\r\n2) Yes \u{2014} ok\n3) Trailing   \n\n";
    let p = Arc::new(ScriptedProvider::new(HashMap::from([("s01".to_string(), text.to_string()), ("s02".to_string(), "b".to_string())])));
    struct F(Arc<ScriptedProvider>);
    impl ProviderFactory for F {
        fn provider(&self, _: &RaterSpec) -> Result<Arc<dyn Provider>, ProviderError> {
            Ok(self.0.clone())
        }
    }
    execute_run(dir.path(), &corpus(), &PromptTemplate::default_template(), &[spec("m", RaterKind::Mock)], &F(p), &fast()).unwrap();
    let set = replay_from_cache(dir.path()).unwrap();
    assert_eq!(set.responses[0].text, text);
}

#[test]
fn replay_without_manifest_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(replay_from_cache(dir.path()), Err(GatewayError::NoManifest(_))));
}
