//! HTTP JSON API over a directory of runs, backing the review UI.
//!
//! Routes (`{id}` is a run directory name under the runs root):
//!
//! | method | path                                   | role             |
//! |--------|----------------------------------------|------------------|
//! | GET    | `/schema`                              | none             |
//! | GET    | `/runs/{id}/scenarios`                 | any              |
//! | GET    | `/runs/{id}/agreement`                 | any              |
//! | GET    | `/runs/{id}/triage?threshold=x`        | any              |
//! | GET    | `/runs/{id}/scenarios/{sid}/judgments` | any              |
//! | POST   | `/runs/{id}/expert-responses`          | expert           |
//! | POST   | `/runs/{id}/adjudications`             | reviewer         |
//!
//! Requests carry `Authorization: Bearer <token>`; each role has its own
//! token. GET responses are recomputed from the run directory on every
//! request and carry a strong ETag (sha256 of the body), honouring
//! `If-None-Match`. POSTs for one run are serialized and append to the
//! run's audit log before responding `201` with the stored record.
//!
//! Errors are `{"error": {"kind": ..., "message": ...}}` with status 400
//! (malformed JSON), 401, 403, 404, 409 (duplicate or not open), 422
//! (schema or enum violation) or 500.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use ethiclens_core::agreement::{AgreementTable, ComparisonReport, Thresholds};
use ethiclens_core::audit::{
    Adjudication, AuditError, AuditStore, ExpertResponse, TriageItem, DEFAULT_TRIAGE_THRESHOLD,
};
use ethiclens_core::corpus::Scenario;
use ethiclens_core::pipeline::{self, PipelineError};
use ethiclens_core::rundir::{RunDir, Stage, JUDGMENTS_FILE};
use ethiclens_core::{sha256_hex, Judgment};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Expert,
    Reviewer,
    Observer,
}

/// One bearer token per role. A role without a token cannot authenticate.
#[derive(Debug, Clone, Default)]
pub struct RoleTokens {
    pub expert: Option<String>,
    pub reviewer: Option<String>,
    pub observer: Option<String>,
}

impl RoleTokens {
    fn role_of(&self, token: &str) -> Option<Role> {
        let is = |t: &Option<String>| t.as_deref().is_some_and(|t| !t.is_empty() && t == token);
        if is(&self.expert) {
            Some(Role::Expert)
        } else if is(&self.reviewer) {
            Some(Role::Reviewer)
        } else if is(&self.observer) {
            Some(Role::Observer)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    /// Directory whose subdirectories are run directories.
    pub runs_root: PathBuf,
    pub tokens: RoleTokens,
    pub thresholds: Thresholds,
    /// Default triage cutoff on the combined z-score.
    pub triage_threshold: f64,
}

impl ServiceConfig {
    pub fn new(runs_root: impl Into<PathBuf>, tokens: RoleTokens) -> Self {
        Self {
            runs_root: runs_root.into(),
            tokens,
            thresholds: Thresholds::default(),
            triage_threshold: DEFAULT_TRIAGE_THRESHOLD,
        }
    }
}

#[derive(Clone)]
pub struct AppState {
    config: Arc<ServiceConfig>,
    /// Per-run write locks; POSTs to one run are serialized.
    writers: Arc<Mutex<HashMap<String, Arc<tokio::sync::Mutex<()>>>>>,
}

impl AppState {
    pub fn new(config: ServiceConfig) -> Self {
        Self {
            config: Arc::new(config),
            writers: Arc::default(),
        }
    }

    fn writer(&self, run_id: &str) -> Arc<tokio::sync::Mutex<()>> {
        let mut map = self.writers.lock().unwrap_or_else(|e| e.into_inner());
        map.entry(run_id.to_owned()).or_default().clone()
    }
}

#[derive(Debug, Error)]
pub enum ApiError {
    #[error("missing or malformed bearer token")]
    Unauthorized,
    #[error("role {0:?} may not perform this request")]
    Forbidden(Role),
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    BadRequest(String),
    #[error("{0}")]
    Unprocessable(String),
    #[error("{0}")]
    Conflict(String),
    #[error("{0}")]
    Internal(String),
}

impl ApiError {
    fn status(&self) -> StatusCode {
        match self {
            ApiError::Unauthorized => StatusCode::UNAUTHORIZED,
            ApiError::Forbidden(_) => StatusCode::FORBIDDEN,
            ApiError::NotFound(_) => StatusCode::NOT_FOUND,
            ApiError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ApiError::Unprocessable(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ApiError::Conflict(_) => StatusCode::CONFLICT,
            ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            ApiError::Unauthorized => "unauthorized",
            ApiError::Forbidden(_) => "forbidden",
            ApiError::NotFound(_) => "not_found",
            ApiError::BadRequest(_) => "bad_request",
            ApiError::Unprocessable(_) => "invalid",
            ApiError::Conflict(_) => "conflict",
            ApiError::Internal(_) => "internal",
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({"error": {"kind": self.kind(), "message": self.to_string()}});
        let mut resp = (self.status(), Json(body)).into_response();
        if matches!(self, ApiError::Unauthorized) {
            resp.headers_mut()
                .insert(header::WWW_AUTHENTICATE, HeaderValue::from_static("Bearer"));
        }
        resp
    }
}

impl From<AuditError> for ApiError {
    fn from(e: AuditError) -> Self {
        match e {
            AuditError::UnknownScenario(_) => ApiError::NotFound(e.to_string()),
            AuditError::Conflict(_) | AuditError::NotOpen { .. } => ApiError::Conflict(e.to_string()),
            AuditError::Invalid(_) => ApiError::Unprocessable(e.to_string()),
            _ => ApiError::Internal(e.to_string()),
        }
    }
}

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Audit(a) => a.into(),
            e if e.is_dependency() => ApiError::NotFound(e.to_string()),
            e => ApiError::Internal(e.to_string()),
        }
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn authorize(state: &AppState, headers: &HeaderMap, allowed: &[Role]) -> ApiResult<Role> {
    let token = headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .map(str::trim)
        .ok_or(ApiError::Unauthorized)?;
    let role = state.config.tokens.role_of(token).ok_or(ApiError::Unauthorized)?;
    if allowed.contains(&role) {
        Ok(role)
    } else {
        Err(ApiError::Forbidden(role))
    }
}

const ANY: [Role; 3] = [Role::Expert, Role::Reviewer, Role::Observer];

/// Resolve a run id to an existing run directory with a corpus.
fn run_dir(state: &AppState, id: &str) -> ApiResult<RunDir> {
    let valid = !id.is_empty()
        && id != "."
        && id != ".."
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-'));
    let path = state.config.runs_root.join(id);
    if !valid || !path.is_dir() {
        return Err(ApiError::NotFound(format!("unknown run {id:?}")));
    }
    let run = RunDir::new(path);
    if !run.path(ethiclens_core::rundir::CORPUS_FILE).exists() {
        return Err(ApiError::NotFound(format!("run {id:?} has no corpus")));
    }
    Ok(run)
}

/// Run blocking file work off the async executor.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))?
}

/// JSON body with a content-hash ETag; `304` when the client already has it.
fn etagged(headers: &HeaderMap, value: &impl Serialize) -> Response {
    let body = serde_json::to_vec(value).expect("response serializes");
    let etag = format!("\"{}\"", sha256_hex(&body));
    let matches = headers
        .get(header::IF_NONE_MATCH)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.split(',').any(|t| t.trim() == etag || t.trim() == "*"));
    let etag_value = HeaderValue::from_str(&etag).expect("hex etag is a valid header");
    if matches {
        return (StatusCode::NOT_MODIFIED, [(header::ETAG, etag_value)]).into_response();
    }
    (
        StatusCode::OK,
        [
            (header::ETAG, etag_value),
            (header::CONTENT_TYPE, HeaderValue::from_static("application/json")),
        ],
        body,
    )
        .into_response()
}

/// Decode a POST body: syntax errors are 400, schema and enum errors 422.
fn decode<T: for<'de> Deserialize<'de>>(body: &[u8]) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| {
        use serde_json::error::Category;
        match e.classify() {
            Category::Data => ApiError::Unprocessable(e.to_string()),
            _ => ApiError::BadRequest(e.to_string()),
        }
    })
}

fn has_judgments(run: &RunDir) -> bool {
    run.path(JUDGMENTS_FILE).exists()
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AgreementView {
    /// Model-group table; `null` until the run has been parsed.
    pub llm: Option<AgreementTable>,
    /// Expert-group table; `null` until an expert response exists.
    pub experts: Option<AgreementTable>,
    pub comparison: Option<ComparisonReport>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TriageView {
    pub threshold: f64,
    /// Every scenario, ascending by combined z; `open` items await review.
    pub items: Vec<TriageItem>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ScenarioJudgments {
    pub scenario: Scenario,
    pub models: Vec<Judgment>,
    pub experts: Vec<Judgment>,
}

fn agreement_view(run: &RunDir, thresholds: Thresholds) -> ApiResult<AgreementView> {
    let store = pipeline::open_audit_store(run)?;
    let llm = if has_judgments(run) {
        Some(pipeline::llm_table(run, Stage::Metrics, thresholds)?)
    } else {
        None
    };
    let (experts, comparison) = match &llm {
        Some(l) => pipeline::expert_views(l, &store, thresholds)?,
        None => {
            let experts = store.expert_judgments();
            let table = if experts.is_empty() {
                None
            } else {
                Some(
                    ethiclens_core::agreement::agreement_table(&experts, &Default::default(), thresholds)
                        .map_err(|e| ApiError::Internal(e.to_string()))?,
                )
            };
            (table, None)
        }
    };
    Ok(AgreementView {
        llm,
        experts,
        comparison,
    })
}

/// Triage queue; adjudications applied when `store` is given.
fn triage_queue(run: &RunDir, cfg: &ServiceConfig, threshold: f64, store: Option<&AuditStore>) -> ApiResult<Vec<TriageItem>> {
    if !has_judgments(run) {
        return Ok(Vec::new());
    }
    let judgments = run.load_judgments(Stage::Metrics).map_err(PipelineError::from)?;
    let llm = pipeline::llm_table(run, Stage::Metrics, cfg.thresholds)?;
    Ok(pipeline::triage(&judgments, &llm, threshold, store))
}

async fn schema() -> impl IntoResponse {
    Json(schema_document())
}

async fn scenarios(State(s): State<AppState>, UrlPath(id): UrlPath<String>, headers: HeaderMap) -> ApiResult<Response> {
    authorize(&s, &headers, &ANY)?;
    let st = s.clone();
    let list = blocking(move || Ok(pipeline::scenarios(&run_dir(&st, &id)?)?)).await?;
    Ok(etagged(&headers, &list))
}

async fn agreement(State(s): State<AppState>, UrlPath(id): UrlPath<String>, headers: HeaderMap) -> ApiResult<Response> {
    authorize(&s, &headers, &ANY)?;
    let st = s.clone();
    let view = blocking(move || agreement_view(&run_dir(&st, &id)?, st.config.thresholds)).await?;
    Ok(etagged(&headers, &view))
}

#[derive(Debug, Deserialize)]
struct TriageQuery {
    threshold: Option<f64>,
}

async fn triage(
    State(s): State<AppState>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<TriageQuery>,
    headers: HeaderMap,
) -> ApiResult<Response> {
    authorize(&s, &headers, &ANY)?;
    let threshold = q.threshold.unwrap_or(s.config.triage_threshold);
    if !threshold.is_finite() {
        return Err(ApiError::Unprocessable("threshold must be finite".into()));
    }
    let st = s.clone();
    let view = blocking(move || {
        let run = run_dir(&st, &id)?;
        let store = pipeline::open_audit_store(&run)?;
        let items = triage_queue(&run, &st.config, threshold, Some(&store))?;
        Ok(TriageView { threshold, items })
    })
    .await?;
    Ok(etagged(&headers, &view))
}

async fn scenario_judgments(
    State(s): State<AppState>,
    UrlPath((id, sid)): UrlPath<(String, String)>,
    headers: HeaderMap,
) -> ApiResult<Response> {
    authorize(&s, &headers, &ANY)?;
    let st = s.clone();
    let view = blocking(move || {
        let run = run_dir(&st, &id)?;
        let scenario = pipeline::scenarios(&run)?
            .into_iter()
            .find(|sc| sc.id == sid)
            .ok_or_else(|| ApiError::NotFound(format!("unknown scenario {sid:?}")))?;
        let models = if has_judgments(&run) {
            run.load_judgments(Stage::Metrics)
                .map_err(PipelineError::from)?
                .into_iter()
                .filter(|j| j.scenario_id == sid)
                .collect()
        } else {
            Vec::new()
        };
        let experts = pipeline::open_audit_store(&run)?
            .expert_judgments()
            .into_iter()
            .filter(|j| j.scenario_id == sid)
            .collect();
        Ok(ScenarioJudgments {
            scenario,
            models,
            experts,
        })
    })
    .await?;
    Ok(etagged(&headers, &view))
}

async fn post_expert_response(
    State(s): State<AppState>,
    UrlPath(id): UrlPath<String>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult<Response> {
    authorize(&s, &headers, &[Role::Expert])?;
    let response: ExpertResponse = decode(&body)?;
    let lock = s.writer(&id);
    let _guard = lock.lock().await;
    let st = s.clone();
    let stored = blocking(move || {
        let run = run_dir(&st, &id)?;
        let mut store = pipeline::open_audit_store(&run)?;
        Ok(store.ingest_expert_response(response)?)
    })
    .await?;
    Ok((StatusCode::CREATED, Json(stored)).into_response())
}

async fn post_adjudication(
    State(s): State<AppState>,
    UrlPath(id): UrlPath<String>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult<Response> {
    authorize(&s, &headers, &[Role::Reviewer])?;
    let adjudication: Adjudication = decode(&body)?;
    let lock = s.writer(&id);
    let _guard = lock.lock().await;
    let st = s.clone();
    let stored = blocking(move || {
        let run = run_dir(&st, &id)?;
        let mut store = pipeline::open_audit_store(&run)?;
        // Queue without adjudications applied: the store itself rejects repeats.
        let queue = triage_queue(&run, &st.config, st.config.triage_threshold, None)?;
        Ok(store.record_adjudication(adjudication, &queue)?)
    })
    .await?;
    Ok((StatusCode::CREATED, Json(stored)).into_response())
}

async fn fallback() -> ApiError {
    ApiError::NotFound("no such route".into())
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/schema", get(schema))
        .route("/runs/{id}/scenarios", get(scenarios))
        .route("/runs/{id}/agreement", get(agreement))
        .route("/runs/{id}/triage", get(triage))
        .route("/runs/{id}/scenarios/{sid}/judgments", get(scenario_judgments))
        .route("/runs/{id}/expert-responses", post(post_expert_response))
        .route("/runs/{id}/adjudications", post(post_adjudication))
        .fallback(fallback)
        .with_state(state)
}

/// Serve until ctrl-c.
pub async fn serve(config: ServiceConfig, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(AppState::new(config)))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

/// JSON Schemas of the POST payloads and the enums they use.
pub fn schema_document() -> Value {
    let theory = json!({"type": "string", "enum": ["Utilitarianism", "Deontology", "VirtueEthics"]});
    let verdict = json!({"type": "string", "enum": ["Yes", "No"]});
    json!({
        "$schema": "https://json-schema.org/draft/2020-12/schema",
        "$defs": {
            "Theory": theory,
            "Verdict": verdict,
            "ExpertResponse": {
                "type": "object",
                "additionalProperties": false,
                "required": ["expert", "scenario_id", "theory", "verdict", "explanation"],
                "properties": {
                    "expert": {"type": "string", "minLength": 1},
                    "scenario_id": {"type": "string"},
                    "theory": {"$ref": "#/$defs/Theory"},
                    "verdict": {"$ref": "#/$defs/Verdict"},
                    "explanation": {"type": "string", "minLength": 1}
                }
            },
            "Adjudication": {
                "type": "object",
                "additionalProperties": false,
                "required": ["scenario_id", "reviewer", "decision", "rationale"],
                "properties": {
                    "scenario_id": {"type": "string"},
                    "reviewer": {"type": "string", "minLength": 1},
                    "decision": {"$ref": "#/$defs/Verdict"},
                    "theory": {"$ref": "#/$defs/Theory"},
                    "rationale": {"type": "string", "minLength": 1}
                }
            },
            "TriageStatus": {"type": "string", "enum": ["open", "adjudicated", "auto_resolved"]},
            "Category": {"type": "string", "enum": ["strong", "fair", "poor"]}
        },
        "endpoints": {
            "GET /runs/{id}/scenarios": "Scenario[]",
            "GET /runs/{id}/agreement": "{llm, experts, comparison}",
            "GET /runs/{id}/triage": "{threshold, items}",
            "GET /runs/{id}/scenarios/{sid}/judgments": "{scenario, models, experts}",
            "POST /runs/{id}/expert-responses": "ExpertResponse (expert role)",
            "POST /runs/{id}/adjudications": "Adjudication (reviewer role)"
        }
    })
}

/// Resolve the runs root for a single run directory path: its parent, and
/// the run id its file name.
pub fn split_run_path(run: &Path) -> Option<(PathBuf, String)> {
    let id = run.file_name()?.to_str()?.to_owned();
    let root = run.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
    Some((root, id))
}
