//! Session-oriented HTTP API over the compiler pipeline.
//!
//! Every response body is produced by `tabsplus_core::ops::render`, the same
//! renderer the command line uses.

mod openapi;

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::Router;
use serde::{Deserialize, Serialize};
use tokio::sync::{Mutex, OwnedMutexGuard, RwLock};

use tabsplus_core::codegen::{ContractPackage, GenerateOptions};
use tabsplus_core::cost::default_sizes;
use tabsplus_core::ledger::GasSchedule;
use tabsplus_core::ops::{self, ErrorBody};
use tabsplus_core::pipeline::{Analysis, PlanReport};
use tabsplus_core::plan::PlanInput;
use tabsplus_core::runtime::{RuntimeOptions, TraceOutcome};

const BODY_LIMIT: usize = 256 * 1024 * 1024;

/// Server-wide settings applied to every session.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Config {
    pub schedule: GasSchedule,
    pub gas_schedule_ref: String,
    pub seed: u64,
}

impl Default for Config {
    fn default() -> Self {
        Config { schedule: GasSchedule::default(), gas_schedule_ref: "default".into(), seed: 0 }
    }
}

struct Session {
    analysis: Analysis,
    plan: Option<(PlanInput, PlanReport)>,
    package: Option<ContractPackage>,
    last_run: Option<TraceOutcome>,
}

struct Inner {
    config: Config,
    next_id: AtomicU64,
    sessions: RwLock<BTreeMap<String, Arc<Mutex<Session>>>>,
}

#[derive(Clone)]
pub struct AppState(Arc<Inner>);

impl AppState {
    pub fn new(config: Config) -> Self {
        AppState(Arc::new(Inner { config, next_id: AtomicU64::new(1), sessions: RwLock::new(BTreeMap::new()) }))
    }

    async fn session(&self, id: &str) -> Result<OwnedMutexGuard<Session>, ApiError> {
        let s = self.0.sessions.read().await.get(id).cloned();
        match s {
            Some(s) => Ok(s.lock_owned().await),
            None => Err(ApiError::new(StatusCode::NOT_FOUND, ErrorBody::new("SessionUnknown", format!("no session `{id}`")))),
        }
    }
}

pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, body: ErrorBody) -> Self {
        ApiError { status, body }
    }

    fn out_of_order(message: &str) -> Self {
        ApiError::new(StatusCode::CONFLICT, ErrorBody::new("OutOfOrder", message))
    }
}

impl From<ErrorBody> for ApiError {
    fn from(body: ErrorBody) -> Self {
        let status = match body.code.as_str() {
            "RunIncomplete" | "Uncalibratable" => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::BAD_REQUEST,
        };
        ApiError { status, body }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        json_response(self.status, ops::render(&self.body))
    }
}

fn json_response(status: StatusCode, body: String) -> Response {
    (status, [(header::CONTENT_TYPE, "application/json")], body).into_response()
}

fn ok<T: Serialize>(value: &T) -> Response {
    json_response(StatusCode::OK, ops::render(value))
}

type ApiResult = Result<Response, ApiError>;

/// Runs CPU-bound work off the async workers.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> T {
    tokio::task::spawn_blocking(f).await.expect("worker panicked")
}

fn utf8(body: &Bytes) -> Result<&str, ApiError> {
    std::str::from_utf8(body).map_err(|_| ErrorBody::new("BadRequest", "body is not UTF-8").into())
}

#[derive(Serialize)]
struct Created {
    id: String,
    model: String,
    candidates: usize,
    diagnostics: serde_json::Value,
}

async fn create_session(State(app): State<AppState>, body: Bytes) -> ApiResult {
    let (analysis, report) = blocking(move || ops::analyze(&body)).await?;
    let id = format!("s{}", app.0.next_id.fetch_add(1, Ordering::Relaxed));
    let created = Created {
        id: id.clone(),
        model: report.model,
        candidates: report.candidates.len(),
        diagnostics: serde_json::to_value(&report.diagnostics).expect("diagnostics serialize"),
    };
    let session = Session { analysis, plan: None, package: None, last_run: None };
    app.0.sessions.write().await.insert(id, Arc::new(Mutex::new(session)));
    Ok(json_response(StatusCode::CREATED, ops::render(&created)))
}

async fn delete_session(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult {
    match app.0.sessions.write().await.remove(&id) {
        Some(_) => Ok(StatusCode::NO_CONTENT.into_response()),
        None => Err(ApiError::new(StatusCode::NOT_FOUND, ErrorBody::new("SessionUnknown", format!("no session `{id}`")))),
    }
}

async fn analysis(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult {
    let s = app.session(&id).await?;
    Ok(ok(&s.analysis.report()))
}

async fn graph(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult {
    let s = app.session(&id).await?;
    Ok(ok(&s.analysis.report().graph))
}

async fn candidates(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult {
    let s = app.session(&id).await?;
    Ok(ok(&s.analysis.report().candidates))
}

async fn put_plan(State(app): State<AppState>, Path(id): Path<String>, body: Bytes) -> ApiResult {
    let mut s = app.session(&id).await?;
    let input = ops::parse_plan(utf8(&body)?)?;
    let report = ops::plan(&s.analysis, &input)?;
    let out = ok(&report);
    s.plan = Some((input, report));
    s.package = None;
    s.last_run = None;
    Ok(out)
}

async fn get_plan(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult {
    let s = app.session(&id).await?;
    let (_, report) = s.plan.as_ref().ok_or_else(|| ApiError::out_of_order("no plan has been set"))?;
    Ok(ok(report))
}

#[derive(Deserialize)]
struct CostQuery {
    sizes: Option<String>,
}

async fn cost(State(app): State<AppState>, Path(id): Path<String>, Query(q): Query<CostQuery>) -> ApiResult {
    let s = app.session(&id).await?;
    let sizes = match &q.sizes {
        Some(text) => ops::parse_sizes(text)?,
        None => default_sizes(),
    };
    if s.plan.is_none() {
        return Err(ApiError::out_of_order("set a plan before asking for costs"));
    }
    let schedule = app.0.config.schedule;
    let table = blocking(move || {
        let (input, _) = s.plan.as_ref().expect("checked above");
        ops::cost(&s.analysis, input, &sizes, schedule)
    })
    .await?;
    Ok(ok(&table))
}

#[derive(Deserialize)]
struct SeedQuery {
    seed: Option<u64>,
}

async fn generate(State(app): State<AppState>, Path(id): Path<String>, Query(q): Query<SeedQuery>) -> ApiResult {
    let mut s = app.session(&id).await?;
    let (input, _) = s.plan.as_ref().ok_or_else(|| ApiError::out_of_order("set a plan before generating"))?;
    let options = GenerateOptions {
        seed: q.seed.unwrap_or(app.0.config.seed),
        gas_schedule_ref: app.0.config.gas_schedule_ref.clone(),
    };
    let pkg = ops::generate(&s.analysis, input, &options)?;
    let body = ops::package_json(&pkg);
    s.package = Some(pkg);
    s.last_run = None;
    Ok(json_response(StatusCode::OK, body))
}

async fn package(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult {
    let s = app.session(&id).await?;
    let pkg = s.package.as_ref().ok_or_else(|| ApiError::out_of_order("no package has been generated"))?;
    Ok(json_response(StatusCode::OK, ops::package_json(pkg)))
}

fn runtime_options(app: &AppState) -> RuntimeOptions {
    RuntimeOptions { schedule: app.0.config.schedule, ..RuntimeOptions::default() }
}

async fn run(State(app): State<AppState>, Path(id): Path<String>, body: Bytes) -> ApiResult {
    let mut s = app.session(&id).await?;
    let pkg = s.package.clone().ok_or_else(|| ApiError::out_of_order("generate a package before running"))?;
    let options = runtime_options(&app);
    let outcome = blocking(move || {
        let text = std::str::from_utf8(&body).map_err(|_| ErrorBody::new("BadRequest", "body is not UTF-8"))?;
        ops::run(&pkg, text, &options)
    })
    .await?;
    let out = ok(&outcome);
    s.last_run = Some(outcome);
    Ok(out)
}

async fn trace_check(State(app): State<AppState>, Path(id): Path<String>, body: Bytes) -> ApiResult {
    let s = app.session(&id).await?;
    let pkg = s.package.clone().ok_or_else(|| ApiError::out_of_order("generate a package before checking traces"))?;
    let traces: BTreeMap<String, String> = serde_json::from_slice(&body)
        .map_err(|e| ErrorBody::new("BadRequest", format!("expected an object of named traces: {e}")))?;
    let options = runtime_options(&app);
    let summary = blocking(move || {
        let traces: Vec<(String, String)> = traces.into_iter().collect();
        ops::trace_check(&pkg, &traces, &options)
    })
    .await;
    Ok(ok(&summary))
}

async fn report(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult {
    let s = app.session(&id).await?;
    let run = s.last_run.as_ref().ok_or_else(|| ApiError::out_of_order("nothing has been run yet"))?;
    Ok(ok(run))
}

async fn spec() -> Response {
    ok(&openapi::document())
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/spec", get(spec))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", axum::routing::delete(delete_session))
        .route("/sessions/{id}/analysis", get(analysis))
        .route("/sessions/{id}/graph", get(graph))
        .route("/sessions/{id}/candidates", get(candidates))
        .route("/sessions/{id}/plan", put(put_plan).get(get_plan))
        .route("/sessions/{id}/cost", get(cost))
        .route("/sessions/{id}/generate", post(generate))
        .route("/sessions/{id}/package", get(package))
        .route("/sessions/{id}/run", post(run))
        .route("/sessions/{id}/trace-check", post(trace_check))
        .route("/sessions/{id}/report", get(report))
        .layer(DefaultBodyLimit::max(BODY_LIMIT))
        .with_state(state)
}

/// Serves until the process is stopped.
pub async fn serve(addr: SocketAddr, config: Config) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(AppState::new(config))).await
}
