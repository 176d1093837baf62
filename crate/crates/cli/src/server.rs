//! HTTP service over a working directory.
//!
//! Classification reads an immutable snapshot of the routing state, so any
//! number of requests run concurrently. Deferrals append to the buffer one at
//! a time. A refit trains on a copy of the buffer and then swaps the new
//! state in, so in-flight requests finish under the version they started
//! with. Shutdown writes the buffer back to disk.

use std::future::Future;
use std::io::IsTerminal;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use axum::extract::rejection::JsonRejection;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use deferral_core::artifacts::Report;
use deferral_core::gatekeeper::PipelineFamily;
use deferral_core::router::{self, classify, route, CachedOracle, LiveInput, RouteDecision, RouterConfig, RouterError, RoutingState, TeacherClient};
use deferral_core::trace_store::{StoreError, TraceBuffer, TraceRecord};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::net::TcpListener;

use crate::commands::{serving_state, Outcome, VerdictSummary};
use crate::config::{RunConfig, TeacherMode};
use crate::error::CliError;
use crate::remote::RemoteEndpoint;
use crate::workspace::Workspace;

const TEACHER_TIMEOUT: Duration = Duration::from_secs(30);

pub struct AppState {
    router_cfg: RouterConfig,
    workspace: Workspace,
    routing: RwLock<Arc<RoutingState>>,
    buffer: Mutex<TraceBuffer>,
    teacher: Option<Arc<dyn TeacherClient>>,
    refit: tokio::sync::Mutex<()>,
}

pub type Shared = Arc<AppState>;

impl AppState {
    pub fn new(cfg: &RunConfig, routing: RoutingState, buffer: TraceBuffer, teacher: Option<Arc<dyn TeacherClient>>) -> Shared {
        Arc::new(Self {
            router_cfg: cfg.router_config(),
            workspace: Workspace::new(&cfg.out),
            routing: RwLock::new(Arc::new(routing)),
            buffer: Mutex::new(buffer),
            teacher,
            refit: tokio::sync::Mutex::new(()),
        })
    }

    /// Loads state and buffer from the output directory and connects the
    /// configured teacher.
    pub fn from_config(cfg: &RunConfig) -> Result<Shared, CliError> {
        let teacher: Option<Arc<dyn TeacherClient>> = match &cfg.teacher {
            TeacherMode::None => None,
            TeacherMode::Oracle { path } => Some(Arc::new(CachedOracle::from_file(path)?)),
            TeacherMode::Remote { url } => Some(Arc::new(RemoteEndpoint::new(url.clone(), TEACHER_TIMEOUT))),
        };
        let (routing, buffer) = serving_state(&Workspace::new(&cfg.out), teacher.is_some())?;
        Ok(Self::new(cfg, routing, buffer, teacher))
    }

    pub fn routing(&self) -> Arc<RoutingState> {
        self.routing.read().expect("routing lock").clone()
    }

    pub fn buffer_len(&self) -> usize {
        self.buffer.lock().expect("buffer lock").len()
    }

    /// Writes the in-memory buffer to the output directory.
    pub fn flush(&self) -> Result<(), CliError> {
        let snapshot = self.buffer.lock().expect("buffer lock").clone();
        self.workspace.save_buffer(&snapshot)
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        Self::new(StatusCode::BAD_REQUEST, e.body_text())
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        let status = match e {
            StoreError::DuplicateId(_) => StatusCode::CONFLICT,
            StoreError::Io(_) => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::BAD_REQUEST,
        };
        Self::new(status, e.to_string())
    }
}

impl From<RouterError> for ApiError {
    fn from(e: RouterError) -> Self {
        match e {
            RouterError::Store(s) => s.into(),
            RouterError::DimensionMismatch { .. } => Self::new(StatusCode::BAD_REQUEST, e.to_string()),
            RouterError::DuplicateId(_) | RouterError::EmptyBuffer => Self::new(StatusCode::CONFLICT, e.to_string()),
            RouterError::Teacher(_) => Self::new(StatusCode::BAD_GATEWAY, e.to_string()),
            other => Self::new(StatusCode::INTERNAL_SERVER_ERROR, other.to_string()),
        }
    }
}

impl From<CliError> for ApiError {
    fn from(e: CliError) -> Self {
        match e {
            CliError::Router(r) => r.into(),
            CliError::Missing(_) => Self::new(StatusCode::NOT_FOUND, e.to_string()),
            other => Self::new(StatusCode::INTERNAL_SERVER_ERROR, other.to_string()),
        }
    }
}

fn join_error(e: tokio::task::JoinError) -> ApiError {
    ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, format!("worker failed: {e}"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifyResponse {
    pub label: String,
    pub decision: String,
    pub score: f64,
    pub version: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateSummary {
    pub version: u64,
    pub active: bool,
    pub family: Option<PipelineFamily>,
    pub tau: Option<f64>,
    pub buffer_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestResponse {
    pub ingested: usize,
    pub buffer_len: usize,
}

async fn classify_handler(State(app): State<Shared>, payload: Result<Json<LiveInput>, JsonRejection>) -> Result<Json<ClassifyResponse>, ApiError> {
    let Json(input) = payload?;
    if input.id.trim().is_empty() {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "id must not be empty"));
    }
    if input.embedding.is_empty() || input.embedding.iter().any(|v| !v.is_finite()) {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "embedding must be non-empty and finite"));
    }
    let routing = app.routing();
    let version = routing.version();
    let decision = route(&routing, &input.embedding)?;
    if let RouteDecision::Handled { label, score } = decision {
        let name = routing
            .pipeline()
            .and_then(|p| p.surrogate.labels.name(label))
            .ok_or_else(|| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "surrogate label outside its dictionary"))?;
        return Ok(Json(ClassifyResponse {
            label: name.to_owned(),
            decision: "handled".into(),
            score,
            version,
        }));
    }

    let teacher = app
        .teacher
        .clone()
        .ok_or_else(|| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "input deferred but no teacher is configured"))?;
    let worker = app.clone();
    let served = tokio::task::spawn_blocking(move || {
        let mut buffer = worker.buffer.lock().expect("buffer lock");
        if let Some(dim) = buffer.dim() {
            if dim != input.embedding.len() {
                return Err(RouterError::DimensionMismatch {
                    expected: dim,
                    found: input.embedding.len(),
                });
            }
        }
        let day = buffer.latest_day().unwrap_or(1);
        classify(&routing, &input, teacher.as_ref(), &mut buffer, day)
    })
    .await
    .map_err(join_error)??;
    Ok(Json(ClassifyResponse {
        label: served.label,
        decision: "deferred".into(),
        score: served.decision.score(),
        version,
    }))
}

async fn ingest_handler(State(app): State<Shared>, payload: Result<Json<Vec<TraceRecord>>, JsonRejection>) -> Result<Json<IngestResponse>, ApiError> {
    let Json(records) = payload?;
    let mut buffer = app.buffer.lock().expect("buffer lock");
    let ingested = buffer.ingest(records)?;
    Ok(Json(IngestResponse {
        ingested,
        buffer_len: buffer.len(),
    }))
}

async fn refit_handler(State(app): State<Shared>) -> Result<Json<VerdictSummary>, ApiError> {
    let _exclusive = app.refit.lock().await;
    let previous = app.routing();
    let snapshot = app.buffer.lock().expect("buffer lock").clone();
    let worker = app.clone();
    let (summary, state) = tokio::task::spawn_blocking(move || -> Result<_, CliError> {
        let refit = router::fit(&snapshot, &previous, &worker.router_cfg)?;
        let summary = crate::commands::persist_refit(&worker.workspace, &snapshot, &refit)?;
        Ok((summary, refit.state))
    })
    .await
    .map_err(join_error)??;
    *app.routing.write().expect("routing lock") = Arc::new(state);
    tracing::info!(version = summary.version, promoted = summary.promoted, "refit published");
    Ok(Json(summary))
}

async fn report_handler(State(app): State<Shared>) -> Result<Json<Report>, ApiError> {
    let ws = &app.workspace;
    let version = ws.latest_report_version()?.ok_or(CliError::Missing("report"))?;
    Ok(Json(ws.load_report(version)?))
}

async fn state_handler(State(app): State<Shared>) -> Json<StateSummary> {
    let routing = app.routing();
    Json(StateSummary {
        version: routing.version(),
        active: routing.is_active(),
        family: routing.pipeline().map(|p| p.family()),
        tau: routing.pipeline().and_then(|p| p.tau()),
        buffer_len: app.buffer_len(),
    })
}

pub fn app(state: Shared) -> Router {
    Router::new()
        .route("/classify", post(classify_handler))
        .route("/traces", post(ingest_handler))
        .route("/refit", post(refit_handler))
        .route("/report/latest", get(report_handler))
        .route("/state", get(state_handler))
        .with_state(state)
}

/// Serves until `shutdown` resolves, then flushes the buffer.
pub async fn serve(state: Shared, listener: TcpListener, shutdown: impl Future<Output = ()> + Send + 'static) -> Result<(), CliError> {
    axum::serve(listener, app(state.clone())).with_graceful_shutdown(shutdown).await?;
    state.flush()
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let terminate = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending().await,
        }
    };
    #[cfg(not(unix))]
    let terminate = std::future::pending::<()>();
    tokio::select! {
        () = ctrl_c => {},
        () = terminate => {},
    }
    tracing::info!("shutting down");
}

pub fn serve_blocking(cfg: &RunConfig, addr: SocketAddr) -> Result<Outcome, CliError> {
    let _ = tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .with_ansi(std::io::stderr().is_terminal())
        .try_init();
    let state = AppState::from_config(cfg)?;
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    runtime.block_on(async {
        let listener = TcpListener::bind(addr).await?;
        tracing::info!(addr = %listener.local_addr()?, version = state.routing().version(), "serving");
        serve(state.clone(), listener, shutdown_signal()).await
    })?;
    Ok(Outcome {
        exit_code: crate::commands::EXIT_OK,
        record: json!({ "addr": addr.to_string(), "buffer_len": state.buffer_len() }),
    })
}
