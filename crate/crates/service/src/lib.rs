//! HTTP service for blind annotation of a run's responses.
//!
//! Annotators authenticate with a bearer token, pull items one at a time from
//! their own shuffled queue and post Likert scores. Every accepted score is
//! appended and synced to `annotations.jsonl` before the request is answered.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::future::Future;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, HeaderMap, HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::Utc;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tower_http::cors::CorsLayer;
use tower_http::services::ServeDir;

use cprobe_core::annotation::{
    kappa_fully_rated, AnnotationError, AnnotationRecord, AnnotationSession, FleissKappaResult,
    LikertScore,
};
use cprobe_core::jsonl::JsonlAppender;
use cprobe_core::probe::CulturalDimension;
use cprobe_core::store::{RunStore, StoreError};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("run has no responses to annotate")]
    EmptyRun,
    #[error("run manifest lists no annotators")]
    EmptyRoster,
    #[error("address {0} is already in use")]
    AddressInUse(SocketAddr),
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: SocketAddr,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid CORS origin `{0}`")]
    InvalidOrigin(String),
    #[error("server error: {0}")]
    Serve(#[source] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub run_dir: PathBuf,
    pub bind: SocketAddr,
    /// Origin allowed to call the API from a browser.
    pub cors_origin: Option<String>,
    /// Static files served at `/` (the annotation UI build).
    pub ui_dir: Option<PathBuf>,
}

/// Shared server state.
pub struct AppState {
    session: AnnotationSession,
    /// token -> annotator id
    tokens: HashMap<String, String>,
    log: JsonlAppender,
    inner: Mutex<Progress>,
}

#[derive(Default)]
struct Progress {
    /// annotator -> items scored
    scored: HashMap<String, HashSet<String>>,
    /// Every record in submission order, for agreement.
    records: Vec<AnnotationRecord>,
}

impl AppState {
    /// Builds the session from the run store and replays existing annotations.
    ///
    /// Annotators without a configured token get a random one; the returned
    /// list pairs every annotator id with its token.
    pub fn load(store: &RunStore) -> Result<(Self, Vec<(String, String)>), ServiceError> {
        let manifest = store.manifest();
        let dataset = store.dataset()?;
        let responses = store.responses()?;
        if responses.is_empty() {
            return Err(ServiceError::EmptyRun);
        }
        if manifest.annotation.roster.is_empty() {
            return Err(ServiceError::EmptyRoster);
        }
        let session = AnnotationSession::new(
            manifest.run_id.clone(),
            &dataset,
            &responses,
            manifest.annotation.roster.clone(),
            manifest.annotation.session_seed,
        );
        let mut tokens = HashMap::new();
        let mut issued = Vec::new();
        for a in &session.roster {
            let token = a.token.clone().unwrap_or_else(random_token);
            tokens.insert(token.clone(), a.id.clone());
            issued.push((a.id.clone(), token));
        }
        let mut progress = Progress::default();
        for rec in store.annotations()? {
            let item_id = rec.response_ref.item_id();
            if session.item(&item_id).is_none() {
                continue;
            }
            progress
                .scored
                .entry(rec.annotator_id.clone())
                .or_default()
                .insert(item_id);
            progress.records.push(rec);
        }
        let state = AppState {
            session,
            tokens,
            log: store.annotations_log()?,
            inner: Mutex::new(progress),
        };
        Ok((state, issued))
    }

    pub fn session(&self) -> &AnnotationSession {
        &self.session
    }

    fn progress(&self) -> std::sync::MutexGuard<'_, Progress> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }
}

fn random_token() -> String {
    format!("{:032x}", rand::random::<u128>())
}

#[derive(Debug, Serialize)]
struct ApiError {
    code: &'static str,
    message: String,
}

fn error(status: StatusCode, code: &'static str, message: impl Into<String>) -> Response {
    (
        status,
        Json(ApiError {
            code,
            message: message.into(),
        }),
    )
        .into_response()
}

fn authenticate(state: &AppState, headers: &HeaderMap) -> Result<String, Response> {
    let unauthorized = || {
        error(
            StatusCode::UNAUTHORIZED,
            "unauthorized",
            "missing or unknown bearer token",
        )
    };
    let value = headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .ok_or_else(unauthorized)?;
    let token = value.strip_prefix("Bearer ").ok_or_else(unauthorized)?.trim();
    state.tokens.get(token).cloned().ok_or_else(unauthorized)
}

async fn next_item(State(state): State<Arc<AppState>>, headers: HeaderMap) -> Response {
    let annotator = match authenticate(&state, &headers) {
        Ok(a) => a,
        Err(r) => return r,
    };
    let progress = state.progress();
    let empty = HashSet::new();
    let scored = progress.scored.get(&annotator).unwrap_or(&empty);
    match state.session.next_for(&annotator, scored) {
        Some(item) => Json(item.payload()).into_response(),
        None => StatusCode::NO_CONTENT.into_response(),
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScoreBody {
    score: i64,
    #[serde(default)]
    note: Option<String>,
}

#[derive(Debug, Serialize)]
struct ScoreAck {
    item_id: String,
    score: i64,
    accepted: bool,
}

async fn submit_score(
    State(state): State<Arc<AppState>>,
    Path(item_id): Path<String>,
    headers: HeaderMap,
    body: Bytes,
) -> Response {
    let annotator = match authenticate(&state, &headers) {
        Ok(a) => a,
        Err(r) => return r,
    };
    let body: ScoreBody = match serde_json::from_slice(&body) {
        Ok(b) => b,
        Err(e) => return error(StatusCode::BAD_REQUEST, "bad_request", e.to_string()),
    };
    let score = match i8::try_from(body.score)
        .map_err(|_| AnnotationError::OutOfRange(body.score))
        .and_then(LikertScore::new)
    {
        Ok(s) => s,
        Err(e) => return error(StatusCode::BAD_REQUEST, "score_out_of_range", e.to_string()),
    };
    let Some(item) = state.session.item(&item_id) else {
        return error(StatusCode::NOT_FOUND, "unknown_item", format!("no item `{item_id}`"));
    };
    if !state.session.is_assigned(&annotator, &item_id) {
        return error(
            StatusCode::CONFLICT,
            "not_in_queue",
            format!("item `{item_id}` is not in the queue of `{annotator}`"),
        );
    }
    let record = AnnotationRecord {
        response_ref: item.response_ref.clone(),
        annotator_id: annotator.clone(),
        score,
        note: body.note.filter(|n| !n.trim().is_empty()),
        submitted_at: Utc::now(),
    };
    // Hold the lock across the write so log order matches memory order.
    let mut progress = state.progress();
    if let Err(e) = state.log.append(&record) {
        tracing::error!(error = %e, "annotation append failed");
        return error(StatusCode::INTERNAL_SERVER_ERROR, "storage", e.to_string());
    }
    progress
        .scored
        .entry(annotator)
        .or_default()
        .insert(item_id.clone());
    progress.records.push(record);
    Json(ScoreAck {
        item_id,
        score: i64::from(score.value()),
        accepted: true,
    })
    .into_response()
}

#[derive(Debug, Serialize)]
struct ProgressBody {
    annotator_id: String,
    scored: usize,
    total: usize,
    remaining: usize,
    /// Items scored per annotator across the roster.
    per_annotator: BTreeMap<String, usize>,
}

async fn progress(State(state): State<Arc<AppState>>, headers: HeaderMap) -> Response {
    let annotator = match authenticate(&state, &headers) {
        Ok(a) => a,
        Err(r) => return r,
    };
    let progress = state.progress();
    let queue = state.session.queue(&annotator);
    let mine = progress.scored.get(&annotator);
    let scored = queue
        .iter()
        .filter(|i| mine.is_some_and(|s| s.contains(&i.item_id)))
        .count();
    let per_annotator = state
        .session
        .roster
        .iter()
        .map(|a| {
            let n = progress.scored.get(&a.id).map_or(0, HashSet::len);
            (a.id.clone(), n)
        })
        .collect();
    Json(ProgressBody {
        annotator_id: annotator,
        scored,
        total: queue.len(),
        remaining: queue.len() - scored,
        per_annotator,
    })
    .into_response()
}

#[derive(Debug, Serialize)]
struct KappaBody {
    pooled: FleissKappaResult,
    per_dimension: BTreeMap<CulturalDimension, Option<FleissKappaResult>>,
}

fn kappa_of<'a>(records: impl Iterator<Item = &'a AnnotationRecord>) -> Option<FleissKappaResult> {
    kappa_fully_rated(records.map(|r| (r.response_ref.clone(), r.annotator_id.clone(), r.score)))
        .and_then(Result::ok)
}

async fn kappa(State(state): State<Arc<AppState>>, headers: HeaderMap) -> Response {
    if let Err(r) = authenticate(&state, &headers) {
        return r;
    }
    let progress = state.progress();
    let Some(pooled) = kappa_of(progress.records.iter()) else {
        return error(
            StatusCode::CONFLICT,
            "insufficient_overlap",
            "no item has been scored by two or more annotators",
        );
    };
    let dimension_of = |r: &AnnotationRecord| {
        state
            .session
            .item(&r.response_ref.item_id())
            .map(|i| i.dimension)
    };
    let per_dimension = CulturalDimension::ALL
        .into_iter()
        .map(|d| {
            let k = kappa_of(progress.records.iter().filter(|r| dimension_of(r) == Some(d)));
            (d, k)
        })
        .collect();
    Json(KappaBody {
        pooled,
        per_dimension,
    })
    .into_response()
}

async fn not_found() -> Response {
    error(StatusCode::NOT_FOUND, "not_found", "no such endpoint")
}

pub fn router(
    state: Arc<AppState>,
    cors_origin: Option<&str>,
    ui_dir: Option<&std::path::Path>,
) -> Result<Router, ServiceError> {
    let api = Router::new()
        .route("/api/session/next", get(next_item))
        .route("/api/items/{item_id}/score", post(submit_score))
        .route("/api/session/progress", get(progress))
        .route("/api/session/kappa", get(kappa))
        .route("/api/{*rest}", get(not_found).post(not_found));
    let mut app = match ui_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api.fallback(not_found),
    }
    .with_state(state);
    if let Some(origin) = cors_origin {
        let origin: HeaderValue = origin
            .parse()
            .map_err(|_| ServiceError::InvalidOrigin(origin.to_string()))?;
        app = app.layer(
            CorsLayer::new()
                .allow_origin(origin)
                .allow_methods([Method::GET, Method::POST])
                .allow_headers([header::AUTHORIZATION, header::CONTENT_TYPE]),
        );
    }
    Ok(app)
}

/// A bound, not yet running server.
pub struct Server {
    listener: tokio::net::TcpListener,
    app: Router,
    pub tokens: Vec<(String, String)>,
}

impl Server {
    pub async fn bind(config: &ServiceConfig) -> Result<Self, ServiceError> {
        let store = RunStore::open(&config.run_dir)?;
        let (state, tokens) = AppState::load(&store)?;
        let app = router(
            Arc::new(state),
            config.cors_origin.as_deref(),
            config.ui_dir.as_deref(),
        )?;
        let listener = tokio::net::TcpListener::bind(config.bind)
            .await
            .map_err(|source| match source.kind() {
                std::io::ErrorKind::AddrInUse => ServiceError::AddressInUse(config.bind),
                _ => ServiceError::Bind {
                    addr: config.bind,
                    source,
                },
            })?;
        Ok(Server {
            listener,
            app,
            tokens,
        })
    }

    pub fn local_addr(&self) -> std::io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    /// Serves until `shutdown` resolves, then finishes in-flight requests.
    pub async fn run(self, shutdown: impl Future<Output = ()> + Send + 'static) -> Result<(), ServiceError> {
        axum::serve(self.listener, self.app)
            .with_graceful_shutdown(shutdown)
            .await
            .map_err(ServiceError::Serve)
    }
}

/// Resolves on Ctrl-C or SIGTERM.
pub async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
}
