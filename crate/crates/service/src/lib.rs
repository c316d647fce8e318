//! Review queue over HTTP.
//!
//! Store mutations go through one mutex on a blocking thread, since a
//! reject verdict calls the model gateway to revise its proposal. Readers
//! get the last published [`Snapshot`] without touching that mutex.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock};

use axum::extract::{Path, Query, Request, State};
use axum::http::{HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chartflow_core::gateway::Gateway;
use chartflow_core::review::{ApiError, ApiErrorKind, ReviewStore, Snapshot, VerdictRequest, TOKEN_HEADER};
use chartflow_core::Error;
use serde::Deserialize;
use tokio::net::TcpListener;
use tower_http::services::ServeDir;
use tower_http::trace::TraceLayer;

pub struct AppState {
    store: Mutex<ReviewStore>,
    snapshot: RwLock<Arc<Snapshot>>,
    gateway: Arc<Gateway>,
    token: Option<String>,
}

impl AppState {
    /// `token: None` disables the header check.
    pub fn new(store: ReviewStore, gateway: Arc<Gateway>, token: Option<String>) -> Arc<Self> {
        let snapshot = RwLock::new(Arc::new(store.snapshot()));
        Arc::new(AppState {
            store: Mutex::new(store),
            snapshot,
            gateway,
            token,
        })
    }

    pub fn snapshot(&self) -> Arc<Snapshot> {
        self.snapshot.read().unwrap_or_else(|e| e.into_inner()).clone()
    }

    fn publish(&self, store: &ReviewStore) {
        *self.snapshot.write().unwrap_or_else(|e| e.into_inner()) = Arc::new(store.snapshot());
    }
}

pub struct ApiFailure(ApiError);

impl From<Error> for ApiFailure {
    fn from(e: Error) -> Self {
        ApiFailure(ApiError::from(&e))
    }
}

impl ApiFailure {
    fn new(kind: ApiErrorKind, message: impl Into<String>) -> Self {
        ApiFailure(ApiError {
            kind,
            message: message.into(),
        })
    }
}

pub fn status_of(kind: ApiErrorKind) -> StatusCode {
    match kind {
        ApiErrorKind::LeaseConflict | ApiErrorKind::AlreadyReviewed => StatusCode::CONFLICT,
        ApiErrorKind::UnknownInstance => StatusCode::NOT_FOUND,
        ApiErrorKind::Validation => StatusCode::UNPROCESSABLE_ENTITY,
        ApiErrorKind::StoreUnavailable => StatusCode::SERVICE_UNAVAILABLE,
        ApiErrorKind::BackendUnavailable => StatusCode::BAD_GATEWAY,
        ApiErrorKind::Unauthorized => StatusCode::UNAUTHORIZED,
        ApiErrorKind::Internal => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

impl IntoResponse for ApiFailure {
    fn into_response(self) -> Response {
        (status_of(self.0.kind), Json(self.0)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiFailure>;

/// Runs `f` against the store on a blocking thread, then republishes the
/// snapshot.
async fn with_store<T, F>(state: &Arc<AppState>, f: F) -> ApiResult<T>
where
    T: Send + 'static,
    F: FnOnce(&mut ReviewStore, &Gateway) -> chartflow_core::Result<T> + Send + 'static,
{
    let state = state.clone();
    tokio::task::spawn_blocking(move || {
        let mut store = state.store.lock().unwrap_or_else(|e| e.into_inner());
        let out = f(&mut store, &state.gateway);
        state.publish(&store);
        out
    })
    .await
    .map_err(|e| ApiFailure::new(ApiErrorKind::Internal, e.to_string()))?
    .map_err(ApiFailure::from)
}

#[derive(Deserialize)]
struct NextQuery {
    reviewer: String,
}

async fn next_pending(State(state): State<Arc<AppState>>, Query(q): Query<NextQuery>) -> ApiResult<Response> {
    if q.reviewer.trim().is_empty() {
        return Err(ApiFailure::new(ApiErrorKind::Validation, "reviewer must not be empty"));
    }
    let found = with_store(&state, move |store, _| {
        Ok(store.next_pending(&q.reviewer, chrono::Utc::now()))
    })
    .await?;
    Ok(match found {
        Some(instance) => Json(instance).into_response(),
        None => StatusCode::NO_CONTENT.into_response(),
    })
}

async fn submit_verdict(State(state): State<Arc<AppState>>, Json(req): Json<VerdictRequest>) -> ApiResult<Response> {
    let outcome = with_store(&state, move |store, gw| {
        store.submit_verdict(gw, &req.instance_id, req.verdict, chrono::Utc::now())
    })
    .await?;
    if let Some(w) = &outcome.warning {
        tracing::warn!(instance = %outcome.instance.id, "{w}");
    }
    Ok(Json(outcome).into_response())
}

async fn stats(State(state): State<Arc<AppState>>) -> Response {
    Json(state.snapshot().stats.clone()).into_response()
}

async fn proposals(State(state): State<Arc<AppState>>) -> Response {
    Json(state.snapshot().pool.proposals().to_vec()).into_response()
}

async fn instance(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    let snap = state.snapshot();
    let found = snap.instance(&id).ok_or(Error::UnknownInstance(id.clone()))?;
    Ok(Json(found).into_response())
}

async fn require_token(State(state): State<Arc<AppState>>, headers: HeaderMap, req: Request, next: Next) -> Response {
    if let Some(expected) = &state.token {
        let given = headers.get(TOKEN_HEADER).and_then(|v| v.to_str().ok());
        if given != Some(expected.as_str()) {
            return ApiFailure::new(ApiErrorKind::Unauthorized, "missing or wrong review token").into_response();
        }
    }
    next.run(req).await
}

/// Routes under `/api`, `/healthz`, and static UI files from `static_dir`.
pub fn router(state: Arc<AppState>, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/queue/next", get(next_pending))
        .route("/verdict", post(submit_verdict))
        .route("/stats", get(stats))
        .route("/proposals", get(proposals))
        .route("/instances/{id}", get(instance))
        .route_layer(middleware::from_fn_with_state(state.clone(), require_token));
    let app = Router::new()
        .nest("/api", api)
        .route("/healthz", get(|| async { "ok" }))
        .with_state(state)
        .layer(TraceLayer::new_for_http());
    match static_dir {
        Some(dir) => app.fallback_service(ServeDir::new(dir)),
        None => app,
    }
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    listener: TcpListener,
    app: Router,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let addr: Option<SocketAddr> = listener.local_addr().ok();
    tracing::info!(?addr, "review service listening");
    axum::serve(listener, app).with_graceful_shutdown(shutdown).await
}
