//! HTTP service: per-trajectory serialized ingestion, concurrent queries.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use serde_json::Value;
use stitch_core::intent::IngestError;
use stitch_core::records::{from_line, to_line, Record};
use stitch_core::store::{validate_trajectory_id, StoreError, StoreWriter};
use stitch_core::{
    Embedder, IngestSession, IngestionConfig, QueryRequest, RetrievalConfig, Store, TrajectoryStep,
};

use crate::config::ServiceConfig;
use crate::health::GatewayHandle;
use crate::output::{ErrorBody, HealthBody, StepAck, TrajectoryStats};

type SessionSlot = Arc<Mutex<Option<IngestSession<StoreWriter>>>>;

pub struct AppState {
    pub config: ServiceConfig,
    store: Store,
    gateway: GatewayHandle,
    embedder: Arc<dyn Embedder>,
    ingestion: IngestionConfig,
    retrieval: RetrievalConfig,
    sessions: Mutex<HashMap<String, SessionSlot>>,
}

/// Error mapped onto an HTTP status with a record body.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        let status = match &e {
            StoreError::NotFound(_) => StatusCode::NOT_FOUND,
            StoreError::InvalidId(_) | StoreError::InvalidSnippet(_) | StoreError::UnknownLabel(_) => {
                StatusCode::BAD_REQUEST
            }
            StoreError::OutOfOrder { .. } | StoreError::Locked(_) => StatusCode::CONFLICT,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

impl From<IngestError> for ApiError {
    fn from(e: IngestError) -> Self {
        match e {
            IngestError::OutOfOrder { .. } => Self::new(StatusCode::CONFLICT, e.to_string()),
            IngestError::InvalidStep(_) => Self::bad_request(e.to_string()),
            IngestError::Store(s) => s.into(),
            other => Self::new(StatusCode::INTERNAL_SERVER_ERROR, other.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            status: self.status.as_u16(),
            error: self.message,
        };
        record_response(self.status, &body)
    }
}

fn record_response<T: Record>(status: StatusCode, record: &T) -> Response {
    (status, [(header::CONTENT_TYPE, "application/json")], to_line(record)).into_response()
}

/// Parses a single-document record body; the `kind` field may be omitted.
fn parse_body<T: Record>(body: &Bytes) -> Result<T, ApiError> {
    let mut value: Value =
        serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("malformed body: {e}")))?;
    let obj = value
        .as_object_mut()
        .ok_or_else(|| ApiError::bad_request("body must be a JSON object"))?;
    obj.entry("kind").or_insert_with(|| Value::String(T::KIND.into()));
    from_line(&value.to_string(), 1).map_err(|e| ApiError::bad_request(e.to_string()))
}

impl AppState {
    pub fn new(
        config: ServiceConfig,
        gateway: GatewayHandle,
        embedder: Arc<dyn Embedder>,
        ingestion: IngestionConfig,
        mut retrieval: RetrievalConfig,
    ) -> anyhow::Result<Self> {
        config.validate()?;
        ingestion.validate()?;
        retrieval.token_budget = config.budget;
        retrieval.k_retrieve = config.k_retrieve;
        Ok(Self {
            store: Store::open(&config.store_root)?,
            config,
            gateway,
            embedder,
            ingestion,
            retrieval,
            sessions: Mutex::new(HashMap::new()),
        })
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    fn check_auth(&self, headers: &HeaderMap) -> Result<(), ApiError> {
        let Some(token) = &self.config.auth_token else {
            return Ok(());
        };
        let presented = headers
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "));
        if presented == Some(token.as_str()) {
            Ok(())
        } else {
            Err(ApiError::new(StatusCode::UNAUTHORIZED, "missing or invalid bearer token"))
        }
    }

    fn check_provider(&self) -> Result<(), ApiError> {
        if self.config.degraded || self.gateway.ensure_reachable() {
            Ok(())
        } else {
            Err(ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "model provider unreachable"))
        }
    }

    fn slot(&self, id: &str) -> SessionSlot {
        self.sessions
            .lock()
            .expect("session map lock")
            .entry(id.to_string())
            .or_default()
            .clone()
    }

    /// Appends one step; calls for the same trajectory run one at a time.
    pub fn append_step(&self, id: &str, step: TrajectoryStep) -> Result<StepAck, ApiError> {
        validate_trajectory_id(id)?;
        step.validate().map_err(|e| ApiError::bad_request(e.to_string()))?;
        let slot = self.slot(id);
        let mut guard = slot.lock().unwrap_or_else(|p| p.into_inner());
        if guard.is_none() {
            if !self.store.exists(id) && step.step_index != 0 {
                return Err(ApiError::new(StatusCode::NOT_FOUND, format!("trajectory `{id}` not found")));
            }
            self.check_provider()?;
            let writer = self.store.writer(id)?;
            *guard = Some(IngestSession::new(
                writer,
                self.gateway.gateway.clone(),
                self.embedder.clone(),
                self.ingestion.clone(),
            )?);
        } else {
            self.check_provider()?;
        }
        let session = guard.as_mut().expect("session opened above");
        match session.ingest_step(step) {
            Ok(snippet) => Ok(StepAck {
                trajectory_id: id.to_string(),
                snippet_id: snippet.summary_embedding_id.clone(),
                step_index: snippet.step_index(),
                intent: snippet.intent,
            }),
            Err(e) => {
                if !matches!(e, IngestError::OutOfOrder { .. } | IngestError::InvalidStep(_)) {
                    // Reopen from the last committed manifest on the next request.
                    *guard = None;
                }
                Err(e.into())
            }
        }
    }

    pub fn query(&self, id: &str, request: &QueryRequest) -> Result<stitch_core::QueryResponse, ApiError> {
        validate_trajectory_id(id)?;
        if request.query.trim().is_empty() {
            return Err(ApiError::bad_request("query text is empty"));
        }
        if request.budget == Some(0) || request.k_retrieve == Some(0) {
            return Err(ApiError::bad_request("budget and k_retrieve must be at least 1"));
        }
        let view = self.store.load_view(id)?;
        self.check_provider()?;
        Ok(stitch_core::retrieval::answer_query(
            &self.gateway.gateway,
            self.embedder.as_ref(),
            &view,
            request,
            &self.retrieval,
        ))
    }

    pub fn stats(&self, id: &str) -> Result<TrajectoryStats, ApiError> {
        validate_trajectory_id(id)?;
        let view = self.store.load_view(id)?;
        let manifest = self.store.manifest(id)?;
        Ok(TrajectoryStats::new(&view, &manifest))
    }

    pub fn health(&self) -> HealthBody {
        HealthBody {
            status: "ok".into(),
            provider: format!("{:?}", self.gateway.gateway.provider_kind()).to_lowercase(),
            provider_reachable: self.gateway.health.is_reachable(),
        }
    }
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
}

async fn post_step(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    headers: HeaderMap,
    body: Bytes,
) -> Result<Response, ApiError> {
    state.check_auth(&headers)?;
    let step: TrajectoryStep = parse_body(&body)?;
    let ack = blocking(move || state.append_step(&id, step)).await?;
    Ok(record_response(StatusCode::OK, &ack))
}

async fn post_query(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    headers: HeaderMap,
    body: Bytes,
) -> Result<Response, ApiError> {
    state.check_auth(&headers)?;
    let mut request: QueryRequest = parse_body(&body)?;
    request.trajectory_id = id.clone();
    let response = blocking(move || state.query(&id, &request)).await?;
    Ok(record_response(StatusCode::OK, &response))
}

async fn get_stats(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    headers: HeaderMap,
) -> Result<Response, ApiError> {
    state.check_auth(&headers)?;
    let stats = blocking(move || state.stats(&id)).await?;
    Ok(record_response(StatusCode::OK, &stats))
}

async fn healthz(State(state): State<Arc<AppState>>) -> Response {
    record_response(StatusCode::OK, &state.health())
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/trajectories/{id}/steps", post(post_step))
        .route("/trajectories/{id}/query", post(post_query))
        .route("/trajectories/{id}/stats", get(get_stats))
        .route("/healthz", get(healthz))
        .with_state(state)
}

/// Binds the configured address and serves until interrupted.
pub async fn serve(state: Arc<AppState>) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(&state.config.bind).await?;
    tracing::info!(addr = %listener.local_addr()?, "serving");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
