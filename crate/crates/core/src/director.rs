//! The director: registration, resolution, redirection and the accounting sink.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{ConnectInfo, Query, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tokio::net::TcpListener;

use crate::accounting::{AccountingError, AccountingLog, TransferRecord};
use crate::geo::{load_geo_table, lookup_client, GeoPoint, GeoTable};
use crate::namespace::normalize_path;
use crate::registry::{RegisterRequest, Registry, RegistryError, DEFAULT_STALENESS_S};
use crate::wire::{error_response, spawn_server, ServiceHandle, X_ALT_SOURCES, X_CLIENT_GEO};

/// Director configuration file: `{listen_addr, geo_table_path, staleness_s}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DirectorConfig {
    pub listen_addr: String,
    #[serde(default)]
    pub geo_table_path: Option<PathBuf>,
    #[serde(default = "default_staleness")]
    pub staleness_s: u64,
    /// Directory holding the accounting log; in-memory only when absent.
    #[serde(default)]
    pub data_dir: Option<PathBuf>,
}

fn default_staleness() -> u64 {
    DEFAULT_STALENESS_S
}

impl DirectorConfig {
    pub fn local(data_dir: Option<PathBuf>) -> Self {
        DirectorConfig {
            listen_addr: "127.0.0.1:0".into(),
            geo_table_path: None,
            staleness_s: DEFAULT_STALENESS_S,
            data_dir,
        }
    }

    pub fn accounting_path(&self) -> Option<PathBuf> {
        self.data_dir.as_ref().map(|d| d.join("transfers.jsonl"))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DirectorError {
    #[error("geo table {path}: {reason}")]
    GeoTable { path: PathBuf, reason: String },
    #[error(transparent)]
    Accounting(#[from] AccountingError),
    #[error("listen on {addr}: {source}")]
    Bind {
        addr: String,
        #[source]
        source: std::io::Error,
    },
}

pub struct DirectorState {
    pub registry: Registry,
    pub accounting: AccountingLog,
    pub geo: GeoTable,
}

impl DirectorState {
    pub fn from_config(config: &DirectorConfig) -> Result<Self, DirectorError> {
        let geo = match &config.geo_table_path {
            Some(path) => {
                let fail = |reason: String| DirectorError::GeoTable {
                    path: path.clone(),
                    reason,
                };
                let file = std::fs::File::open(path).map_err(|e| fail(e.to_string()))?;
                load_geo_table(file).map_err(|e| fail(e.to_string()))?
            }
            None => GeoTable::default(),
        };
        let accounting = match config.accounting_path() {
            Some(path) => AccountingLog::open(path)?,
            None => AccountingLog::in_memory(),
        };
        Ok(DirectorState {
            registry: Registry::new(config.staleness_s),
            accounting,
            geo,
        })
    }
}

pub fn router(state: Arc<DirectorState>) -> Router {
    Router::new()
        .route("/api/v1/register", post(register))
        .route("/api/v1/resolve", get(resolve))
        .route("/api/v1/redirect", get(redirect))
        .route("/api/v1/services", get(services))
        .route("/api/v1/accounting", post(accounting))
        .route("/api/v1/stats", get(stats))
        .route("/api/v1/records", get(records))
        .with_state(state)
}

/// Binds `config.listen_addr` and serves the director API.
pub async fn start(config: &DirectorConfig) -> Result<(ServiceHandle, Arc<DirectorState>), DirectorError> {
    let state = Arc::new(DirectorState::from_config(config)?);
    let listener = TcpListener::bind(&config.listen_addr)
        .await
        .map_err(|source| DirectorError::Bind {
            addr: config.listen_addr.clone(),
            source,
        })?;
    let handle = spawn_server(listener, router(state.clone())).map_err(|source| DirectorError::Bind {
        addr: config.listen_addr.clone(),
        source,
    })?;
    tracing::info!(addr = %handle.addr, "director listening");
    Ok((handle, state))
}

fn registry_error(e: RegistryError) -> Response {
    match e {
        RegistryError::DuplicatePrefix { .. } => error_response(StatusCode::CONFLICT, "DuplicatePrefix", e),
        RegistryError::InvalidRecord(_) => error_response(StatusCode::BAD_REQUEST, "InvalidRecord", e),
        RegistryError::UnknownNamespace(_) => error_response(StatusCode::NOT_FOUND, "UnknownNamespace", e),
    }
}

async fn register(State(state): State<Arc<DirectorState>>, body: Bytes) -> Response {
    let request: RegisterRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return error_response(StatusCode::BAD_REQUEST, "InvalidRecord", e),
    };
    let name = request.name.clone();
    match request.into_record().and_then(|r| state.registry.register(r)) {
        Ok(()) => {
            tracing::debug!(%name, "registered");
            Json(serde_json::json!({ "ok": true })).into_response()
        }
        Err(e) => registry_error(e),
    }
}

#[derive(Debug, Deserialize)]
struct PathQuery {
    path: Option<String>,
}

/// Client location: `X-Client-Geo` override, else GeoTable lookup of the peer.
fn client_geo(state: &DirectorState, headers: &HeaderMap, peer: SocketAddr) -> Result<Option<GeoPoint>, Response> {
    let override_geo = match headers.get(X_CLIENT_GEO) {
        Some(v) => {
            let text = v.to_str().unwrap_or_default();
            Some(
                text.parse::<GeoPoint>()
                    .map_err(|e| error_response(StatusCode::BAD_REQUEST, "BadClientGeo", e))?,
            )
        }
        None => None,
    };
    Ok(lookup_client(&state.geo, peer.ip(), override_geo))
}

fn resolve_request(
    state: &DirectorState,
    query: PathQuery,
    headers: &HeaderMap,
    peer: SocketAddr,
) -> Result<crate::registry::ResolutionResult, Response> {
    let raw = query
        .path
        .ok_or_else(|| error_response(StatusCode::BAD_REQUEST, "MalformedPath", "missing path parameter"))?;
    let path = normalize_path(&raw).map_err(|e| error_response(StatusCode::BAD_REQUEST, "MalformedPath", e))?;
    let client = client_geo(state, headers, peer)?;
    state.registry.resolve(&path, client).map_err(registry_error)
}

async fn resolve(
    State(state): State<Arc<DirectorState>>,
    ConnectInfo(peer): ConnectInfo<SocketAddr>,
    headers: HeaderMap,
    Query(query): Query<PathQuery>,
) -> Response {
    match resolve_request(&state, query, &headers, peer) {
        Ok(result) => Json(result).into_response(),
        Err(resp) => resp,
    }
}

async fn redirect(
    State(state): State<Arc<DirectorState>>,
    ConnectInfo(peer): ConnectInfo<SocketAddr>,
    headers: HeaderMap,
    Query(query): Query<PathQuery>,
) -> Response {
    let result = match resolve_request(&state, query, &headers, peer) {
        Ok(r) => r,
        Err(resp) => return resp,
    };
    let (location, alternates) = result.redirect_target();
    let mut resp = StatusCode::TEMPORARY_REDIRECT.into_response();
    let h = resp.headers_mut();
    match HeaderValue::from_str(&location) {
        Ok(v) => h.insert(header::LOCATION, v),
        Err(e) => return error_response(StatusCode::INTERNAL_SERVER_ERROR, "Internal", e),
    };
    if let Ok(v) = HeaderValue::from_str(&alternates.join(",")) {
        h.insert(X_ALT_SOURCES, v);
    }
    resp
}

async fn services(State(state): State<Arc<DirectorState>>) -> Response {
    Json(state.registry.list_services()).into_response()
}

async fn accounting(State(state): State<Arc<DirectorState>>, body: Bytes) -> Response {
    let record: TransferRecord = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return error_response(StatusCode::BAD_REQUEST, "InvalidRecord", e),
    };
    match state.accounting.append(record) {
        Ok(()) => StatusCode::NO_CONTENT.into_response(),
        Err(e @ AccountingError::InvalidRecord(_)) => error_response(StatusCode::BAD_REQUEST, "InvalidRecord", e),
        Err(e) => error_response(StatusCode::INTERNAL_SERVER_ERROR, "AccountingIo", e),
    }
}

#[derive(Debug, Deserialize)]
struct StatsQuery {
    service: Option<String>,
    since: Option<u64>,
}

async fn stats(State(state): State<Arc<DirectorState>>, Query(q): Query<StatsQuery>) -> Response {
    Json(state.accounting.stats(q.service.as_deref(), q.since)).into_response()
}

async fn records(State(state): State<Arc<DirectorState>>, Query(q): Query<StatsQuery>) -> Response {
    let records: Vec<TransferRecord> = state
        .accounting
        .snapshot()
        .into_iter()
        .filter(|r| q.service.as_ref().is_none_or(|s| &r.service == s))
        .filter(|r| q.since.is_none_or(|t| r.timestamp >= t))
        .collect();
    Json(records).into_response()
}
