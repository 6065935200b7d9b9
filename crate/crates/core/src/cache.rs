//! Pull-through disk cache with request coalescing and watermark LRU eviction.
//!
//! Stored objects are reference counted: the index holds one reference and
//! every response being streamed holds another. Eviction skips entries with
//! outstanding readers, and a purged or evicted file is unlinked only when its
//! last reference goes away.

use std::collections::HashMap;
use std::future::Future;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::extract::{ConnectInfo, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode, Uri};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get};
use axum::{Json, Router};
use futures::future::{BoxFuture, FutureExt, Shared};
use futures::StreamExt;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use tokio::io::AsyncWriteExt;
use tokio::net::TcpListener;

use crate::accounting::{Direction, TransferRecord};
use crate::geo::GeoPoint;
use crate::lru::{Admission, BadWatermarks, LruIndex, Watermarks};
use crate::namespace::{normalize_path, ObjectPath};
use crate::origin::DEFAULT_HEARTBEAT_S;
use crate::registry::{unix_now, RegisterRequest, ResolutionResult, ServiceKind, ServiceRecord};
use crate::wire::{
    client_label, error_response, file_stream, http_client, parse_range, register_and_heartbeat, spawn_server,
    MeteredStream, RegistrationError, Reporter, ServiceHandle, X_CACHE, X_CLIENT_GEO, X_CLIENT_NAME, X_SERVICE_NAME,
};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CacheConfig {
    pub name: String,
    pub listen_addr: String,
    /// Filled in by launchers when left empty.
    #[serde(default)]
    pub director_url: String,
    pub location: GeoPoint,
    pub store_dir: PathBuf,
    pub capacity: u64,
    #[serde(default = "default_high")]
    pub high_watermark: f64,
    #[serde(default = "default_low")]
    pub low_watermark: f64,
    #[serde(default = "default_heartbeat")]
    pub heartbeat_s: u64,
}

fn default_high() -> f64 {
    Watermarks::default().high
}

fn default_low() -> f64 {
    Watermarks::default().low
}

fn default_heartbeat() -> u64 {
    DEFAULT_HEARTBEAT_S
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FetchFailure {
    #[error("unknown namespace: {0}")]
    UnknownNamespace(String),
    #[error("not found at origin: {0}")]
    NotFound(String),
    #[error("origin unreachable: {0}")]
    OriginUnreachable(String),
    #[error("cache storage: {0}")]
    Storage(String),
}

impl IntoResponse for FetchFailure {
    fn into_response(self) -> Response {
        let (status, kind) = match &self {
            FetchFailure::UnknownNamespace(_) => (StatusCode::NOT_FOUND, "UnknownNamespace"),
            FetchFailure::NotFound(_) => (StatusCode::NOT_FOUND, "NotFound"),
            FetchFailure::OriginUnreachable(_) => (StatusCode::BAD_GATEWAY, "OriginUnreachable"),
            FetchFailure::Storage(_) => (StatusCode::INSUFFICIENT_STORAGE, "StorageFull"),
        };
        error_response(status, kind, self)
    }
}

/// Source of objects on a miss.
pub trait Upstream: Send + Sync + 'static {
    /// Writes the full object to `dest` and returns its size.
    fn fetch(&self, path: &ObjectPath, dest: &Path) -> impl Future<Output = Result<u64, FetchFailure>> + Send;
}

#[derive(Debug)]
struct StoredObject {
    file: PathBuf,
    size: u64,
}

impl Drop for StoredObject {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.file);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum CacheStatus {
    Hit,
    Miss,
}

impl CacheStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            CacheStatus::Hit => "HIT",
            CacheStatus::Miss => "MISS",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub bytes_used: u64,
    pub capacity: u64,
    pub object_count: u64,
}

type FetchResult = Result<Arc<StoredObject>, FetchFailure>;

struct StoreState {
    index: LruIndex<ObjectPath>,
    files: HashMap<ObjectPath, Arc<StoredObject>>,
    inflight: HashMap<ObjectPath, Shared<BoxFuture<'static, FetchResult>>>,
}

impl StoreState {
    fn evict(&mut self) -> Vec<ObjectPath> {
        let StoreState { index, files, .. } = self;
        let evicted = index.evict_to_watermark(|k| files.get(k).is_some_and(|f| Arc::strong_count(f) > 1));
        for k in &evicted {
            files.remove(k);
        }
        evicted
    }
}

struct StoreInner {
    objects_dir: PathBuf,
    tmp_dir: PathBuf,
    state: Mutex<StoreState>,
    next_file: AtomicU64,
    upstream_fetches: AtomicU64,
}

/// Read access to one cached (or passed-through) object.
pub struct Lease {
    object: Option<Arc<StoredObject>>,
    store: Arc<StoreInner>,
}

impl Lease {
    pub fn file(&self) -> &Path {
        &self.object.as_ref().expect("live lease").file
    }

    pub fn size(&self) -> u64 {
        self.object.as_ref().expect("live lease").size
    }
}

impl Drop for Lease {
    fn drop(&mut self) {
        self.object.take();
        let mut st = self.store.state.lock();
        if st.index.over_high_watermark() {
            let evicted = st.evict();
            if !evicted.is_empty() {
                tracing::debug!(count = evicted.len(), "deferred eviction");
            }
        }
    }
}

pub struct CacheStore<U> {
    inner: Arc<StoreInner>,
    upstream: Arc<U>,
}

impl<U> Clone for CacheStore<U> {
    fn clone(&self) -> Self {
        CacheStore {
            inner: self.inner.clone(),
            upstream: self.upstream.clone(),
        }
    }
}

impl<U: Upstream> CacheStore<U> {
    /// Opens a store under `dir`, discarding anything left by a previous run.
    pub fn open(dir: &Path, capacity: u64, marks: Watermarks, upstream: U) -> std::io::Result<Self> {
        let objects_dir = dir.join("objects");
        let tmp_dir = dir.join("tmp");
        for d in [&objects_dir, &tmp_dir] {
            if d.exists() {
                std::fs::remove_dir_all(d)?;
            }
            std::fs::create_dir_all(d)?;
        }
        Ok(CacheStore {
            inner: Arc::new(StoreInner {
                objects_dir,
                tmp_dir,
                state: Mutex::new(StoreState {
                    index: LruIndex::new(capacity, marks),
                    files: HashMap::new(),
                    inflight: HashMap::new(),
                }),
                next_file: AtomicU64::new(0),
                upstream_fetches: AtomicU64::new(0),
            }),
            upstream: Arc::new(upstream),
        })
    }

    pub fn upstream(&self) -> &U {
        &self.upstream
    }

    /// Number of fetches issued to the upstream so far.
    pub fn upstream_fetches(&self) -> u64 {
        self.inner.upstream_fetches.load(Ordering::SeqCst)
    }

    /// Serves `path` from disk, fetching it once on a miss however many callers ask.
    pub async fn get(&self, path: &ObjectPath) -> Result<(Lease, CacheStatus), FetchFailure> {
        let pending = {
            let mut st = self.inner.state.lock();
            if let Some(obj) = st.files.get(path).cloned() {
                st.index.touch(path);
                return Ok((self.lease(obj), CacheStatus::Hit));
            }
            match st.inflight.get(path) {
                Some(f) => f.clone(),
                None => {
                    let task = tokio::spawn(fetch_and_admit(self.inner.clone(), self.upstream.clone(), path.clone()));
                    let shared = async move {
                        task.await
                            .unwrap_or_else(|e| Err(FetchFailure::Storage(format!("fetch task failed: {e}"))))
                    }
                    .boxed()
                    .shared();
                    st.inflight.insert(path.clone(), shared.clone());
                    shared
                }
            }
        };
        let obj = pending.await?;
        Ok((self.lease(obj), CacheStatus::Miss))
    }

    fn lease(&self, obj: Arc<StoredObject>) -> Lease {
        Lease {
            object: Some(obj),
            store: self.inner.clone(),
        }
    }

    /// Drops `path` from the cache; readers already streaming it are unaffected.
    pub fn purge(&self, path: &ObjectPath) -> bool {
        let mut st = self.inner.state.lock();
        st.index.remove(path);
        st.files.remove(path).is_some()
    }

    pub fn usage(&self) -> Usage {
        let st = self.inner.state.lock();
        Usage {
            bytes_used: st.index.used(),
            capacity: st.index.capacity(),
            object_count: st.index.len() as u64,
        }
    }

    pub fn cached_paths(&self) -> Vec<ObjectPath> {
        let mut paths: Vec<_> = self.inner.state.lock().index.keys().cloned().collect();
        paths.sort();
        paths
    }
}

async fn fetch_and_admit<U: Upstream>(inner: Arc<StoreInner>, upstream: Arc<U>, path: ObjectPath) -> FetchResult {
    let n = inner.next_file.fetch_add(1, Ordering::SeqCst);
    let tmp = inner.tmp_dir.join(format!("{n}.part"));
    inner.upstream_fetches.fetch_add(1, Ordering::SeqCst);
    let fetched = upstream.fetch(&path, &tmp).await;
    let mut st = inner.state.lock();
    st.inflight.remove(&path);
    let size = match fetched {
        Ok(size) => size,
        Err(e) => {
            let _ = std::fs::remove_file(&tmp);
            return Err(e);
        }
    };
    if size > st.index.max_object() {
        tracing::debug!(%path, size, "object exceeds cache budget; passing through");
        return Ok(Arc::new(StoredObject { file: tmp, size }));
    }
    let file = inner.objects_dir.join(format!("{n}.obj"));
    if let Err(e) = std::fs::rename(&tmp, &file) {
        let _ = std::fs::remove_file(&tmp);
        return Err(FetchFailure::Storage(e.to_string()));
    }
    let obj = Arc::new(StoredObject { file, size });
    st.files.insert(path.clone(), obj.clone());
    let admission = st.index.insert(path.clone(), size);
    debug_assert_eq!(admission, Admission::Stored);
    let evicted = st.evict();
    if !evicted.is_empty() {
        tracing::debug!(?evicted, "evicted to low watermark");
    }
    Ok(obj)
}

/// Upstream that asks the director for the origin and downloads from it.
pub struct DirectorUpstream {
    pub http: reqwest::Client,
    pub director_url: String,
    pub name: String,
    pub location: GeoPoint,
    pub reporter: Reporter,
}

impl DirectorUpstream {
    async fn resolve(&self, path: &ObjectPath) -> Result<ResolutionResult, FetchFailure> {
        let url = format!("{}/api/v1/resolve", self.director_url.trim_end_matches('/'));
        let resp = self
            .http
            .get(&url)
            .query(&[("path", path.to_string())])
            .header(X_CLIENT_GEO, self.location.to_string())
            .send()
            .await
            .map_err(|e| FetchFailure::OriginUnreachable(format!("director: {e}")))?;
        match resp.status().as_u16() {
            200 => resp
                .json()
                .await
                .map_err(|e| FetchFailure::OriginUnreachable(format!("director reply: {e}"))),
            404 => Err(FetchFailure::UnknownNamespace(path.to_string())),
            s => Err(FetchFailure::OriginUnreachable(format!("director status {s}"))),
        }
    }
}

impl Upstream for DirectorUpstream {
    async fn fetch(&self, path: &ObjectPath, dest: &Path) -> Result<u64, FetchFailure> {
        let started = Instant::now();
        let resolution = self.resolve(path).await?;
        let unreachable = |e: String| FetchFailure::OriginUnreachable(format!("{}: {e}", resolution.origin_url));
        let resp = self
            .http
            .get(&resolution.origin_url)
            .header(X_CLIENT_NAME, &self.name)
            .send()
            .await
            .map_err(|e| unreachable(e.to_string()))?;
        match resp.status().as_u16() {
            200 => {}
            404 => return Err(FetchFailure::NotFound(path.to_string())),
            s => return Err(unreachable(format!("status {s}"))),
        }
        let expected = resp.content_length();
        let origin = resp
            .headers()
            .get(X_SERVICE_NAME)
            .and_then(|v| v.to_str().ok())
            .map(str::to_owned)
            .unwrap_or_else(|| service_host(&resolution.origin_url));
        let storage = |e: std::io::Error| FetchFailure::Storage(e.to_string());
        let mut file = tokio::fs::File::create(dest).await.map_err(storage)?;
        let mut body = resp.bytes_stream();
        let mut size = 0u64;
        while let Some(chunk) = body.next().await {
            let chunk = chunk.map_err(|e| unreachable(e.to_string()))?;
            size += chunk.len() as u64;
            file.write_all(&chunk).await.map_err(storage)?;
        }
        file.flush().await.map_err(storage)?;
        if expected.is_some_and(|n| n != size) {
            return Err(unreachable(format!("short body: {size} of {expected:?} bytes")));
        }
        self.reporter.emit(TransferRecord {
            service: self.name.clone(),
            kind: ServiceKind::Cache,
            path: path.clone(),
            direction: Direction::Ingest,
            bytes: size,
            cache_hit: None,
            client: origin,
            timestamp: unix_now(),
            duration_ms: started.elapsed().as_millis() as u64,
        });
        Ok(size)
    }
}

fn service_host(url: &str) -> String {
    reqwest::Url::parse(url)
        .ok()
        .and_then(|u| u.host_str().map(|h| format!("{h}:{}", u.port_or_known_default().unwrap_or(80))))
        .unwrap_or_else(|| url.to_owned())
}

pub struct CacheState<U> {
    pub name: String,
    pub store: CacheStore<U>,
    pub reporter: Reporter,
}

pub fn router<U: Upstream>(state: Arc<CacheState<U>>) -> Router {
    Router::new()
        .route("/data/{*rest}", get(get_cached::<U>))
        .route("/admin/purge/{*rest}", delete(purge::<U>))
        .route("/admin/usage", get(usage::<U>))
        .with_state(state)
}

fn path_after(uri: &Uri, mount: &str) -> Result<ObjectPath, Response> {
    let raw = uri.path().strip_prefix(mount).unwrap_or_default();
    normalize_path(raw).map_err(|e| error_response(StatusCode::BAD_REQUEST, "MalformedPath", e))
}

async fn get_cached<U: Upstream>(
    State(state): State<Arc<CacheState<U>>>,
    ConnectInfo(peer): ConnectInfo<SocketAddr>,
    headers: HeaderMap,
    uri: Uri,
) -> Response {
    let mut resp = serve_cached(&state, peer, &headers, &uri).await.unwrap_or_else(|r| r);
    if let Ok(v) = HeaderValue::from_str(&state.name) {
        resp.headers_mut().insert(X_SERVICE_NAME, v);
    }
    resp
}

async fn serve_cached<U: Upstream>(
    state: &Arc<CacheState<U>>,
    peer: SocketAddr,
    headers: &HeaderMap,
    uri: &Uri,
) -> Result<Response, Response> {
    let started = Instant::now();
    let path = path_after(uri, "/data")?;
    let (lease, status) = state.store.get(&path).await.map_err(IntoResponse::into_response)?;
    let size = lease.size();
    let range = match headers.get(header::RANGE) {
        Some(v) => Some(
            parse_range(v.to_str().unwrap_or_default(), size)
                .map_err(|e| error_response(StatusCode::RANGE_NOT_SATISFIABLE, "BadRange", e))?,
        ),
        None => None,
    };
    let (offset, len) = range.map(|r| (r.start, r.byte_count())).unwrap_or((0, size));
    let stream = file_stream(lease.file(), offset, len)
        .await
        .map_err(|e| FetchFailure::Storage(e.to_string()).into_response())?;
    let client = client_label(headers, peer);
    let st = state.clone();
    let metered = MeteredStream::new(stream, move |bytes| {
        st.reporter.emit(TransferRecord {
            service: st.name.clone(),
            kind: ServiceKind::Cache,
            path,
            direction: Direction::Serve,
            bytes,
            cache_hit: Some(status == CacheStatus::Hit),
            client,
            timestamp: unix_now(),
            duration_ms: started.elapsed().as_millis() as u64,
        });
    })
    .with_guard(lease);
    let mut resp = Response::new(Body::from_stream(metered));
    let h = resp.headers_mut();
    h.insert(header::CONTENT_LENGTH, HeaderValue::from(len));
    h.insert(header::ACCEPT_RANGES, HeaderValue::from_static("bytes"));
    h.insert(X_CACHE, HeaderValue::from_static(status.as_str()));
    if let Some(r) = range {
        *resp.status_mut() = StatusCode::PARTIAL_CONTENT;
        resp.headers_mut()
            .insert(header::CONTENT_RANGE, HeaderValue::from_str(&r.content_range(size)).expect("ascii"));
    }
    Ok(resp)
}

async fn purge<U: Upstream>(State(state): State<Arc<CacheState<U>>>, uri: Uri) -> Response {
    match path_after(&uri, "/admin/purge") {
        Ok(path) => {
            let removed = state.store.purge(&path);
            Json(serde_json::json!({ "ok": true, "removed": removed })).into_response()
        }
        Err(resp) => resp,
    }
}

async fn usage<U: Upstream>(State(state): State<Arc<CacheState<U>>>) -> Response {
    Json(state.store.usage()).into_response()
}

#[derive(Debug, thiserror::Error)]
pub enum StartError {
    #[error(transparent)]
    Watermarks(#[from] BadWatermarks),
    #[error("cache store {path}: {source}")]
    Store {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("listen on {addr}: {source}")]
    Bind {
        addr: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Registration(#[from] RegistrationError),
}

/// Binds, registers with the director and starts heartbeating.
pub async fn start(config: &CacheConfig) -> Result<ServiceHandle, StartError> {
    let marks = Watermarks::new(config.high_watermark, config.low_watermark)?;
    let http = http_client();
    let reporter = Reporter::spawn(&config.director_url, http.clone());
    let upstream = DirectorUpstream {
        http: http.clone(),
        director_url: config.director_url.clone(),
        name: config.name.clone(),
        location: config.location,
        reporter: reporter.clone(),
    };
    let store = CacheStore::open(&config.store_dir, config.capacity, marks, upstream).map_err(|source| {
        StartError::Store {
            path: config.store_dir.clone(),
            source,
        }
    })?;
    let state = Arc::new(CacheState {
        name: config.name.clone(),
        store,
        reporter,
    });
    let bind = |source| StartError::Bind {
        addr: config.listen_addr.clone(),
        source,
    };
    let listener = TcpListener::bind(&config.listen_addr).await.map_err(bind)?;
    let mut handle = spawn_server(listener, router(state)).map_err(bind)?;
    let record = ServiceRecord::cache(&config.name, &handle.base_url(), config.location);
    let heartbeat = register_and_heartbeat(
        http,
        config.director_url.clone(),
        RegisterRequest::from(&record),
        Duration::from_secs(config.heartbeat_s.max(1)),
    )
    .await?;
    handle.attach(heartbeat);
    tracing::info!(name = %config.name, addr = %handle.addr, "cache listening");
    Ok(handle)
}
