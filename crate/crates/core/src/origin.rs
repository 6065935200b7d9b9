//! Origin: exports a local directory as one federation prefix.

use std::net::SocketAddr;
use std::path::{Component, Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant, UNIX_EPOCH};

use axum::body::Body;
use axum::extract::{ConnectInfo, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode, Uri};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::Router;
use futures::{Stream, StreamExt};
use serde::{Deserialize, Serialize};
use tokio::io::AsyncWriteExt;
use tokio::net::TcpListener;

use crate::accounting::{Direction, TransferRecord};
use crate::geo::GeoPoint;
use crate::namespace::{normalize_path, NamespacePrefix, ObjectPath};
use crate::registry::{unix_now, RegisterRequest, ServiceKind, ServiceRecord};
use crate::wire::{
    client_label, error_response, file_stream, http_client, parse_range, register_and_heartbeat, spawn_server,
    MeteredStream, RegistrationError, Reporter, ServiceHandle, X_MTIME, X_SERVICE_NAME,
};

pub const DEFAULT_HEARTBEAT_S: u64 = 100;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OriginConfig {
    pub name: String,
    pub prefix: NamespacePrefix,
    pub root_dir: PathBuf,
    /// Filled in by launchers when left empty.
    #[serde(default)]
    pub director_url: String,
    pub listen_addr: String,
    pub location: GeoPoint,
    #[serde(default = "default_heartbeat")]
    pub heartbeat_s: u64,
    /// Refuse writes that would grow the exported tree beyond this many bytes.
    #[serde(default)]
    pub quota_bytes: Option<u64>,
}

fn default_heartbeat() -> u64 {
    DEFAULT_HEARTBEAT_S
}

#[derive(Debug, thiserror::Error)]
pub enum OriginError {
    #[error("{0} not found")]
    NotFound(ObjectPath),
    #[error("forbidden: {0}")]
    Forbidden(String),
    #[error("storage full: need {needed} bytes, {available} available")]
    StorageFull { needed: u64, available: u64 },
    #[error("Content-Length required")]
    LengthRequired,
    #[error("body ended after {got} of {expected} bytes")]
    ShortBody { got: u64, expected: u64 },
    #[error("root directory {0} is not a directory")]
    BadRoot(PathBuf),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl OriginError {
    fn status(&self) -> (StatusCode, &'static str) {
        match self {
            OriginError::NotFound(_) => (StatusCode::NOT_FOUND, "NotFound"),
            OriginError::Forbidden(_) => (StatusCode::FORBIDDEN, "Forbidden"),
            OriginError::StorageFull { .. } => (StatusCode::INSUFFICIENT_STORAGE, "StorageFull"),
            OriginError::LengthRequired => (StatusCode::LENGTH_REQUIRED, "LengthRequired"),
            OriginError::ShortBody { .. } => (StatusCode::BAD_REQUEST, "ShortBody"),
            OriginError::BadRoot(_) | OriginError::Io(_) => (StatusCode::INTERNAL_SERVER_ERROR, "Io"),
        }
    }
}

impl IntoResponse for OriginError {
    fn into_response(self) -> Response {
        let (status, kind) = self.status();
        error_response(status, kind, self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectStat {
    pub size: u64,
    /// Seconds since the Unix epoch.
    pub mtime: u64,
}

/// Filesystem side of an origin: maps object paths under `prefix` onto `root`.
#[derive(Debug, Clone)]
pub struct OriginStore {
    prefix: NamespacePrefix,
    root: PathBuf,
    quota_bytes: Option<u64>,
}

impl OriginStore {
    pub fn new(prefix: NamespacePrefix, root_dir: &Path, quota_bytes: Option<u64>) -> Result<Self, OriginError> {
        if !root_dir.is_dir() {
            return Err(OriginError::BadRoot(root_dir.to_path_buf()));
        }
        Ok(OriginStore {
            prefix,
            root: root_dir.canonicalize()?,
            quota_bytes,
        })
    }

    pub fn prefix(&self) -> &NamespacePrefix {
        &self.prefix
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn mapped(&self, path: &ObjectPath) -> Result<PathBuf, OriginError> {
        let suffix = path
            .strip_prefix(&self.prefix)
            .ok_or_else(|| OriginError::Forbidden(format!("{path} is outside {}", self.prefix)))?;
        if suffix.is_empty() {
            return Err(OriginError::Forbidden(format!("{path} names the export root")));
        }
        let mut file = self.root.clone();
        for seg in suffix {
            // ObjectPath already forbids these; refuse anyway rather than trust callers
            let comp = Path::new(seg).components().collect::<Vec<_>>();
            if comp.len() != 1 || !matches!(comp[0], Component::Normal(_)) {
                return Err(OriginError::Forbidden(format!("segment {seg:?}")));
            }
            file.push(seg);
        }
        Ok(file)
    }

    /// Existing regular file for `path`, verified to live under the root.
    pub fn locate(&self, path: &ObjectPath) -> Result<PathBuf, OriginError> {
        if !path.starts_with(&self.prefix) || path == &self.prefix {
            return Err(OriginError::NotFound(path.clone()));
        }
        let file = self.mapped(path)?;
        let real = match file.canonicalize() {
            Ok(r) => r,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(OriginError::NotFound(path.clone())),
            Err(e) => return Err(e.into()),
        };
        if !real.starts_with(&self.root) {
            return Err(OriginError::Forbidden(format!("{path} resolves outside the export root")));
        }
        if !real.is_file() {
            return Err(OriginError::NotFound(path.clone()));
        }
        Ok(real)
    }

    pub fn stat_object(&self, path: &ObjectPath) -> Result<ObjectStat, OriginError> {
        let meta = std::fs::metadata(self.locate(path)?)?;
        let mtime = meta
            .modified()
            .ok()
            .and_then(|t| t.duration_since(UNIX_EPOCH).ok())
            .map(|d| d.as_secs())
            .unwrap_or(0);
        Ok(ObjectStat { size: meta.len(), mtime })
    }

    /// Target file for a write, with every existing ancestor checked against the root.
    pub fn write_target(&self, path: &ObjectPath) -> Result<PathBuf, OriginError> {
        let file = self.mapped(path)?;
        let mut probe = file.clone();
        loop {
            match probe.canonicalize() {
                Ok(real) => {
                    if !real.starts_with(&self.root) {
                        return Err(OriginError::Forbidden(format!("{path} resolves outside the export root")));
                    }
                    if probe == file && real.is_dir() {
                        return Err(OriginError::Forbidden(format!("{path} is a directory")));
                    }
                    break;
                }
                Err(_) if probe.pop() => continue,
                Err(e) => return Err(e.into()),
            }
        }
        Ok(file)
    }

    fn check_space(&self, target: &Path, needed: u64) -> Result<(), OriginError> {
        if let Some(quota) = self.quota_bytes {
            let existing = std::fs::metadata(target).map(|m| m.len()).unwrap_or(0);
            let used = tree_size(&self.root)?.saturating_sub(existing);
            let available = quota.saturating_sub(used);
            if needed > available {
                return Err(OriginError::StorageFull { needed, available });
            }
        }
        if let Some(available) = free_space(&self.root) {
            if needed > available {
                return Err(OriginError::StorageFull { needed, available });
            }
        }
        Ok(())
    }

    /// Writes exactly `content_length` bytes from `body` to `path` via temp file and rename.
    pub async fn put_object<S, E>(&self, path: &ObjectPath, content_length: u64, body: S) -> Result<u64, OriginError>
    where
        S: Stream<Item = Result<bytes::Bytes, E>> + Unpin,
        E: std::fmt::Display,
    {
        let target = self.write_target(path)?;
        self.check_space(&target, content_length)?;
        let dir = target.parent().expect("target is below root").to_path_buf();
        tokio::fs::create_dir_all(&dir).await?;
        // re-check now that intermediate directories exist
        let target = self.write_target(path)?;

        let tmp = tempfile::Builder::new()
            .prefix(".upload-")
            .tempfile_in(&dir)?
            .into_temp_path();
        let mut file = tokio::fs::OpenOptions::new().write(true).truncate(true).open(&tmp).await?;
        let mut written = 0u64;
        let mut body = body;
        while let Some(chunk) = body.next().await {
            let chunk = chunk.map_err(|e| std::io::Error::other(e.to_string()))?;
            written += chunk.len() as u64;
            if written > content_length {
                return Err(OriginError::ShortBody {
                    got: written,
                    expected: content_length,
                });
            }
            file.write_all(&chunk).await?;
        }
        if written != content_length {
            return Err(OriginError::ShortBody {
                got: written,
                expected: content_length,
            });
        }
        file.sync_all().await?;
        drop(file);
        tmp.persist(&target).map_err(|e| OriginError::Io(e.error))?;
        Ok(written)
    }
}

fn tree_size(dir: &Path) -> std::io::Result<u64> {
    let mut total = 0;
    for entry in std::fs::read_dir(dir)? {
        let entry = entry?;
        let ft = entry.file_type()?;
        if ft.is_dir() {
            total += tree_size(&entry.path())?;
        } else if ft.is_file() {
            total += entry.metadata()?.len();
        }
    }
    Ok(total)
}

#[cfg(unix)]
fn free_space(dir: &Path) -> Option<u64> {
    use std::os::unix::ffi::OsStrExt;
    let c = std::ffi::CString::new(dir.as_os_str().as_bytes()).ok()?;
    let mut st: libc::statvfs = unsafe { std::mem::zeroed() };
    // SAFETY: c is a valid NUL-terminated path and st a properly sized out-parameter.
    let rc = unsafe { libc::statvfs(c.as_ptr(), &mut st) };
    (rc == 0).then(|| st.f_bavail as u64 * st.f_frsize as u64)
}

#[cfg(not(unix))]
fn free_space(_dir: &Path) -> Option<u64> {
    None
}

pub struct OriginState {
    pub name: String,
    pub store: OriginStore,
    pub reporter: Reporter,
}

impl OriginState {
    fn record(&self, path: &ObjectPath, direction: Direction, bytes: u64, client: String, started: Instant) -> TransferRecord {
        TransferRecord {
            service: self.name.clone(),
            kind: ServiceKind::Origin,
            path: path.clone(),
            direction,
            bytes,
            cache_hit: None,
            client,
            timestamp: unix_now(),
            duration_ms: started.elapsed().as_millis() as u64,
        }
    }
}

pub fn router(state: Arc<OriginState>) -> Router {
    Router::new()
        .route("/data/{*rest}", get(get_object).head(head_object).put(put_object))
        .with_state(state)
}

fn object_path(uri: &Uri) -> Result<ObjectPath, Response> {
    let raw = uri.path().strip_prefix("/data").unwrap_or_default();
    normalize_path(raw).map_err(|e| error_response(StatusCode::BAD_REQUEST, "MalformedPath", e))
}

fn with_service_name(mut resp: Response, name: &str) -> Response {
    if let Ok(v) = HeaderValue::from_str(name) {
        resp.headers_mut().insert(X_SERVICE_NAME, v);
    }
    resp
}

async fn get_object(
    State(state): State<Arc<OriginState>>,
    ConnectInfo(peer): ConnectInfo<SocketAddr>,
    headers: HeaderMap,
    uri: Uri,
) -> Response {
    let resp = serve_object(&state, peer, &headers, &uri).await.unwrap_or_else(|r| r);
    with_service_name(resp, &state.name)
}

async fn serve_object(state: &Arc<OriginState>, peer: SocketAddr, headers: &HeaderMap, uri: &Uri) -> Result<Response, Response> {
    let started = Instant::now();
    let path = object_path(uri)?;
    let file = state.store.locate(&path).map_err(IntoResponse::into_response)?;
    let size = tokio::fs::metadata(&file)
        .await
        .map_err(|e| OriginError::Io(e).into_response())?
        .len();
    let range = match headers.get(header::RANGE) {
        Some(v) => Some(
            parse_range(v.to_str().unwrap_or_default(), size)
                .map_err(|e| error_response(StatusCode::RANGE_NOT_SATISFIABLE, "BadRange", e))?,
        ),
        None => None,
    };
    let (offset, len) = range.map(|r| (r.start, r.byte_count())).unwrap_or((0, size));
    let stream = file_stream(&file, offset, len)
        .await
        .map_err(|e| OriginError::Io(e).into_response())?;
    let client = client_label(headers, peer);
    let st = state.clone();
    let metered = MeteredStream::new(stream, move |bytes| {
        st.reporter.emit(st.record(&path, Direction::Serve, bytes, client, started));
    });
    let mut resp = Response::new(Body::from_stream(metered));
    let h = resp.headers_mut();
    h.insert(header::CONTENT_LENGTH, HeaderValue::from(len));
    h.insert(header::ACCEPT_RANGES, HeaderValue::from_static("bytes"));
    if let Some(r) = range {
        *resp.status_mut() = StatusCode::PARTIAL_CONTENT;
        resp.headers_mut()
            .insert(header::CONTENT_RANGE, HeaderValue::from_str(&r.content_range(size)).expect("ascii"));
    }
    Ok(resp)
}

async fn head_object(State(state): State<Arc<OriginState>>, uri: Uri) -> Response {
    let resp = match object_path(&uri).and_then(|p| state.store.stat_object(&p).map_err(IntoResponse::into_response)) {
        Ok(stat) => {
            let mut resp = StatusCode::OK.into_response();
            let h = resp.headers_mut();
            h.insert(header::CONTENT_LENGTH, HeaderValue::from(stat.size));
            h.insert(X_MTIME, HeaderValue::from(stat.mtime));
            h.insert(header::ACCEPT_RANGES, HeaderValue::from_static("bytes"));
            resp
        }
        Err(resp) => resp,
    };
    with_service_name(resp, &state.name)
}

async fn put_object(
    State(state): State<Arc<OriginState>>,
    ConnectInfo(peer): ConnectInfo<SocketAddr>,
    headers: HeaderMap,
    uri: Uri,
    body: Body,
) -> Response {
    let started = Instant::now();
    let outcome = async {
        let path = object_path(&uri)?;
        let length = headers
            .get(header::CONTENT_LENGTH)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.parse::<u64>().ok())
            .ok_or_else(|| OriginError::LengthRequired.into_response())?;
        let written = state
            .store
            .put_object(&path, length, body.into_data_stream())
            .await
            .map_err(IntoResponse::into_response)?;
        state
            .reporter
            .emit(state.record(&path, Direction::Ingest, written, client_label(&headers, peer), started));
        Ok::<_, Response>(StatusCode::CREATED.into_response())
    }
    .await;
    with_service_name(outcome.unwrap_or_else(|r| r), &state.name)
}

#[derive(Debug, thiserror::Error)]
pub enum StartError {
    #[error(transparent)]
    Origin(#[from] OriginError),
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
pub async fn start(config: &OriginConfig) -> Result<ServiceHandle, StartError> {
    let store = OriginStore::new(config.prefix.clone(), &config.root_dir, config.quota_bytes)?;
    let http = http_client();
    let state = Arc::new(OriginState {
        name: config.name.clone(),
        store,
        reporter: Reporter::spawn(&config.director_url, http.clone()),
    });
    let bind = |source| StartError::Bind {
        addr: config.listen_addr.clone(),
        source,
    };
    let listener = TcpListener::bind(&config.listen_addr).await.map_err(bind)?;
    let mut handle = spawn_server(listener, router(state)).map_err(bind)?;
    let record = ServiceRecord::origin(
        &config.name,
        &handle.base_url(),
        config.location,
        vec![config.prefix.clone()],
    );
    let heartbeat = register_and_heartbeat(
        http,
        config.director_url.clone(),
        RegisterRequest::from(&record),
        Duration::from_secs(config.heartbeat_s.max(1)),
    )
    .await?;
    handle.attach(heartbeat);
    tracing::info!(name = %config.name, addr = %handle.addr, prefix = %config.prefix, "origin listening");
    Ok(handle)
}
