//! HTTP plumbing shared by the director, origins and caches.

use std::net::SocketAddr;
use std::pin::Pin;
use std::task::{Context, Poll};
use std::time::Duration;

use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::Json;
use bytes::Bytes;
use futures::Stream;
use serde::Serialize;
use tokio::net::TcpListener;
use tokio::sync::{mpsc, oneshot};
use tokio::task::JoinHandle;

use crate::accounting::TransferRecord;
use crate::registry::RegisterRequest;

pub const X_SERVICE_NAME: &str = "x-service-name";
pub const X_CACHE: &str = "x-cache";
pub const X_CLIENT_GEO: &str = "x-client-geo";
pub const X_CLIENT_NAME: &str = "x-client-name";
pub const X_ALT_SOURCES: &str = "x-alt-sources";
pub const X_MTIME: &str = "x-mtime";

/// JSON error body: `{"error": kind, "message": text}`.
#[derive(Debug, Serialize)]
pub struct ErrorBody {
    pub error: &'static str,
    pub message: String,
}

pub fn error_response(status: StatusCode, kind: &'static str, message: impl ToString) -> Response {
    (
        status,
        Json(ErrorBody {
            error: kind,
            message: message.to_string(),
        }),
    )
        .into_response()
}

/// Inclusive byte range resolved against an object size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ByteRange {
    pub start: u64,
    pub end: u64,
}

impl ByteRange {
    pub fn byte_count(&self) -> u64 {
        self.end - self.start + 1
    }

    pub fn content_range(&self, size: u64) -> String {
        format!("bytes {}-{}/{}", self.start, self.end, size)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unsatisfiable range {0:?}")]
pub struct BadRange(pub String);

/// Parses a single `bytes=a-b`, `bytes=a-` or `bytes=-n` range.
///
/// Multipart ranges, `a > b` and `a >= size` are unsatisfiable; `b` past the
/// end is clamped to the last byte.
pub fn parse_range(header: &str, size: u64) -> Result<ByteRange, BadRange> {
    let bad = || BadRange(header.to_owned());
    let spec = header.trim().strip_prefix("bytes=").ok_or_else(bad)?;
    if spec.contains(',') {
        return Err(bad());
    }
    let (a, b) = spec.split_once('-').ok_or_else(bad)?;
    let (a, b) = (a.trim(), b.trim());
    let (start, end) = if a.is_empty() {
        let n: u64 = b.parse().map_err(|_| bad())?;
        if n == 0 || size == 0 {
            return Err(bad());
        }
        (size.saturating_sub(n), size - 1)
    } else {
        let start: u64 = a.parse().map_err(|_| bad())?;
        let end: u64 = if b.is_empty() {
            size.saturating_sub(1)
        } else {
            b.parse().map_err(|_| bad())?
        };
        (start, end)
    };
    if start > end || start >= size {
        return Err(bad());
    }
    Ok(ByteRange {
        start,
        end: end.min(size - 1),
    })
}

/// Caller identity for accounting: `X-Client-Name` when present, else the peer IP.
pub fn client_label(headers: &HeaderMap, peer: SocketAddr) -> String {
    headers
        .get(X_CLIENT_NAME)
        .and_then(|v| v.to_str().ok())
        .filter(|v| !v.is_empty())
        .map(str::to_owned)
        .unwrap_or_else(|| peer.ip().to_string())
}

type DoneFn = Box<dyn FnOnce(u64) + Send + Sync>;

/// Byte stream that reports how many bytes it yielded once it is exhausted.
///
/// Anything placed in `guard` lives until the stream is dropped.
pub struct MeteredStream<S> {
    inner: S,
    sent: u64,
    on_done: Option<DoneFn>,
    _guard: Option<Box<dyn Send + Sync>>,
}

impl<S> MeteredStream<S> {
    pub fn new(inner: S, on_done: impl FnOnce(u64) + Send + Sync + 'static) -> Self {
        MeteredStream {
            inner,
            sent: 0,
            on_done: Some(Box::new(on_done)),
            _guard: None,
        }
    }

    pub fn with_guard(mut self, guard: impl Send + Sync + 'static) -> Self {
        self._guard = Some(Box::new(guard));
        self
    }
}

impl<S> Stream for MeteredStream<S>
where
    S: Stream<Item = std::io::Result<Bytes>> + Unpin,
{
    type Item = std::io::Result<Bytes>;

    fn poll_next(mut self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<Option<Self::Item>> {
        let this = &mut *self;
        match Pin::new(&mut this.inner).poll_next(cx) {
            Poll::Ready(Some(Ok(chunk))) => {
                this.sent += chunk.len() as u64;
                Poll::Ready(Some(Ok(chunk)))
            }
            Poll::Ready(None) => {
                if let Some(done) = this.on_done.take() {
                    done(this.sent);
                }
                Poll::Ready(None)
            }
            other => other,
        }
    }
}

// hyper stops polling a sized body once the last byte is out, so the end of
// stream is often never observed; dropping the body settles the count.
impl<S> Drop for MeteredStream<S> {
    fn drop(&mut self) {
        if let Some(done) = self.on_done.take() {
            done(self.sent);
        }
    }
}

/// Opens `path` and streams `len` bytes from `offset`.
pub async fn file_stream(
    path: &std::path::Path,
    offset: u64,
    len: u64,
) -> std::io::Result<tokio_util::io::ReaderStream<tokio::io::Take<tokio::fs::File>>> {
    use tokio::io::{AsyncReadExt, AsyncSeekExt};
    let mut file = tokio::fs::File::open(path).await?;
    if offset > 0 {
        file.seek(std::io::SeekFrom::Start(offset)).await?;
    }
    Ok(tokio_util::io::ReaderStream::with_capacity(file.take(len), 64 * 1024))
}

pub fn http_client() -> reqwest::Client {
    reqwest::Client::builder()
        .connect_timeout(Duration::from_secs(10))
        .timeout(Duration::from_secs(60))
        .redirect(reqwest::redirect::Policy::none())
        .no_proxy()
        .build()
        .expect("http client builds")
}

/// Best-effort asynchronous delivery of transfer records to the director.
///
/// Each record gets up to three POST attempts; failures are logged and dropped.
#[derive(Clone)]
pub struct Reporter {
    tx: mpsc::UnboundedSender<TransferRecord>,
}

const REPORT_ATTEMPTS: usize = 3;

impl Reporter {
    pub fn spawn(director_url: &str, http: reqwest::Client) -> Self {
        let (tx, mut rx) = mpsc::unbounded_channel::<TransferRecord>();
        let url = format!("{}/api/v1/accounting", director_url.trim_end_matches('/'));
        tokio::spawn(async move {
            while let Some(record) = rx.recv().await {
                for attempt in 1..=REPORT_ATTEMPTS {
                    match http.post(&url).json(&record).send().await {
                        Ok(resp) if resp.status().is_success() => break,
                        Ok(resp) if resp.status().is_client_error() => {
                            tracing::warn!(status = %resp.status(), "director refused transfer record");
                            break;
                        }
                        outcome => {
                            tracing::debug!(attempt, ?outcome, "accounting post failed");
                            if attempt == REPORT_ATTEMPTS {
                                tracing::warn!(path = %record.path, "dropping transfer record");
                            } else {
                                tokio::time::sleep(Duration::from_millis(100 * attempt as u64)).await;
                            }
                        }
                    }
                }
            }
        });
        Reporter { tx }
    }

    /// A reporter that discards everything; used by in-process tests.
    pub fn discard() -> Self {
        let (tx, _rx) = mpsc::unbounded_channel();
        Reporter { tx }
    }

    pub fn emit(&self, record: TransferRecord) {
        let _ = self.tx.send(record);
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RegistrationError {
    #[error("director at {url} unreachable: {source}")]
    Unreachable {
        url: String,
        #[source]
        source: reqwest::Error,
    },
    #[error("director rejected registration ({status}): {body}")]
    Rejected { status: StatusCode, body: String },
}

pub async fn register_with(
    http: &reqwest::Client,
    director_url: &str,
    request: &RegisterRequest,
) -> Result<(), RegistrationError> {
    let url = format!("{}/api/v1/register", director_url.trim_end_matches('/'));
    let resp = http
        .post(&url)
        .json(request)
        .send()
        .await
        .map_err(|source| RegistrationError::Unreachable { url, source })?;
    let status = resp.status();
    if status.is_success() {
        Ok(())
    } else {
        Err(RegistrationError::Rejected {
            status: StatusCode::from_u16(status.as_u16()).unwrap_or(StatusCode::BAD_GATEWAY),
            body: resp.text().await.unwrap_or_default(),
        })
    }
}

/// Registers once (returning any error) and then refreshes every `interval`.
pub async fn register_and_heartbeat(
    http: reqwest::Client,
    director_url: String,
    request: RegisterRequest,
    interval: Duration,
) -> Result<JoinHandle<()>, RegistrationError> {
    register_with(&http, &director_url, &request).await?;
    Ok(tokio::spawn(async move {
        let mut tick = tokio::time::interval(interval);
        tick.tick().await;
        loop {
            tick.tick().await;
            if let Err(e) = register_with(&http, &director_url, &request).await {
                tracing::warn!(error = %e, "heartbeat failed");
            }
        }
    }))
}

/// Running HTTP service bound to a local address.
pub struct ServiceHandle {
    pub addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    join: Option<JoinHandle<std::io::Result<()>>>,
    extra: Vec<JoinHandle<()>>,
}

impl ServiceHandle {
    pub fn base_url(&self) -> String {
        base_url(self.addr)
    }

    pub fn attach(&mut self, task: JoinHandle<()>) {
        self.extra.push(task);
    }

    /// Stops accepting, drains in-flight requests and waits for the server task.
    pub async fn shutdown(mut self) -> std::io::Result<()> {
        self.stop();
        match self.join.take() {
            Some(join) => join.await.unwrap_or(Ok(())),
            None => Ok(()),
        }
    }

    /// Resolves when the server exits on its own (or after [`ServiceHandle::shutdown`]).
    pub async fn wait(mut self) -> std::io::Result<()> {
        match self.join.take() {
            Some(join) => join.await.unwrap_or(Ok(())),
            None => Ok(()),
        }
    }

    fn stop(&mut self) {
        for task in self.extra.drain(..) {
            task.abort();
        }
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
    }
}

impl Drop for ServiceHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

pub fn base_url(addr: SocketAddr) -> String {
    let host = if addr.ip().is_unspecified() {
        "127.0.0.1".to_owned()
    } else {
        match addr.ip() {
            std::net::IpAddr::V6(ip) => format!("[{ip}]"),
            ip => ip.to_string(),
        }
    };
    format!("http://{host}:{}", addr.port())
}

/// Serves `router` on `listener` until the handle is shut down.
pub fn spawn_server(listener: TcpListener, router: axum::Router) -> std::io::Result<ServiceHandle> {
    let addr = listener.local_addr()?;
    let (tx, rx) = oneshot::channel::<()>();
    let app = router.into_make_service_with_connect_info::<SocketAddr>();
    let join = tokio::spawn(async move {
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = rx.await;
            })
            .await
    });
    Ok(ServiceHandle {
        addr,
        shutdown: Some(tx),
        join: Some(join),
        extra: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranges() {
        assert_eq!(parse_range("bytes=2-4", 10), Ok(ByteRange { start: 2, end: 4 }));
        assert_eq!(parse_range("bytes=2-4", 10).unwrap().byte_count(), 3);
        assert_eq!(parse_range("bytes=8-", 10), Ok(ByteRange { start: 8, end: 9 }));
        assert_eq!(parse_range("bytes=-3", 10), Ok(ByteRange { start: 7, end: 9 }));
        assert_eq!(parse_range("bytes=5-100", 10), Ok(ByteRange { start: 5, end: 9 }));
        for bad in ["bytes=12-20", "bytes=4-2", "bytes=0-1,3-4", "items=0-1", "bytes=x-1", "bytes=-0"] {
            assert!(parse_range(bad, 10).is_err(), "{bad}");
        }
        assert!(parse_range("bytes=0-0", 0).is_err());
    }

    #[tokio::test]
    async fn metered_stream_reports_total() {
        use futures::StreamExt;
        let chunks = vec![Ok(Bytes::from_static(b"abc")), Ok(Bytes::from_static(b"de"))];
        let (tx, rx) = std::sync::mpsc::channel();
        let mut s = MeteredStream::new(futures::stream::iter(chunks), move |n| tx.send(n).unwrap());
        while s.next().await.is_some() {}
        assert_eq!(rx.recv().unwrap(), 5);
    }
}
