//! Federation client: locate, fetch through the nearest cache with fallback, store to the origin.

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Duration;

use futures::StreamExt;
use serde::{Deserialize, Serialize};
use tokio::io::AsyncWriteExt;

use crate::accounting::TransferStats;
use crate::geo::GeoPoint;
use crate::namespace::ObjectPath;
use crate::registry::{ResolutionResult, ServiceRecord};
use crate::wire::{X_ALT_SOURCES, X_CACHE, X_CLIENT_GEO, X_CLIENT_NAME};

pub const DIRECTOR_ENV: &str = "FEDCTL_DIRECTOR";

/// Ordered download sources: caches in rank order, then the origin.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FetchPlan {
    pub sources: Vec<String>,
    pub attempts_per_source: u32,
}

impl FetchPlan {
    pub fn from_resolution(r: &ResolutionResult, bypass_cache: bool) -> Self {
        let mut sources = if bypass_cache { Vec::new() } else { r.cache_urls.clone() };
        sources.push(r.origin_url.clone());
        FetchPlan {
            sources,
            attempts_per_source: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourceFailure {
    pub source: String,
    pub cause: String,
    pub status: Option<u16>,
}

impl fmt::Display for SourceFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.source, self.cause)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("director unreachable at {url}: {cause}")]
    DirectorUnreachable { url: String, cause: String },
    #[error("unknown namespace: {0}")]
    UnknownNamespace(String),
    #[error("all sources failed: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    AllSourcesFailed(Vec<SourceFailure>),
    #[error("origin unreachable: {0}")]
    OriginUnreachable(String),
    #[error("origin storage full: {0}")]
    StorageFull(String),
    #[error("origin refused write ({status}): {body}")]
    Rejected { status: u16, body: String },
    #[error("director returned {status}: {body}")]
    Director { status: u16, body: String },
    #[error("local file {path}: {source}")]
    Local {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl ClientError {
    /// True when every source answered 404.
    pub fn is_not_found(&self) -> bool {
        match self {
            ClientError::UnknownNamespace(_) => true,
            ClientError::AllSourcesFailed(f) => !f.is_empty() && f.iter().all(|s| s.status == Some(404)),
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FetchReport {
    pub bytes: u64,
    pub source_used: String,
    /// `X-Cache` flag when a cache served the object.
    pub cache_hit: Option<bool>,
    pub failures: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct FedClient {
    http: reqwest::Client,
    director: String,
    client_name: Option<String>,
    client_geo: Option<GeoPoint>,
    attempts_per_source: u32,
    follow_redirect: bool,
}

impl FedClient {
    pub fn new(director_url: &str) -> Self {
        let http = reqwest::Client::builder()
            .connect_timeout(Duration::from_secs(10))
            .timeout(Duration::from_secs(60))
            .redirect(reqwest::redirect::Policy::none())
            .no_proxy()
            .build()
            .expect("http client builds");
        FedClient {
            http,
            director: director_url.trim_end_matches('/').to_owned(),
            client_name: None,
            client_geo: None,
            attempts_per_source: 1,
            follow_redirect: false,
        }
    }

    /// Name sent as `X-Client-Name`, used by services to attribute transfers.
    pub fn with_name(mut self, name: &str) -> Self {
        self.client_name = Some(name.to_owned());
        self
    }

    /// Location sent as `X-Client-Geo`, overriding the director's GeoIP lookup.
    pub fn with_geo(mut self, geo: GeoPoint) -> Self {
        self.client_geo = Some(geo);
        self
    }

    pub fn with_attempts(mut self, attempts: u32) -> Self {
        self.attempts_per_source = attempts.max(1);
        self
    }

    /// Build the source list from the director's 307 redirect instead of resolve.
    pub fn follow_redirects(mut self, on: bool) -> Self {
        self.follow_redirect = on;
        self
    }

    pub fn director_url(&self) -> &str {
        &self.director
    }

    fn decorate(&self, mut req: reqwest::RequestBuilder) -> reqwest::RequestBuilder {
        if let Some(name) = &self.client_name {
            req = req.header(X_CLIENT_NAME, name);
        }
        if let Some(geo) = &self.client_geo {
            req = req.header(X_CLIENT_GEO, geo.to_string());
        }
        req
    }

    fn unreachable(&self, e: impl ToString) -> ClientError {
        ClientError::DirectorUnreachable {
            url: self.director.clone(),
            cause: e.to_string(),
        }
    }

    async fn director_get(&self, endpoint: &str, query: &[(&str, String)]) -> Result<reqwest::Response, ClientError> {
        let url = format!("{}{endpoint}", self.director);
        self.decorate(self.http.get(&url).query(query))
            .send()
            .await
            .map_err(|e| self.unreachable(e))
    }

    /// The director's resolution for `path`, verbatim.
    pub async fn locate(&self, path: &ObjectPath) -> Result<ResolutionResult, ClientError> {
        let resp = self.director_get("/api/v1/resolve", &[("path", path.to_string())]).await?;
        match resp.status().as_u16() {
            200 => resp.json().await.map_err(|e| self.unreachable(e)),
            404 => Err(ClientError::UnknownNamespace(path.to_string())),
            status => Err(ClientError::Director {
                status,
                body: resp.text().await.unwrap_or_default(),
            }),
        }
    }

    async fn plan_via_redirect(&self, path: &ObjectPath, bypass_cache: bool) -> Result<FetchPlan, ClientError> {
        let resp = self.director_get("/api/v1/redirect", &[("path", path.to_string())]).await?;
        match resp.status().as_u16() {
            307 => {}
            404 => return Err(ClientError::UnknownNamespace(path.to_string())),
            status => {
                return Err(ClientError::Director {
                    status,
                    body: resp.text().await.unwrap_or_default(),
                })
            }
        }
        let header = |name| {
            resp.headers()
                .get(name)
                .and_then(|v: &reqwest::header::HeaderValue| v.to_str().ok())
                .unwrap_or_default()
                .to_owned()
        };
        let mut sources = vec![header(reqwest::header::LOCATION.as_str())];
        sources.extend(header(X_ALT_SOURCES).split(',').filter(|s| !s.is_empty()).map(str::to_owned));
        if bypass_cache {
            sources = sources.split_off(sources.len() - 1);
        }
        Ok(FetchPlan {
            sources,
            attempts_per_source: self.attempts_per_source,
        })
    }

    pub async fn plan(&self, path: &ObjectPath, bypass_cache: bool) -> Result<FetchPlan, ClientError> {
        if self.follow_redirect {
            return self.plan_via_redirect(path, bypass_cache).await;
        }
        let mut plan = FetchPlan::from_resolution(&self.locate(path).await?, bypass_cache);
        plan.attempts_per_source = self.attempts_per_source;
        Ok(plan)
    }

    /// Downloads `path` to `dest`, trying each source in plan order.
    pub async fn fetch(&self, path: &ObjectPath, dest: &Path, bypass_cache: bool) -> Result<FetchReport, ClientError> {
        let plan = self.plan(path, bypass_cache).await?;
        self.fetch_with_plan(&plan, dest).await
    }

    /// Downloads using an explicit plan; `dest` appears atomically or not at all.
    pub async fn fetch_with_plan(&self, plan: &FetchPlan, dest: &Path) -> Result<FetchReport, ClientError> {
        let mut failures = Vec::new();
        for source in &plan.sources {
            for _ in 0..plan.attempts_per_source.max(1) {
                match self.download(source, dest).await {
                    Ok((bytes, cache_hit)) => {
                        return Ok(FetchReport {
                            bytes,
                            source_used: source.clone(),
                            cache_hit,
                            failures: failures.iter().map(ToString::to_string).collect(),
                        })
                    }
                    Err(f) => {
                        tracing::debug!(%f, "source failed");
                        failures.push(f);
                    }
                }
            }
        }
        Err(ClientError::AllSourcesFailed(failures))
    }

    async fn download(&self, source: &str, dest: &Path) -> Result<(u64, Option<bool>), SourceFailure> {
        let fail = |cause: String, status: Option<u16>| SourceFailure {
            source: source.to_owned(),
            cause,
            status,
        };
        let resp = self
            .decorate(self.http.get(source))
            .send()
            .await
            .map_err(|e| fail(e.to_string(), None))?;
        let status = resp.status();
        if status.as_u16() != 200 {
            let body = resp.text().await.unwrap_or_default();
            return Err(fail(format!("status {status}: {body}"), Some(status.as_u16())));
        }
        let cache_hit = resp
            .headers()
            .get(X_CACHE)
            .and_then(|v| v.to_str().ok())
            .map(|v| v.eq_ignore_ascii_case("HIT"));
        let expected = resp.content_length();

        let dir = dest.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let local = |e: std::io::Error| fail(format!("local write: {e}"), None);
        tokio::fs::create_dir_all(dir).await.map_err(local)?;
        let tmp = tempfile::Builder::new()
            .prefix(".fetch-")
            .tempfile_in(dir)
            .map_err(local)?
            .into_temp_path();
        let mut file = tokio::fs::OpenOptions::new()
            .write(true)
            .truncate(true)
            .open(&tmp)
            .await
            .map_err(local)?;
        let mut body = resp.bytes_stream();
        let mut bytes = 0u64;
        while let Some(chunk) = body.next().await {
            let chunk = chunk.map_err(|e| fail(format!("transfer: {e}"), None))?;
            bytes += chunk.len() as u64;
            file.write_all(&chunk).await.map_err(local)?;
        }
        file.sync_all().await.map_err(local)?;
        drop(file);
        if expected.is_some_and(|n| n != bytes) {
            return Err(fail(format!("short body: {bytes} of {expected:?} bytes"), None));
        }
        tmp.persist(dest).map_err(|e| local(e.error))?;
        Ok((bytes, cache_hit))
    }

    /// Writes the local file `src` to the origin owning `path`. Never goes through a cache.
    pub async fn store(&self, src: &Path, path: &ObjectPath) -> Result<u64, ClientError> {
        let data = tokio::fs::read(src).await.map_err(|source| ClientError::Local {
            path: src.to_path_buf(),
            source,
        })?;
        self.store_bytes(data, path).await
    }

    pub async fn store_bytes(&self, data: Vec<u8>, path: &ObjectPath) -> Result<u64, ClientError> {
        let resolution = self.locate(path).await?;
        let len = data.len() as u64;
        let resp = self
            .decorate(self.http.put(&resolution.origin_url))
            .header(reqwest::header::CONTENT_LENGTH, len)
            .body(data)
            .send()
            .await
            .map_err(|e| ClientError::OriginUnreachable(format!("{}: {e}", resolution.origin_url)))?;
        match resp.status().as_u16() {
            201 => Ok(len),
            507 => Err(ClientError::StorageFull(resp.text().await.unwrap_or_default())),
            status => Err(ClientError::Rejected {
                status,
                body: resp.text().await.unwrap_or_default(),
            }),
        }
    }

    pub async fn stats(&self, service: Option<&str>, since: Option<u64>) -> Result<TransferStats, ClientError> {
        let mut query = Vec::new();
        if let Some(s) = service {
            query.push(("service", s.to_owned()));
        }
        if let Some(t) = since {
            query.push(("since", t.to_string()));
        }
        let resp = self.director_get("/api/v1/stats", &query).await?;
        resp.json().await.map_err(|e| self.unreachable(e))
    }

    pub async fn records(&self, service: Option<&str>) -> Result<Vec<crate::accounting::TransferRecord>, ClientError> {
        let query: Vec<(&str, String)> = service.map(|s| ("service", s.to_owned())).into_iter().collect();
        let resp = self.director_get("/api/v1/records", &query).await?;
        resp.json().await.map_err(|e| self.unreachable(e))
    }

    pub async fn services(&self) -> Result<Vec<ServiceRecord>, ClientError> {
        let resp = self.director_get("/api/v1/services", &[]).await?;
        resp.json().await.map_err(|e| self.unreachable(e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plan_puts_origin_last() {
        let r = ResolutionResult {
            object: "/a/b".parse().unwrap(),
            origin_url: "http://o/data/a/b".into(),
            cache_urls: vec!["http://c1/data/a/b".into(), "http://c2/data/a/b".into()],
        };
        let plan = FetchPlan::from_resolution(&r, false);
        assert_eq!(plan.sources.last().unwrap(), "http://o/data/a/b");
        assert_eq!(plan.sources.len(), 3);
        assert_eq!(FetchPlan::from_resolution(&r, true).sources, ["http://o/data/a/b"]);
    }

    #[test]
    fn not_found_classification() {
        let f = |status| SourceFailure {
            source: "s".into(),
            cause: "c".into(),
            status,
        };
        assert!(ClientError::AllSourcesFailed(vec![f(Some(404)), f(Some(404))]).is_not_found());
        assert!(!ClientError::AllSourcesFailed(vec![f(Some(404)), f(None)]).is_not_found());
        assert!(!ClientError::AllSourcesFailed(vec![]).is_not_found());
    }
}
