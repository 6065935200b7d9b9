//! Service registry and path resolution held by the director.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};

use crate::geo::{rank_caches, GeoPoint};
use crate::namespace::{match_prefix, NamespacePrefix, ObjectPath};

pub const DEFAULT_STALENESS_S: u64 = 300;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ServiceKind {
    Origin,
    Cache,
}

/// A registered origin or cache.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceRecord {
    pub name: String,
    pub kind: ServiceKind,
    pub base_url: String,
    #[serde(flatten)]
    pub location: GeoPoint,
    #[serde(default)]
    pub prefixes: Vec<NamespacePrefix>,
    #[serde(default)]
    pub registered_at: u64,
    #[serde(default)]
    pub last_heartbeat: u64,
    /// Set in listings when the last heartbeat is older than the staleness window.
    #[serde(default)]
    pub stale: bool,
}

impl ServiceRecord {
    pub fn origin(name: &str, base_url: &str, location: GeoPoint, prefixes: Vec<NamespacePrefix>) -> Self {
        ServiceRecord {
            name: name.to_owned(),
            kind: ServiceKind::Origin,
            base_url: base_url.to_owned(),
            location,
            prefixes,
            registered_at: 0,
            last_heartbeat: 0,
            stale: false,
        }
    }

    pub fn cache(name: &str, base_url: &str, location: GeoPoint) -> Self {
        ServiceRecord {
            kind: ServiceKind::Cache,
            ..ServiceRecord::origin(name, base_url, location, Vec::new())
        }
    }

    /// URL of `path` as served by this service.
    pub fn object_url(&self, path: &ObjectPath) -> String {
        format!("{}/data{}", self.base_url, path.to_url_path())
    }
}

/// Body of `POST /api/v1/register`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegisterRequest {
    pub name: String,
    pub kind: ServiceKind,
    pub base_url: String,
    pub lat: f64,
    pub lon: f64,
    #[serde(default)]
    pub prefixes: Vec<String>,
}

impl RegisterRequest {
    pub fn into_record(self) -> Result<ServiceRecord, RegistryError> {
        let location = GeoPoint::new(self.lat, self.lon)
            .map_err(|e| RegistryError::InvalidRecord(e.to_string()))?;
        let prefixes = self
            .prefixes
            .iter()
            .map(|p| p.parse::<ObjectPath>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| RegistryError::InvalidRecord(e.to_string()))?;
        Ok(ServiceRecord {
            kind: self.kind,
            ..ServiceRecord::origin(&self.name, &self.base_url, location, prefixes)
        })
    }
}

impl From<&ServiceRecord> for RegisterRequest {
    fn from(r: &ServiceRecord) -> Self {
        RegisterRequest {
            name: r.name.clone(),
            kind: r.kind,
            base_url: r.base_url.clone(),
            lat: r.location.lat,
            lon: r.location.lon,
            prefixes: r.prefixes.iter().map(ToString::to_string).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RegistryError {
    #[error("prefix {prefix} already exported by origin {owner}")]
    DuplicatePrefix { prefix: String, owner: String },
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error("no origin exports a prefix of {0}")]
    UnknownNamespace(String),
}

/// Where the federation sends a client for one object.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResolutionResult {
    pub object: ObjectPath,
    pub origin_url: String,
    pub cache_urls: Vec<String>,
}

impl ResolutionResult {
    /// First hop plus the remaining sources (other caches, then origin).
    pub fn redirect_target(&self) -> (String, Vec<String>) {
        let mut sources = self.cache_urls.clone();
        sources.push(self.origin_url.clone());
        let first = sources.remove(0);
        (first, sources)
    }
}

type Clock = Arc<dyn Fn() -> u64 + Send + Sync>;

pub fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Concurrent-read, serialized-write registry of origins and caches.
pub struct Registry {
    services: RwLock<BTreeMap<String, ServiceRecord>>,
    staleness_s: u64,
    clock: Clock,
}

impl Default for Registry {
    fn default() -> Self {
        Registry::new(DEFAULT_STALENESS_S)
    }
}

impl Registry {
    pub fn new(staleness_s: u64) -> Self {
        Registry::with_clock(staleness_s, Arc::new(unix_now))
    }

    pub fn with_clock(staleness_s: u64, clock: Clock) -> Self {
        Registry {
            services: RwLock::new(BTreeMap::new()),
            staleness_s,
            clock,
        }
    }

    pub fn len(&self) -> usize {
        self.services.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Adds or replaces (by name) a service record.
    pub fn register(&self, mut record: ServiceRecord) -> Result<(), RegistryError> {
        validate(&mut record)?;
        let now = (self.clock)();
        let mut services = self.services.write();
        if record.kind == ServiceKind::Origin {
            for other in services.values() {
                if other.name == record.name || other.kind != ServiceKind::Origin {
                    continue;
                }
                if let Some(p) = record.prefixes.iter().find(|p| other.prefixes.contains(p)) {
                    return Err(RegistryError::DuplicatePrefix {
                        prefix: p.to_string(),
                        owner: other.name.clone(),
                    });
                }
            }
        }
        record.registered_at = services
            .get(&record.name)
            .map(|r| r.registered_at)
            .unwrap_or(now);
        record.last_heartbeat = now;
        record.stale = false;
        services.insert(record.name.clone(), record);
        Ok(())
    }

    fn is_stale(&self, record: &ServiceRecord, now: u64) -> bool {
        now.saturating_sub(record.last_heartbeat) > self.staleness_s
    }

    /// Snapshot ordered by name, stale records flagged.
    pub fn list_services(&self) -> Vec<ServiceRecord> {
        let now = (self.clock)();
        self.services
            .read()
            .values()
            .map(|r| ServiceRecord {
                stale: self.is_stale(r, now),
                ..r.clone()
            })
            .collect()
    }

    /// Owning origin and proximity-ranked caches for `path`, over fresh records only.
    pub fn resolve(&self, path: &ObjectPath, client: Option<GeoPoint>) -> Result<ResolutionResult, RegistryError> {
        let now = (self.clock)();
        let services = self.services.read();
        let fresh = || services.values().filter(|r| !self.is_stale(r, now));

        let origins: Vec<&ServiceRecord> = fresh().filter(|r| r.kind == ServiceKind::Origin).collect();
        let prefix = match_prefix(path, origins.iter().flat_map(|o| o.prefixes.iter()))
            .ok_or_else(|| RegistryError::UnknownNamespace(path.to_string()))?;
        let origin = origins
            .iter()
            .find(|o| o.prefixes.contains(prefix))
            .expect("prefix came from an origin");

        let caches: Vec<ServiceRecord> = fresh().filter(|r| r.kind == ServiceKind::Cache).cloned().collect();
        let cache_urls = rank_caches(client, &caches)
            .iter()
            .map(|c| c.object_url(path))
            .collect();
        Ok(ResolutionResult {
            object: path.clone(),
            origin_url: origin.object_url(path),
            cache_urls,
        })
    }
}

fn validate(record: &mut ServiceRecord) -> Result<(), RegistryError> {
    let invalid = |m: String| Err(RegistryError::InvalidRecord(m));
    if record.name.trim().is_empty() || record.name.contains(char::is_whitespace) {
        return invalid(format!("bad service name {:?}", record.name));
    }
    match reqwest::Url::parse(&record.base_url) {
        Ok(url) if matches!(url.scheme(), "http" | "https") && url.host().is_some() => {}
        _ => return invalid(format!("base_url {:?} is not an absolute http URL", record.base_url)),
    }
    record.base_url = record.base_url.trim_end_matches('/').to_owned();
    if !record.location.is_valid() {
        return invalid(format!("location {:?} out of range", record.location));
    }
    match record.kind {
        ServiceKind::Origin if record.prefixes.is_empty() => invalid("origin exports no prefix".into()),
        ServiceKind::Cache if !record.prefixes.is_empty() => invalid("caches export no prefixes".into()),
        _ => {
            let mut sorted = record.prefixes.clone();
            sorted.sort();
            sorted.dedup();
            if sorted.len() != record.prefixes.len() {
                return invalid("duplicate prefix within one record".into());
            }
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicU64, Ordering};

    fn pt(lat: f64, lon: f64) -> GeoPoint {
        GeoPoint::new(lat, lon).unwrap()
    }

    fn path(s: &str) -> ObjectPath {
        s.parse().unwrap()
    }

    fn origin(name: &str, prefix: &str) -> ServiceRecord {
        ServiceRecord::origin(name, &format!("http://{name}:8000"), pt(34.0, -116.9), vec![path(prefix)])
    }

    #[test]
    fn register_and_duplicate_prefix() {
        let reg = Registry::default();
        reg.register(origin("bbso-origin", "/bbso")).unwrap();
        assert_eq!(reg.len(), 1);
        let err = reg.register(origin("other", "/bbso")).unwrap_err();
        assert!(matches!(err, RegistryError::DuplicatePrefix { .. }));
        // nesting is fine
        reg.register(origin("other", "/bbso/raw")).unwrap();
        // same origin re-registering its own prefix is a refresh
        reg.register(origin("bbso-origin", "/bbso")).unwrap();
        assert_eq!(reg.len(), 2);
    }

    #[test]
    fn rejects_invalid_records() {
        let reg = Registry::default();
        let mut no_prefix = origin("o", "/a");
        no_prefix.prefixes.clear();
        assert!(matches!(reg.register(no_prefix), Err(RegistryError::InvalidRecord(_))));
        let mut cache_with_prefix = ServiceRecord::cache("c", "http://c", pt(0.0, 0.0));
        cache_with_prefix.prefixes.push(path("/x"));
        assert!(reg.register(cache_with_prefix).is_err());
        assert!(reg.register(ServiceRecord::cache("c", "not a url", pt(0.0, 0.0))).is_err());
        assert!(reg.register(ServiceRecord::cache("", "http://c", pt(0.0, 0.0))).is_err());
        assert!(reg.is_empty());
    }

    #[test]
    fn scale_registration() {
        let reg = Registry::default();
        for i in 0..20 {
            reg.register(origin(&format!("origin-{i:02}"), &format!("/proj{i:02}"))).unwrap();
        }
        for i in 0..30 {
            reg.register(ServiceRecord::cache(&format!("cache-{i:02}"), "http://c", pt(0.0, i as f64)))
                .unwrap();
        }
        assert_eq!(reg.len(), 50);
    }

    #[test]
    fn resolve_examples() {
        let reg = Registry::default();
        reg.register(origin("bbso-origin", "/bbso")).unwrap();
        let r = reg.resolve(&path("/bbso/raw/a.fits"), None).unwrap();
        assert_eq!(r.origin_url, "http://bbso-origin:8000/data/bbso/raw/a.fits");
        assert!(r.cache_urls.is_empty());
        assert_eq!(r.redirect_target(), (r.origin_url.clone(), vec![]));

        reg.register(ServiceRecord::cache("b", "http://b", pt(0.0, 1.0))).unwrap();
        reg.register(ServiceRecord::cache("a", "http://a/", pt(0.0, 2.0))).unwrap();
        let r = reg.resolve(&path("/bbso/raw/a.fits"), Some(pt(0.0, 0.0))).unwrap();
        assert_eq!(r.cache_urls, ["http://b/data/bbso/raw/a.fits", "http://a/data/bbso/raw/a.fits"]);
        let (first, alts) = r.redirect_target();
        assert_eq!(first, "http://b/data/bbso/raw/a.fits");
        assert_eq!(alts, [r.cache_urls[1].clone(), r.origin_url.clone()]);

        assert!(matches!(
            reg.resolve(&path("/nope/x"), None),
            Err(RegistryError::UnknownNamespace(_))
        ));
    }

    #[test]
    fn resolve_uses_longest_origin_prefix() {
        let reg = Registry::default();
        reg.register(origin("outer", "/bbso")).unwrap();
        reg.register(origin("inner", "/bbso/processed")).unwrap();
        let r = reg.resolve(&path("/bbso/processed/x"), None).unwrap();
        assert!(r.origin_url.starts_with("http://inner:8000/"));
        let r = reg.resolve(&path("/bbso/raw/x"), None).unwrap();
        assert!(r.origin_url.starts_with("http://outer:8000/"));
    }

    #[test]
    fn listing_is_name_ordered_and_replaceable() {
        let reg = Registry::default();
        assert!(reg.list_services().is_empty());
        reg.register(ServiceRecord::cache("b", "http://b", pt(0.0, 0.0))).unwrap();
        reg.register(ServiceRecord::cache("a", "http://a", pt(0.0, 0.0))).unwrap();
        let names: Vec<_> = reg.list_services().into_iter().map(|r| r.name).collect();
        assert_eq!(names, ["a", "b"]);
        reg.register(ServiceRecord::cache("a", "http://a2", pt(0.0, 0.0))).unwrap();
        assert_eq!(reg.list_services()[0].base_url, "http://a2");
    }

    #[test]
    fn stale_records_are_listed_but_not_resolved() {
        let now = Arc::new(AtomicU64::new(1000));
        let clock = {
            let now = now.clone();
            Arc::new(move || now.load(Ordering::SeqCst))
        };
        let reg = Registry::with_clock(300, clock);
        reg.register(origin("o", "/bbso")).unwrap();
        reg.register(ServiceRecord::cache("old", "http://old", pt(0.0, 0.0))).unwrap();
        now.store(1200, Ordering::SeqCst);
        reg.register(ServiceRecord::cache("new", "http://new", pt(0.0, 0.0))).unwrap();
        reg.register(origin("o", "/bbso")).unwrap();
        now.store(1400, Ordering::SeqCst);

        let listed = reg.list_services();
        let old = listed.iter().find(|r| r.name == "old").unwrap();
        assert!(old.stale);
        assert_eq!(old.registered_at, 1000);
        assert!(!listed.iter().find(|r| r.name == "new").unwrap().stale);
        let r = reg.resolve(&path("/bbso/x"), None).unwrap();
        assert_eq!(r.cache_urls, ["http://new/data/bbso/x"]);
    }

    #[test]
    fn every_cache_url_ends_with_path() {
        let reg = Registry::default();
        reg.register(origin("o", "/p")).unwrap();
        for i in 0..5 {
            reg.register(ServiceRecord::cache(&format!("c{i}"), &format!("http://c{i}"), pt(i as f64, 0.0)))
                .unwrap();
        }
        let p = path("/p/q/r s.fits");
        let r = reg.resolve(&p, Some(pt(3.0, 0.0))).unwrap();
        assert!(r.cache_urls.iter().all(|u| u.ends_with(&p.to_url_path())));
        assert_eq!(r, reg.resolve(&p, Some(pt(3.0, 0.0))).unwrap());
    }
}
