//! Transfer accounting: record schema, newline-delimited JSON log, aggregation.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::namespace::ObjectPath;
use crate::registry::ServiceKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Serve,
    Ingest,
}

/// One completed transfer as reported by the service that moved the bytes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferRecord {
    pub service: String,
    pub kind: ServiceKind,
    pub path: ObjectPath,
    pub direction: Direction,
    pub bytes: u64,
    pub cache_hit: Option<bool>,
    pub client: String,
    pub timestamp: u64,
    pub duration_ms: u64,
}

#[derive(Debug, thiserror::Error)]
pub enum AccountingError {
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error("accounting log {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("accounting log {path} line {line}: {source}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

impl TransferRecord {
    /// `cache_hit` is present exactly for cache serve records.
    pub fn validate(&self) -> Result<(), AccountingError> {
        if self.service.is_empty() {
            return Err(AccountingError::InvalidRecord("empty service name".into()));
        }
        let wants_hit = self.kind == ServiceKind::Cache && self.direction == Direction::Serve;
        if wants_hit != self.cache_hit.is_some() {
            return Err(AccountingError::InvalidRecord(format!(
                "cache_hit must be {} for a {:?} {:?} record",
                if wants_hit { "present" } else { "absent" },
                self.kind,
                self.direction
            )));
        }
        Ok(())
    }

    fn is_cache_serve(&self) -> bool {
        self.kind == ServiceKind::Cache && self.direction == Direction::Serve
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferStats {
    pub records: u64,
    pub total_bytes: u64,
    pub hits: u64,
    pub misses: u64,
    pub bytes_by_service: BTreeMap<String, u64>,
}

impl TransferStats {
    fn add(&mut self, r: &TransferRecord) {
        self.records += 1;
        self.total_bytes += r.bytes;
        if r.is_cache_serve() {
            match r.cache_hit {
                Some(true) => self.hits += 1,
                _ => self.misses += 1,
            }
        }
        *self.bytes_by_service.entry(r.service.clone()).or_default() += r.bytes;
    }

    pub fn merge(&mut self, other: &TransferStats) {
        self.records += other.records;
        self.total_bytes += other.total_bytes;
        self.hits += other.hits;
        self.misses += other.misses;
        for (k, v) in &other.bytes_by_service {
            *self.bytes_by_service.entry(k.clone()).or_default() += v;
        }
    }
}

/// Totals over `records` matching the optional service and since filters.
pub fn aggregate_stats<'a, I>(records: I, service: Option<&str>, since: Option<u64>) -> TransferStats
where
    I: IntoIterator<Item = &'a TransferRecord>,
{
    let mut stats = TransferStats::default();
    records
        .into_iter()
        .filter(|r| service.is_none_or(|s| r.service == s))
        .filter(|r| since.is_none_or(|t| r.timestamp >= t))
        .for_each(|r| stats.add(r));
    stats
}

struct LogInner {
    writer: Option<BufWriter<File>>,
    records: Vec<TransferRecord>,
}

/// Append-only record log, optionally backed by a file.
pub struct AccountingLog {
    path: Option<PathBuf>,
    inner: Mutex<LogInner>,
}

impl AccountingLog {
    pub fn in_memory() -> Self {
        AccountingLog {
            path: None,
            inner: Mutex::new(LogInner {
                writer: None,
                records: Vec::new(),
            }),
        }
    }

    /// Opens (creating if needed) the log at `path`, replaying existing lines.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, AccountingError> {
        let path = path.as_ref().to_path_buf();
        let io = |source| AccountingError::Io {
            path: path.clone(),
            source,
        };
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(io)?;
        }
        let records = if path.exists() {
            read_log(&path)?
        } else {
            Vec::new()
        };
        let file = OpenOptions::new().create(true).append(true).open(&path).map_err(io)?;
        Ok(AccountingLog {
            path: Some(path),
            inner: Mutex::new(LogInner {
                writer: Some(BufWriter::new(file)),
                records,
            }),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn append(&self, record: TransferRecord) -> Result<(), AccountingError> {
        record.validate()?;
        let mut line = serde_json::to_string(&record).expect("record serializes");
        line.push('\n');
        let mut inner = self.inner.lock();
        if let Some(writer) = inner.writer.as_mut() {
            let io = |source| AccountingError::Io {
                path: self.path.clone().unwrap_or_default(),
                source,
            };
            writer.write_all(line.as_bytes()).map_err(io)?;
            writer.flush().map_err(io)?;
        }
        inner.records.push(record);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.inner.lock().records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn snapshot(&self) -> Vec<TransferRecord> {
        self.inner.lock().records.clone()
    }

    pub fn stats(&self, service: Option<&str>, since: Option<u64>) -> TransferStats {
        aggregate_stats(self.inner.lock().records.iter(), service, since)
    }

    pub fn sync(&self) -> Result<(), AccountingError> {
        let mut inner = self.inner.lock();
        if let Some(writer) = inner.writer.as_mut() {
            writer
                .flush()
                .and_then(|_| writer.get_ref().sync_data())
                .map_err(|source| AccountingError::Io {
                    path: self.path.clone().unwrap_or_default(),
                    source,
                })?;
        }
        Ok(())
    }
}

/// Parses a log file written by [`AccountingLog`].
pub fn read_log(path: &Path) -> Result<Vec<TransferRecord>, AccountingError> {
    let file = File::open(path).map_err(|source| AccountingError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| AccountingError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|source| AccountingError::Corrupt {
            path: path.to_path_buf(),
            line: i + 1,
            source,
        })?;
        out.push(record);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn rec(service: &str, kind: ServiceKind, direction: Direction, bytes: u64, hit: Option<bool>, ts: u64) -> TransferRecord {
        TransferRecord {
            service: service.into(),
            kind,
            path: "/bbso/raw/a.fits".parse().unwrap(),
            direction,
            bytes,
            cache_hit: hit,
            client: "127.0.0.1".into(),
            timestamp: ts,
            duration_ms: 3,
        }
    }

    #[test]
    fn validation() {
        let log = AccountingLog::in_memory();
        log.append(rec("o", ServiceKind::Origin, Direction::Serve, 10, None, 1)).unwrap();
        assert_eq!(log.len(), 1);
        let missing_hit = rec("c", ServiceKind::Cache, Direction::Serve, 10, None, 1);
        assert!(matches!(log.append(missing_hit), Err(AccountingError::InvalidRecord(_))));
        let origin_hit = rec("o", ServiceKind::Origin, Direction::Serve, 10, Some(true), 1);
        assert!(log.append(origin_hit).is_err());
        let ingest_hit = rec("c", ServiceKind::Cache, Direction::Ingest, 10, Some(false), 1);
        assert!(log.append(ingest_hit).is_err());
        assert_eq!(log.len(), 1);
    }

    #[test]
    fn stats_examples() {
        let log = AccountingLog::in_memory();
        assert_eq!(log.stats(None, None), TransferStats::default());
        log.append(rec("o", ServiceKind::Origin, Direction::Serve, 10, None, 5)).unwrap();
        log.append(rec("c", ServiceKind::Cache, Direction::Serve, 20, Some(false), 6)).unwrap();
        let s = log.stats(None, None);
        assert_eq!(s.total_bytes, 30);
        assert_eq!((s.hits, s.misses), (0, 1));
        assert_eq!(log.stats(Some("o"), None).total_bytes, 10);
        assert_eq!(log.stats(None, Some(6)).records, 1);
    }

    fn random_log(seed: u64, n: usize) -> Vec<TransferRecord> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let cache = rng.random_bool(0.6);
                let serve = rng.random_bool(0.7);
                let (kind, service) = if cache {
                    (ServiceKind::Cache, format!("cache-{}", rng.random_range(0..4)))
                } else {
                    (ServiceKind::Origin, format!("origin-{}", rng.random_range(0..3)))
                };
                let direction = if serve { Direction::Serve } else { Direction::Ingest };
                let hit = (cache && serve).then(|| rng.random_bool(0.5));
                rec(&service, kind, direction, rng.random_range(0..1_000_000), hit, rng.random_range(0..100))
            })
            .collect()
    }

    #[test]
    fn aggregate_matches_independent_fold() {
        let log = random_log(7, 1000);
        for (service, since) in [(None, None), (Some("cache-1"), None), (None, Some(50)), (Some("origin-2"), Some(20))] {
            let got = aggregate_stats(&log, service, since);
            let mut records = 0;
            let mut total = 0;
            let mut hits = 0;
            let mut misses = 0;
            let mut by_service = BTreeMap::new();
            for r in &log {
                if service.is_some_and(|s| s != r.service) || since.is_some_and(|t| r.timestamp < t) {
                    continue;
                }
                records += 1;
                total += r.bytes;
                if r.kind == ServiceKind::Cache && r.direction == Direction::Serve {
                    if r.cache_hit == Some(true) {
                        hits += 1;
                    } else {
                        misses += 1;
                    }
                }
                *by_service.entry(r.service.clone()).or_insert(0u64) += r.bytes;
            }
            assert_eq!(got.records, records);
            assert_eq!(got.total_bytes, total);
            assert_eq!((got.hits, got.misses), (hits, misses));
            assert_eq!(got.bytes_by_service, by_service);
        }
    }

    #[test]
    fn unfiltered_equals_sum_of_per_service() {
        let log = random_log(11, 500);
        let all = aggregate_stats(&log, None, None);
        let mut summed = TransferStats::default();
        for service in all.bytes_by_service.keys() {
            summed.merge(&aggregate_stats(&log, Some(service), None));
        }
        assert_eq!(all, summed);
    }

    #[test]
    fn file_round_trip_and_concurrent_appends() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("accounting").join("transfers.jsonl");
        let log = Arc::new(AccountingLog::open(&path).unwrap());
        let records = random_log(3, 1000);
        std::thread::scope(|s| {
            for chunk in records.chunks(125) {
                let log = log.clone();
                s.spawn(move || {
                    for r in chunk {
                        log.append(r.clone()).unwrap();
                    }
                });
            }
        });
        assert_eq!(log.len(), 1000);
        log.sync().unwrap();
        let mut reread = read_log(&path).unwrap();
        let mut expected = records.clone();
        let key = |r: &TransferRecord| serde_json::to_string(r).unwrap();
        reread.sort_by_key(key);
        expected.sort_by_key(key);
        assert_eq!(reread, expected);

        drop(log);
        let reopened = AccountingLog::open(&path).unwrap();
        assert_eq!(reopened.len(), 1000);
    }

    #[test]
    fn log_line_has_exact_fields() {
        let r = rec("c", ServiceKind::Cache, Direction::Serve, 4, Some(true), 9);
        let v: serde_json::Value = serde_json::to_value(&r).unwrap();
        let mut keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        keys.sort();
        assert_eq!(
            keys,
            ["bytes", "cache_hit", "client", "direction", "duration_ms", "kind", "path", "service", "timestamp"]
        );
        assert_eq!(v["path"], "/bbso/raw/a.fits");
        assert_eq!(v["direction"], "serve");
    }
}
