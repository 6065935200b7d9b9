#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use osdf_fed::cache::{self, CacheConfig};
use osdf_fed::director::{self, DirectorConfig, DirectorState};
use osdf_fed::origin::{self, OriginConfig};
use osdf_fed::wire::ServiceHandle;
use osdf_fed::{GeoPoint, ObjectPath, TransferRecord};

pub fn p(s: &str) -> ObjectPath {
    s.parse().unwrap()
}

pub fn pt(lat: f64, lon: f64) -> GeoPoint {
    GeoPoint::new(lat, lon).unwrap()
}

/// Director, one origin exporting `/bbso`, and caches at the given points, all in-process.
pub struct Fed {
    pub dir: tempfile::TempDir,
    pub director: ServiceHandle,
    pub state: Arc<DirectorState>,
    pub origin: ServiceHandle,
    pub origin_root: PathBuf,
    pub caches: Vec<ServiceHandle>,
}

impl Fed {
    pub async fn start(cache_points: &[(&str, GeoPoint)], capacity: u64) -> Fed {
        let dir = tempfile::tempdir().unwrap();
        let (director, state) = director::start(&DirectorConfig::local(Some(dir.path().join("director"))))
            .await
            .unwrap();
        let origin_root = dir.path().join("origin");
        std::fs::create_dir_all(&origin_root).unwrap();
        let origin = origin::start(&OriginConfig {
            name: "bbso-origin".into(),
            prefix: p("/bbso"),
            root_dir: origin_root.clone(),
            director_url: director.base_url(),
            listen_addr: "127.0.0.1:0".into(),
            location: pt(34.26, -116.92),
            heartbeat_s: 100,
            quota_bytes: None,
        })
        .await
        .unwrap();
        let mut caches = Vec::new();
        for (name, location) in cache_points {
            caches.push(
                cache::start(&CacheConfig {
                    name: (*name).into(),
                    listen_addr: "127.0.0.1:0".into(),
                    director_url: director.base_url(),
                    location: *location,
                    store_dir: dir.path().join("caches").join(name),
                    capacity,
                    high_watermark: 0.9,
                    low_watermark: 0.8,
                    heartbeat_s: 100,
                })
                .await
                .unwrap(),
            );
        }
        Fed {
            dir,
            director,
            state,
            origin,
            origin_root,
            caches,
        }
    }

    pub fn seed(&self, rel: &str, data: &[u8]) {
        let file = self.origin_root.join(rel);
        std::fs::create_dir_all(file.parent().unwrap()).unwrap();
        std::fs::write(file, data).unwrap();
    }

    pub fn records(&self) -> Vec<TransferRecord> {
        self.state.accounting.snapshot()
    }

    /// Polls the accounting log until `pred` holds (records arrive asynchronously).
    pub async fn wait_records(&self, pred: impl Fn(&[TransferRecord]) -> bool) -> Vec<TransferRecord> {
        for _ in 0..200 {
            let recs = self.records();
            if pred(&recs) {
                return recs;
            }
            tokio::time::sleep(Duration::from_millis(20)).await;
        }
        panic!("accounting condition not reached; records: {:#?}", self.records());
    }
}

pub fn blob(n: usize, seed: u8) -> Vec<u8> {
    (0..n).map(|i| (i as u8).wrapping_mul(31).wrapping_add(seed)).collect()
}

pub fn http() -> reqwest::Client {
    reqwest::Client::builder().no_proxy().build().unwrap()
}
