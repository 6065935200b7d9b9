//! Federation layouts as JSON.
//!
//! Origin and cache entries are ordinary service configs; their
//! `director_url` is filled in at launch and relative directories are taken
//! relative to the launch work directory.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use osdf_fed::cache::CacheConfig;
use osdf_fed::origin::OriginConfig;
use osdf_fed::GeoPoint;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectorSpec {
    pub listen_addr: String,
    #[serde(default)]
    pub geo_table: Option<PathBuf>,
    #[serde(default)]
    pub staleness_s: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientSpec {
    pub name: String,
    pub geo: GeoPoint,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TopologySpec {
    pub director: DirectorSpec,
    pub origins: Vec<OriginConfig>,
    pub caches: Vec<CacheConfig>,
    #[serde(default)]
    pub clients: Vec<ClientSpec>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TopologyError {
    #[error("duplicate service name {0}")]
    DuplicateName(String),
    #[error("duplicate listen address {0}")]
    DuplicateAddress(String),
    #[error("duplicate client name {0}")]
    DuplicateClient(String),
    #[error("{0}")]
    Invalid(String),
}

/// Port 0 asks the OS for a free port, so those addresses never clash.
fn is_ephemeral(addr: &str) -> bool {
    addr.rsplit_once(':').is_some_and(|(_, port)| port == "0")
}

impl TopologySpec {
    pub fn from_json(text: &str) -> Result<TopologySpec, TopologyError> {
        let spec: TopologySpec = serde_json::from_str(text).map_err(|e| TopologyError::Invalid(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<TopologySpec, TopologyError> {
        let text = std::fs::read_to_string(path).map_err(|e| TopologyError::Invalid(format!("{}: {e}", path.display())))?;
        TopologySpec::from_json(&text)
    }

    /// Names and listen addresses unique. Prefix clashes are left to the
    /// director, which rejects the second registration.
    pub fn validate(&self) -> Result<(), TopologyError> {
        let mut names = HashSet::from(["director".to_owned()]);
        let mut addrs = HashSet::new();
        if !is_ephemeral(&self.director.listen_addr) {
            addrs.insert(self.director.listen_addr.clone());
        }
        let services = self
            .origins
            .iter()
            .map(|o| (&o.name, &o.listen_addr))
            .chain(self.caches.iter().map(|c| (&c.name, &c.listen_addr)));
        for (name, addr) in services {
            if !names.insert(name.clone()) {
                return Err(TopologyError::DuplicateName(name.clone()));
            }
            if !is_ephemeral(addr) && !addrs.insert(addr.clone()) {
                return Err(TopologyError::DuplicateAddress(addr.clone()));
            }
        }
        let mut clients = HashSet::new();
        for c in &self.clients {
            if !clients.insert(&c.name) {
                return Err(TopologyError::DuplicateClient(c.name.clone()));
            }
        }
        Ok(())
    }

    pub fn client(&self, name: &str) -> Option<&ClientSpec> {
        self.clients.iter().find(|c| c.name == name)
    }

    /// `origins` origins exporting `/o00`, `/o01`, ... and `caches` caches,
    /// all on ephemeral loopback ports at random points on the globe.
    pub fn scaled(origins: usize, caches: usize, clients: usize, seed: u64) -> TopologySpec {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut point = move || GeoPoint::new(rng.random_range(-90.0..=90.0), rng.random_range(-180.0..180.0)).expect("in range");
        TopologySpec {
            director: DirectorSpec {
                listen_addr: "127.0.0.1:0".into(),
                geo_table: None,
                staleness_s: None,
            },
            origins: (0..origins)
                .map(|i| origin(&format!("origin-{i:02}"), &format!("/o{i:02}"), point()))
                .collect(),
            caches: (0..caches).map(|i| cache(&format!("cache-{i:02}"), point(), 64 << 20)).collect(),
            clients: (0..clients)
                .map(|i| ClientSpec {
                    name: format!("client-{i:02}"),
                    geo: point(),
                })
                .collect(),
        }
    }

    /// One origin exporting `/bbso` near Big Bear, three caches across the
    /// US and two clients, each next to a different cache.
    pub fn desk() -> TopologySpec {
        let at = |lat, lon| GeoPoint::new(lat, lon).expect("in range");
        TopologySpec {
            director: DirectorSpec {
                listen_addr: "127.0.0.1:0".into(),
                geo_table: None,
                staleness_s: None,
            },
            origins: vec![origin("bbso-origin", "/bbso", at(34.26, -116.92))],
            caches: vec![
                cache("cache-sandiego", at(32.88, -117.23), 256 << 20),
                cache("cache-chicago", at(41.88, -87.63), 256 << 20),
                cache("cache-newyork", at(40.71, -74.01), 256 << 20),
            ],
            clients: vec![
                ClientSpec {
                    name: "njit-lab".into(),
                    geo: at(40.74, -74.18),
                },
                ClientSpec {
                    name: "ucsd-lab".into(),
                    geo: at(32.87, -117.24),
                },
            ],
        }
    }
}

pub fn origin(name: &str, prefix: &str, location: GeoPoint) -> OriginConfig {
    OriginConfig {
        name: name.into(),
        prefix: prefix.parse().expect("valid prefix"),
        root_dir: PathBuf::from("origins").join(name),
        director_url: String::new(),
        listen_addr: "127.0.0.1:0".into(),
        location,
        heartbeat_s: osdf_fed::origin::DEFAULT_HEARTBEAT_S,
        quota_bytes: None,
    }
}

pub fn cache(name: &str, location: GeoPoint, capacity: u64) -> CacheConfig {
    CacheConfig {
        name: name.into(),
        listen_addr: "127.0.0.1:0".into(),
        director_url: String::new(),
        location,
        store_dir: PathBuf::from("caches").join(name),
        capacity,
        high_watermark: 0.9,
        low_watermark: 0.8,
        heartbeat_s: osdf_fed::origin::DEFAULT_HEARTBEAT_S,
    }
}
