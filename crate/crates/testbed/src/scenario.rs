//! Named end-to-end scenarios run against a launched federation.
//!
//! Every scenario writes fresh, uniquely named objects so it can run against a
//! federation that has already served traffic. Accounting is read back from
//! the director and compared byte for byte with what the clients moved.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Duration;

use osdf_fed::accounting::{Direction, TransferRecord};
use osdf_fed::client::{FedClient, FetchPlan};
use osdf_fed::registry::ServiceKind;
use osdf_fed::ObjectPath;
use osdf_solar::fits::{write_fits, Bitpix, FitsImage};
use osdf_solar::pipeline::PipelineConfig;
use osdf_solar::run::{process_bytes, run_pipeline, Location};
use osdf_solar::synth::{generate, SynthSpec};
use rand::{Rng, SeedableRng};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::launch::{Federation, Role};

pub const SCENARIOS: [&str; 4] = ["cold-hot", "stampede", "failover", "bbso-cycle"];

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("unknown scenario {0:?}; known: cold-hot, stampede, failover, bbso-cycle")]
    Unknown(String),
    #[error("{scenario} failed: {assertion}")]
    Failed { scenario: String, assertion: String, evidence: Value },
}

#[derive(Debug, Clone, Serialize)]
pub struct ScenarioReport {
    pub scenario: String,
    pub passed: bool,
    pub evidence: Value,
}

struct Ctx<'a> {
    scenario: &'static str,
    fed: &'a mut Federation,
    scratch: tempfile::TempDir,
    tag: String,
    evidence: serde_json::Map<String, Value>,
}

impl Ctx<'_> {
    fn fail(&self, assertion: impl Into<String>) -> ScenarioError {
        ScenarioError::Failed {
            scenario: self.scenario.to_owned(),
            assertion: assertion.into(),
            evidence: Value::Object(self.evidence.clone()),
        }
    }

    fn ensure(&self, cond: bool, assertion: impl FnOnce() -> String) -> Result<(), ScenarioError> {
        if cond {
            Ok(())
        } else {
            Err(self.fail(assertion()))
        }
    }

    fn note(&mut self, key: &str, value: impl Serialize) {
        self.evidence.insert(key.to_owned(), serde_json::to_value(value).expect("evidence serializes"));
    }

    fn client_name(&self, index: usize) -> String {
        self.fed
            .spec
            .clients
            .get(index)
            .map(|c| c.name.clone())
            .unwrap_or_else(|| format!("testbed-client-{index}"))
    }

    fn prefix(&self) -> Result<ObjectPath, ScenarioError> {
        self.fed
            .spec
            .origins
            .first()
            .map(|o| o.prefix.clone())
            .ok_or_else(|| self.fail("topology has no origin"))
    }

    fn object(&self, name: &str) -> Result<ObjectPath, ScenarioError> {
        let prefix = self.prefix()?;
        let path = format!("{prefix}/testbed/{}-{name}", self.tag);
        path.parse().map_err(|e| self.fail(format!("bad object path {path}: {e}")))
    }

    fn blob(&self, len: usize) -> Vec<u8> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(u64::from_str_radix(&self.tag, 16).unwrap_or(0));
        (0..len).map(|_| rng.random()).collect()
    }

    fn cache_name(&self, url: &str) -> Option<String> {
        let name = self.fed.name_of(url)?;
        self.fed
            .services()
            .any(|(n, role, _)| n == name && role == Role::Cache)
            .then(|| name.to_owned())
    }
}

pub fn sha256_hex(data: &[u8]) -> String {
    hex::encode(Sha256::digest(data))
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_default()
}

fn fresh_tag() -> String {
    let nanos = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_nanos())
        .unwrap_or(0);
    format!("{:x}", (nanos as u64) ^ u64::from(std::process::id()) << 40)
}

/// Records for `paths`, polled until `done` holds or `limit` passes.
async fn settle(
    client: &FedClient,
    paths: &[ObjectPath],
    limit: Duration,
    done: impl Fn(&[TransferRecord]) -> bool,
) -> Vec<TransferRecord> {
    let deadline = tokio::time::Instant::now() + limit;
    loop {
        let records: Vec<TransferRecord> = client
            .records(None)
            .await
            .unwrap_or_default()
            .into_iter()
            .filter(|r| paths.contains(&r.path))
            .collect();
        if done(&records) || tokio::time::Instant::now() >= deadline {
            return records;
        }
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
}

fn count(records: &[TransferRecord], kind: ServiceKind, direction: Direction, path: &ObjectPath) -> usize {
    records
        .iter()
        .filter(|r| r.kind == kind && r.direction == direction && &r.path == path)
        .count()
}

fn excerpt(records: &[TransferRecord]) -> Vec<String> {
    records
        .iter()
        .map(|r| {
            let hit = match r.cache_hit {
                Some(true) => " HIT",
                Some(false) => " MISS",
                None => "",
            };
            format!(
                "{} {:?} {:?} {} {}B client={}{hit}",
                r.service, r.kind, r.direction, r.path, r.bytes, r.client
            )
        })
        .collect()
}

pub async fn run_scenario(fed: &mut Federation, scenario: &str) -> Result<ScenarioReport, ScenarioError> {
    let name = SCENARIOS
        .iter()
        .find(|s| **s == scenario)
        .ok_or_else(|| ScenarioError::Unknown(scenario.to_owned()))?;
    let mut ctx = Ctx {
        scenario: name,
        fed,
        scratch: tempfile::tempdir().expect("scratch dir"),
        tag: fresh_tag(),
        evidence: serde_json::Map::new(),
    };
    match *name {
        "cold-hot" => cold_hot(&mut ctx).await?,
        "stampede" => stampede(&mut ctx).await?,
        "failover" => failover(&mut ctx).await?,
        _ => bbso_cycle(&mut ctx).await?,
    }
    Ok(ScenarioReport {
        scenario: name.to_string(),
        passed: true,
        evidence: Value::Object(ctx.evidence),
    })
}

async fn seed(ctx: &mut Ctx<'_>, name: &str, len: usize) -> Result<(ObjectPath, Vec<u8>), ScenarioError> {
    let path = ctx.object(name)?;
    let data = ctx.blob(len);
    let seeder = ctx.fed.client("testbed-seeder");
    seeder
        .store_bytes(data.clone(), &path)
        .await
        .map_err(|e| ctx.fail(format!("seeding {path}: {e}")))?;
    ctx.note("path", path.to_string());
    ctx.note("sha256", sha256_hex(&data));
    Ok((path, data))
}

async fn cold_hot(ctx: &mut Ctx<'_>) -> Result<(), ScenarioError> {
    let (path, data) = seed(ctx, "cold-hot.bin", 256 * 1024).await?;
    let client = ctx.fed.client(&ctx.client_name(0));
    let mut seen = Vec::new();
    for (i, expect_hit) in [(1, false), (2, true)] {
        let dest = ctx.scratch.path().join(format!("get{i}"));
        let report = client
            .fetch(&path, &dest, false)
            .await
            .map_err(|e| ctx.fail(format!("GET {i}: {e}")))?;
        let got = read(&dest);
        ctx.note(&format!("get{i}"), &report);
        ctx.ensure(ctx.cache_name(&report.source_used).is_some(), || {
            format!("GET {i} served by {} rather than a cache", report.source_used)
        })?;
        ctx.ensure(report.cache_hit == Some(expect_hit), || {
            format!("GET {i}: expected X-Cache {}, got {:?}", if expect_hit { "HIT" } else { "MISS" }, report.cache_hit)
        })?;
        ctx.ensure(sha256_hex(&got) == sha256_hex(&data), || format!("GET {i}: body hash differs"))?;
        seen.push(report.source_used);
    }
    ctx.ensure(seen[0] == seen[1], || format!("HIT came from {} but MISS from {}", seen[1], seen[0]))
}

async fn stampede(ctx: &mut Ctx<'_>) -> Result<(), ScenarioError> {
    const CLIENTS: usize = 8;
    let (path, data) = seed(ctx, "stampede.bin", 1 << 20).await?;
    let base = ctx.fed.client(&ctx.client_name(0));
    let plan = base.plan(&path, false).await.map_err(|e| ctx.fail(format!("resolve: {e}")))?;
    let cache_url = plan.sources.first().cloned().unwrap_or_default();
    let cache = ctx
        .cache_name(&cache_url)
        .ok_or_else(|| ctx.fail(format!("nearest source {cache_url} is not a cache")))?;
    ctx.note("cache", &cache);
    let single = FetchPlan {
        sources: vec![cache_url],
        attempts_per_source: 1,
    };
    let gets = (0..CLIENTS).map(|i| {
        let client = ctx.fed.client(&format!("stampede-{i}"));
        let dest = ctx.scratch.path().join(format!("s{i}"));
        let plan = single.clone();
        async move {
            let r = client.fetch_with_plan(&plan, &dest).await;
            (r, read(&dest))
        }
    });
    let results = futures::future::join_all(gets).await;
    for (i, (r, body)) in results.iter().enumerate() {
        ctx.ensure(r.is_ok(), || format!("client {i}: {}", r.as_ref().unwrap_err()))?;
        ctx.ensure(sha256_hex(body) == sha256_hex(&data), || format!("client {i}: body hash differs"))?;
    }
    settle(&base, std::slice::from_ref(&path), Duration::from_secs(10), |r| {
        count(r, ServiceKind::Cache, Direction::Serve, &path) >= CLIENTS
            && count(r, ServiceKind::Origin, Direction::Serve, &path) >= 1
    })
    .await;
    // give a duplicate upstream fetch time to show up before counting
    tokio::time::sleep(Duration::from_millis(300)).await;
    let records = settle(&base, std::slice::from_ref(&path), Duration::ZERO, |_| true).await;
    let origin_serves = count(&records, ServiceKind::Origin, Direction::Serve, &path);
    let cache_serves = count(&records, ServiceKind::Cache, Direction::Serve, &path);
    ctx.note("accounting", excerpt(&records));
    ctx.note("origin_serve_records", origin_serves);
    ctx.note("cache_serve_records", cache_serves);
    ctx.ensure(cache_serves == CLIENTS, || format!("{cache_serves} cache serve records, expected {CLIENTS}"))?;
    ctx.ensure(origin_serves == 1, || format!("{origin_serves} origin serve records, expected exactly 1"))
}

async fn failover(ctx: &mut Ctx<'_>) -> Result<(), ScenarioError> {
    let (path, data) = seed(ctx, "failover.bin", 64 * 1024).await?;
    let client = ctx.fed.client(&ctx.client_name(0));
    let plan = client.plan(&path, false).await.map_err(|e| ctx.fail(format!("resolve: {e}")))?;
    let first = plan.sources.first().cloned().unwrap_or_default();
    let victim = ctx
        .cache_name(&first)
        .ok_or_else(|| ctx.fail(format!("first source {first} is not a cache")))?;
    let victim_url = ctx.fed.base_url(&victim).unwrap_or_default().to_owned();
    ctx.note("killed", &victim);
    let killed = ctx.fed.kill(&victim).await;
    ctx.ensure(killed, || format!("could not kill {victim}"))?;

    let dest = ctx.scratch.path().join("after-kill");
    let report = client
        .fetch(&path, &dest, false)
        .await
        .map_err(|e| ctx.fail(format!("fetch after killing {victim}: {e}")))?;
    ctx.note("fetch", &report);
    ctx.ensure(!report.source_used.starts_with(&victim_url), || {
        format!("still served by the killed cache {victim_url}")
    })?;
    ctx.ensure(report.failures.iter().any(|f| f.contains(&victim_url)), || {
        format!("no recorded failure against {victim_url}: {:?}", report.failures)
    })?;
    ctx.ensure(sha256_hex(&read(&dest)) == sha256_hex(&data), || "body hash differs after failover".into())
}

async fn bbso_cycle(ctx: &mut Ctx<'_>) -> Result<(), ScenarioError> {
    let prefix = ctx.prefix()?;
    let image_name = format!("halpha-{}.fits", ctx.tag);
    let raw: ObjectPath = format!("{prefix}/raw/{image_name}").parse().expect("valid path");
    let processed: ObjectPath = format!("{prefix}/processed").parse().expect("valid path");
    let synth = generate(&SynthSpec {
        noise: 0.02,
        seed: 7,
        ..Default::default()
    });
    let fits = write_fits(&FitsImage::new(synth.image), Bitpix::F32).map_err(|e| ctx.fail(e.to_string()))?;

    let telescope = ctx.fed.client("bbso-telescope");
    telescope
        .store_bytes(fits.clone(), &raw)
        .await
        .map_err(|e| ctx.fail(format!("seeding {raw}: {e}")))?;
    ctx.note("raw", json!({ "path": raw.to_string(), "bytes": fits.len(), "sha256": sha256_hex(&fits) }));

    let worker_name = ctx.client_name(0);
    let worker = ctx.fed.client(&worker_name);
    let input_route = worker.locate(&raw).await.map_err(|e| ctx.fail(format!("resolve {raw}: {e}")))?;
    let input_cache = input_route
        .cache_urls
        .first()
        .and_then(|u| ctx.cache_name(u))
        .ok_or_else(|| ctx.fail("no cache serves the worker"))?;
    let cfg = PipelineConfig::default();
    let run = run_pipeline(
        &Location::Federation(raw.clone()),
        &Location::Federation(processed.clone()),
        &cfg,
        Some(&worker),
    )
    .await
    .map_err(|e| ctx.fail(format!("pipeline: {e}")))?;
    ctx.note("pipeline", &run);
    ctx.ensure(run.filaments == 3, || format!("pipeline found {} filaments, expected 3", run.filaments))?;

    let (_, local) = process_bytes(&image_name, &fits, &cfg).map_err(|e| ctx.fail(format!("local pipeline: {e}")))?;

    let verifier_name = ctx.client_name(1);
    let verifier = ctx.fed.client(&verifier_name);
    let mut product_paths = Vec::new();
    let mut hashes = BTreeMap::new();
    let mut verify_cache = None;
    for (name, expected) in &local.files {
        let path = processed.join(name).expect("valid product name");
        let route = verifier.locate(&path).await.map_err(|e| ctx.fail(format!("resolve {path}: {e}")))?;
        let other = route
            .cache_urls
            .iter()
            .find(|u| ctx.cache_name(u).is_some_and(|c| c != input_cache))
            .cloned()
            .ok_or_else(|| ctx.fail("no second cache to read products through"))?;
        verify_cache = ctx.cache_name(&other);
        let dest = ctx.scratch.path().join(name);
        let plan = FetchPlan {
            sources: vec![other],
            attempts_per_source: 2,
        };
        verifier
            .fetch_with_plan(&plan, &dest)
            .await
            .map_err(|e| ctx.fail(format!("fetch {path}: {e}")))?;
        let got = read(&dest);
        hashes.insert(name.clone(), json!({ "local": sha256_hex(expected), "federation": sha256_hex(&got) }));
        ctx.ensure(&got == expected, || format!("{name}: federation copy differs from the local product"))?;
        product_paths.push((path, expected.len() as u64));
    }
    ctx.note("input_cache", &input_cache);
    ctx.note("verify_cache", &verify_cache);
    ctx.note("products", &hashes);

    let mut paths = vec![raw.clone()];
    paths.extend(product_paths.iter().map(|(p, _)| p.clone()));
    let sizes: BTreeMap<ObjectPath, u64> = std::iter::once((raw.clone(), fits.len() as u64))
        .chain(product_paths.iter().cloned())
        .collect();
    // seed and three product uploads, then a cold read of each object through one cache
    let expected_records = 4 + 3 * 4;
    let records = settle(&worker, &paths, Duration::from_secs(15), |r| r.len() >= expected_records).await;
    ctx.note("accounting", excerpt(&records));
    ctx.ensure(records.len() == expected_records, || {
        format!("{} accounting records for the cycle, expected {expected_records}", records.len())
    })?;
    conservation(ctx, &records, &sizes, &[(&worker_name, vec![raw.clone()]), (&verifier_name, product_paths.iter().map(|(p, _)| p.clone()).collect())])
}

/// Every transfer moved the whole object, every cache ingest is matched by an
/// origin serve to that cache, and each client received exactly what the
/// serve records say.
fn conservation(
    ctx: &mut Ctx<'_>,
    records: &[TransferRecord],
    sizes: &BTreeMap<ObjectPath, u64>,
    clients: &[(&str, Vec<ObjectPath>)],
) -> Result<(), ScenarioError> {
    for r in records {
        let size = sizes.get(&r.path).copied().unwrap_or(0);
        ctx.ensure(r.bytes == size, || format!("{} {:?} {:?} {}: {} bytes, object has {size}", r.service, r.kind, r.direction, r.path, r.bytes))?;
    }
    let mut ingest: BTreeMap<(&str, &ObjectPath), u64> = BTreeMap::new();
    let mut fed_to_cache: BTreeMap<(&str, &ObjectPath), u64> = BTreeMap::new();
    for r in records {
        match (r.kind, r.direction) {
            (ServiceKind::Cache, Direction::Ingest) => *ingest.entry((r.service.as_str(), &r.path)).or_default() += r.bytes,
            (ServiceKind::Origin, Direction::Serve) => *fed_to_cache.entry((r.client.as_str(), &r.path)).or_default() += r.bytes,
            _ => {}
        }
    }
    ctx.ensure(ingest == fed_to_cache, || format!("cache ingest {ingest:?} != origin serves to caches {fed_to_cache:?}"))?;

    let uploads: u64 = records
        .iter()
        .filter(|r| r.kind == ServiceKind::Origin && r.direction == Direction::Ingest)
        .map(|r| r.bytes)
        .sum();
    let uploaded: u64 = sizes.values().sum();
    ctx.ensure(uploads == uploaded, || format!("origin ingest {uploads} bytes, clients uploaded {uploaded}"))?;

    let mut table = Vec::new();
    for (client, paths) in clients {
        let received: u64 = paths.iter().map(|p| sizes[p]).sum();
        let served: u64 = records
            .iter()
            .filter(|r| r.direction == Direction::Serve && r.client == *client)
            .map(|r| r.bytes)
            .sum();
        table.push(json!({ "client": client, "received": received, "served": served }));
        ctx.ensure(served == received, || format!("{client}: served {served} bytes, received {received}"))?;
    }
    ctx.note("conservation", table);
    Ok(())
}
