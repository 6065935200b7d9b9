//! A director, one origin and two caches in a single process. Stores an
//! object, reads it twice through the nearest cache and prints accounting.

use osdf_fed::cache::{self, CacheConfig};
use osdf_fed::director::{self, DirectorConfig};
use osdf_fed::origin::{self, OriginConfig};
use osdf_fed::{FedClient, GeoPoint};

pub async fn run_example() -> Result<(bool, bool), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let (director, state) = director::start(&DirectorConfig::local(Some(dir.path().join("director")))).await?;
    std::fs::create_dir_all(dir.path().join("origin"))?;
    let _origin = origin::start(&OriginConfig {
        name: "bbso-origin".into(),
        prefix: "/bbso".parse()?,
        root_dir: dir.path().join("origin"),
        director_url: director.base_url(),
        listen_addr: "127.0.0.1:0".into(),
        location: GeoPoint::new(34.26, -116.92)?,
        heartbeat_s: 30,
        quota_bytes: None,
    })
    .await?;
    let mut caches = Vec::new();
    for (name, lat, lon) in [("cache-sandiego", 32.88, -117.23), ("cache-newyork", 40.71, -74.01)] {
        caches.push(
            cache::start(&CacheConfig {
                name: name.into(),
                listen_addr: "127.0.0.1:0".into(),
                director_url: director.base_url(),
                location: GeoPoint::new(lat, lon)?,
                store_dir: dir.path().join(name),
                capacity: 64 << 20,
                high_watermark: 0.9,
                low_watermark: 0.8,
                heartbeat_s: 30,
            })
            .await?,
        );
    }

    let client = FedClient::new(&director.base_url())
        .with_name("njit-lab")
        .with_geo(GeoPoint::new(40.74, -74.18)?);
    let path = "/bbso/raw/halpha-0001.fits".parse()?;
    client.store_bytes(vec![7u8; 1 << 20], &path).await?;
    let first = client.fetch(&path, &dir.path().join("a.fits"), false).await?;
    let second = client.fetch(&path, &dir.path().join("b.fits"), false).await?;
    println!("first  {} bytes from {} (hit: {:?})", first.bytes, first.source_used, first.cache_hit);
    println!("second {} bytes from {} (hit: {:?})", second.bytes, second.source_used, second.cache_hit);

    // Serve records are posted in the background; give them a moment.
    for _ in 0..50 {
        if state.accounting.snapshot().len() >= 4 {
            break;
        }
        tokio::time::sleep(std::time::Duration::from_millis(20)).await;
    }
    for r in state.accounting.snapshot() {
        println!("{:<15} {:<7} {:>8} B  client={}", r.service, format!("{:?}", r.direction), r.bytes, r.client);
    }
    Ok((first.cache_hit == Some(false), second.cache_hit == Some(true)))
}

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example().await.map(|_| ())
}
