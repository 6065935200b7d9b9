//! Ranks a handful of caches for clients in different cities.

use osdf_fed::{haversine_km, GeoPoint, ObjectPath, Registry, ServiceRecord};

pub fn run_example() -> Result<Vec<String>, Box<dyn std::error::Error>> {
    let at = |lat, lon| GeoPoint::new(lat, lon);
    let registry = Registry::default();
    registry.register(ServiceRecord::origin(
        "bbso-origin",
        "http://origin.example:8443",
        at(34.26, -116.92)?,
        vec!["/bbso".parse()?],
    ))?;
    let caches = [
        ("cache-sandiego", at(32.88, -117.23)?),
        ("cache-chicago", at(41.88, -87.63)?),
        ("cache-newyork", at(40.71, -74.01)?),
        ("cache-amsterdam", at(52.37, 4.90)?),
    ];
    for (name, loc) in caches {
        registry.register(ServiceRecord::cache(name, &format!("http://{name}.example:8443"), loc))?;
    }

    let path: ObjectPath = "/bbso/halpha/20240408/frame-0001.fits".parse()?;
    let mut firsts = Vec::new();
    for (who, client) in [("Newark", at(40.74, -74.18)?), ("La Jolla", at(32.87, -117.24)?), ("Berlin", at(52.52, 13.40)?)] {
        let res = registry.resolve(&path, Some(client))?;
        println!("{who}:");
        for url in &res.cache_urls {
            let (name, loc) = caches.iter().find(|(n, _)| url.contains(n)).expect("known cache");
            println!("  {:>8.0} km  {name}", haversine_km(client, *loc));
        }
        println!("  fallback  {}", res.origin_url);
        firsts.push(res.cache_urls[0].clone());
    }
    Ok(firsts)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example().map(|_| ())
}
