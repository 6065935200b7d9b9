//! Client geolocation and proximity ranking of caches.

use std::io::Read;
use std::net::IpAddr;
use std::str::FromStr;

use ipnet::IpNet;
use serde::{Deserialize, Serialize};

use crate::registry::ServiceRecord;

pub const EARTH_RADIUS_KM: f64 = 6371.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GeoError {
    #[error("coordinate out of range: lat {lat}, lon {lon}")]
    OutOfRange { lat: f64, lon: f64 },
    #[error("geo table line {line}: {reason}")]
    GeoTableParse { line: u64, reason: String },
    #[error("bad coordinate pair {0:?}, expected \"lat,lon\"")]
    BadPair(String),
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self, GeoError> {
        let ok = lat.is_finite()
            && lon.is_finite()
            && (-90.0..=90.0).contains(&lat)
            && (-180.0..=180.0).contains(&lon);
        if ok {
            Ok(GeoPoint { lat, lon })
        } else {
            Err(GeoError::OutOfRange { lat, lon })
        }
    }

    pub fn is_valid(&self) -> bool {
        GeoPoint::new(self.lat, self.lon).is_ok()
    }
}

/// Parses the `X-Client-Geo` header form `"lat,lon"`.
impl FromStr for GeoPoint {
    type Err = GeoError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || GeoError::BadPair(s.to_owned());
        let (lat, lon) = s.split_once(',').ok_or_else(bad)?;
        let lat = lat.trim().parse::<f64>().map_err(|_| bad())?;
        let lon = lon.trim().parse::<f64>().map_err(|_| bad())?;
        GeoPoint::new(lat, lon)
    }
}

impl std::fmt::Display for GeoPoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{},{}", self.lat, self.lon)
    }
}

/// CIDR → location rows, matched by longest prefix.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GeoTable {
    rows: Vec<(IpNet, GeoPoint)>,
}

impl GeoTable {
    pub fn rows(&self) -> &[(IpNet, GeoPoint)] {
        &self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn lookup(&self, ip: IpAddr) -> Option<GeoPoint> {
        lookup_client(self, ip, None)
    }
}

/// Reads `cidr,lat,lon` CSV (header row required).
pub fn load_geo_table<R: Read>(source: R) -> Result<GeoTable, GeoError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(source);
    let headers = reader.headers().map_err(|e| GeoError::GeoTableParse {
        line: 1,
        reason: e.to_string(),
    })?;
    if headers.iter().collect::<Vec<_>>() != ["cidr", "lat", "lon"] {
        return Err(GeoError::GeoTableParse {
            line: 1,
            reason: format!("expected header cidr,lat,lon, got {headers:?}"),
        });
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| GeoError::GeoTableParse {
            line: e.position().map(|p| p.line()).unwrap_or(0),
            reason: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let fail = |reason: String| GeoError::GeoTableParse { line, reason };
        if record.len() != 3 {
            return Err(fail(format!("expected 3 columns, got {}", record.len())));
        }
        let cidr = IpNet::from_str(&record[0]).map_err(|e| fail(format!("cidr: {e}")))?;
        let lat = record[1].parse::<f64>().map_err(|e| fail(format!("lat: {e}")))?;
        let lon = record[2].parse::<f64>().map_err(|e| fail(format!("lon: {e}")))?;
        let point = GeoPoint::new(lat, lon).map_err(|e| fail(e.to_string()))?;
        rows.push((cidr, point));
    }
    Ok(GeoTable { rows })
}

/// Override wins; otherwise the longest CIDR containing `ip`.
pub fn lookup_client(table: &GeoTable, ip: IpAddr, override_geo: Option<GeoPoint>) -> Option<GeoPoint> {
    if override_geo.is_some() {
        return override_geo;
    }
    let ip = match ip {
        IpAddr::V6(v6) => v6.to_ipv4_mapped().map(IpAddr::V4).unwrap_or(ip),
        v4 => v4,
    };
    table
        .rows
        .iter()
        .filter(|(net, _)| net.contains(&ip))
        .max_by_key(|(net, _)| net.prefix_len())
        .map(|(_, point)| *point)
}

/// Great-circle distance on a sphere of radius [`EARTH_RADIUS_KM`].
///
/// The pair is put in a fixed order before evaluation so the result is
/// bit-for-bit symmetric.
pub fn haversine_km(a: GeoPoint, b: GeoPoint) -> f64 {
    let (p, q) = if (a.lat, a.lon) <= (b.lat, b.lon) { (a, b) } else { (b, a) };
    let (lat1, lat2) = (p.lat.to_radians(), q.lat.to_radians());
    let dlat = lat2 - lat1;
    let dlon = (q.lon - p.lon).to_radians();
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    let central = 2.0 * h.clamp(0.0, 1.0).sqrt().asin();
    EARTH_RADIUS_KM * central
}

/// Orders `items` nearest-first from `client`, ties and unknown clients by name.
pub fn rank_by_proximity<T, F>(client: Option<GeoPoint>, items: &[T], key: F) -> Vec<T>
where
    T: Clone,
    F: Fn(&T) -> (&str, GeoPoint),
{
    let mut keyed: Vec<(f64, &T)> = items
        .iter()
        .map(|item| {
            let d = client.map(|c| haversine_km(c, key(item).1)).unwrap_or(0.0);
            (d, item)
        })
        .collect();
    keyed.sort_by(|(da, a), (db, b)| da.total_cmp(db).then_with(|| key(a).0.cmp(key(b).0)));
    keyed.into_iter().map(|(_, item)| item.clone()).collect()
}

pub fn rank_caches(client: Option<GeoPoint>, caches: &[ServiceRecord]) -> Vec<ServiceRecord> {
    rank_by_proximity(client, caches, |c| (c.name.as_str(), c.location))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn pt(lat: f64, lon: f64) -> GeoPoint {
        GeoPoint::new(lat, lon).unwrap()
    }

    #[test]
    fn parses_table() {
        let t = load_geo_table("cidr,lat,lon\n10.0.0.0/8,32.7157,-117.1611".as_bytes()).unwrap();
        assert_eq!(t.rows().len(), 1);
        assert!(load_geo_table("cidr,lat,lon\n".as_bytes()).unwrap().is_empty());
        let err = load_geo_table("cidr,lat,lon\n10.0.0.0/8,1,2\n10.0.0.0/8,91,0\n".as_bytes()).unwrap_err();
        assert!(matches!(err, GeoError::GeoTableParse { line: 3, .. }), "{err:?}");
        assert!(load_geo_table("cidr,lat\n".as_bytes()).is_err());
        assert!(load_geo_table("cidr,lat,lon\nnot-a-net,1,2\n".as_bytes()).is_err());
    }

    #[test]
    fn lookup_prefers_override_then_longest() {
        let t = load_geo_table(
            "cidr,lat,lon\n10.0.0.0/8,1,1\n10.1.0.0/16,2,2\n2001:db8::/32,3,3\n".as_bytes(),
        )
        .unwrap();
        assert_eq!(lookup_client(&t, "10.1.2.3".parse().unwrap(), None), Some(pt(2.0, 2.0)));
        assert_eq!(lookup_client(&t, "10.9.2.3".parse().unwrap(), None), Some(pt(1.0, 1.0)));
        assert_eq!(lookup_client(&t, "192.168.0.1".parse().unwrap(), None), None);
        assert_eq!(lookup_client(&t, "2001:db8::1".parse().unwrap(), None), Some(pt(3.0, 3.0)));
        assert_eq!(
            lookup_client(&t, "192.168.0.1".parse().unwrap(), Some(pt(0.0, 0.0))),
            Some(pt(0.0, 0.0))
        );
    }

    #[test]
    fn header_pair_parse() {
        assert_eq!("32.5, -117".parse::<GeoPoint>().unwrap(), pt(32.5, -117.0));
        assert!("91,0".parse::<GeoPoint>().is_err());
        assert!("nope".parse::<GeoPoint>().is_err());
    }

    #[test]
    fn haversine_reference_values() {
        let sd = pt(32.7157, -117.1611);
        assert_eq!(haversine_km(sd, sd), 0.0);
        // direct evaluation of the textbook formula, computed independently
        let expected = 2_786.666_958_362_139_7_f64;
        let got = haversine_km(sd, pt(41.8781, -87.6298));
        assert!(((got - expected) / expected).abs() < 1e-6, "{got}");
        let anti = haversine_km(pt(0.0, 0.0), pt(0.0, 180.0));
        assert!(((anti - PI * EARTH_RADIUS_KM) / (PI * EARTH_RADIUS_KM)).abs() < 1e-9);
    }

    fn named(name: &str, lat: f64, lon: f64) -> ServiceRecord {
        ServiceRecord::cache(name, &format!("http://{name}"), pt(lat, lon))
    }

    #[test]
    fn ranks_by_distance_then_name() {
        let one = vec![named("only", 5.0, 5.0)];
        assert_eq!(rank_caches(Some(pt(0.0, 0.0)), &one)[0].name, "only");
        let caches = vec![named("b", 0.0, 1.0), named("a", 0.0, 2.0)];
        let order: Vec<_> = rank_caches(Some(pt(0.0, 0.0)), &caches).into_iter().map(|c| c.name).collect();
        assert_eq!(order, ["b", "a"]);
        let caches = vec![named("y", 0.0, 1.0), named("x", 0.0, -1.0)];
        let order: Vec<_> = rank_caches(Some(pt(0.0, 0.0)), &caches).into_iter().map(|c| c.name).collect();
        assert_eq!(order, ["x", "y"]);
        let order: Vec<_> = rank_caches(None, &[named("b", 0.0, 1.0), named("a", 9.0, 9.0)])
            .into_iter()
            .map(|c| c.name)
            .collect();
        assert_eq!(order, ["a", "b"]);
    }

    fn point() -> impl Strategy<Value = GeoPoint> {
        (-90.0f64..=90.0, -180.0f64..=180.0).prop_map(|(lat, lon)| pt(lat, lon))
    }

    proptest! {
        #[test]
        fn haversine_symmetric_and_bounded(a in point(), b in point()) {
            let d = haversine_km(a, b);
            prop_assert_eq!(d.to_bits(), haversine_km(b, a).to_bits());
            prop_assert_eq!(haversine_km(a, a), 0.0);
            prop_assert!((0.0..=PI * EARTH_RADIUS_KM).contains(&d));
        }

        #[test]
        fn ranking_is_a_deterministic_permutation(client in point(), pts in prop::collection::vec(point(), 0..12)) {
            let caches: Vec<_> = pts.iter().enumerate().map(|(i, p)| named(&format!("c{i:02}"), p.lat, p.lon)).collect();
            let first = rank_caches(Some(client), &caches);
            let second = rank_caches(Some(client), &caches);
            prop_assert_eq!(&first, &second);
            let mut names: Vec<_> = first.iter().map(|c| c.name.clone()).collect();
            names.sort();
            let mut expected: Vec<_> = caches.iter().map(|c| c.name.clone()).collect();
            expected.sort();
            prop_assert_eq!(names, expected);
        }

        #[test]
        fn ranking_invariant_under_distance_scaling(client in point(), pts in prop::collection::vec(point(), 1..10), scale in 0.1f64..10.0) {
            let items: Vec<(String, GeoPoint)> = pts.iter().enumerate().map(|(i, p)| (format!("c{i}"), *p)).collect();
            let by_distance = rank_by_proximity(Some(client), &items, |(n, p)| (n.as_str(), *p));
            let mut scaled: Vec<(f64, &str)> = items.iter().map(|(n, p)| (haversine_km(client, *p) * scale, n.as_str())).collect();
            scaled.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)));
            let lhs: Vec<&str> = by_distance.iter().map(|(n, _)| n.as_str()).collect();
            let rhs: Vec<&str> = scaled.iter().map(|(_, n)| *n).collect();
            prop_assert_eq!(lhs, rhs);
        }
    }
}
