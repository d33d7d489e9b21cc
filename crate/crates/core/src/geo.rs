//! GeoIP lookup and proximity ranking of replicas.
//!
//! The database is a local CSV of `cidr,lat,lon` rows. Lookups use
//! longest-prefix match; distances are great-circle (haversine) on a sphere
//! of radius [`EARTH_RADIUS_KM`].

use std::collections::HashMap;
use std::net::IpAddr;
use std::path::Path;

use ipnet::IpNet;
use serde::{Deserialize, Serialize};

pub const EARTH_RADIUS_KM: f64 = 6371.0;

#[derive(Debug, thiserror::Error)]
pub enum GeoError {
    #[error("latitude {0} outside [-90, 90]")]
    Latitude(f64),
    #[error("longitude {0} outside (-180, 180]")]
    Longitude(f64),
    #[error("geo db line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("reading geo db: {0}")]
    Io(#[from] std::io::Error),
}

/// A position in degrees. Latitude in [-90, 90], longitude in (-180, 180].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawPoint", into = "RawPoint")]
pub struct GeoPoint {
    lat: f64,
    lon: f64,
}

#[derive(Serialize, Deserialize)]
struct RawPoint {
    lat: f64,
    lon: f64,
}

impl TryFrom<RawPoint> for GeoPoint {
    type Error = GeoError;
    fn try_from(raw: RawPoint) -> Result<Self, GeoError> {
        GeoPoint::new(raw.lat, raw.lon)
    }
}

impl From<GeoPoint> for RawPoint {
    fn from(p: GeoPoint) -> Self {
        RawPoint { lat: p.lat, lon: p.lon }
    }
}

impl GeoPoint {
    /// -180 is accepted and folded onto the same meridian at 180.
    pub fn new(lat: f64, lon: f64) -> Result<Self, GeoError> {
        if !(-90.0..=90.0).contains(&lat) {
            return Err(GeoError::Latitude(lat));
        }
        if !(-180.0..=180.0).contains(&lon) {
            return Err(GeoError::Longitude(lon));
        }
        let lon = if lon == -180.0 { 180.0 } else { lon };
        Ok(GeoPoint { lat, lon })
    }

    pub fn lat(&self) -> f64 {
        self.lat
    }

    pub fn lon(&self) -> f64 {
        self.lon
    }
}

/// Great-circle distance in kilometres.
pub fn haversine(a: GeoPoint, b: GeoPoint) -> f64 {
    let (lat1, lat2) = (a.lat.to_radians(), b.lat.to_radians());
    let dlat = lat2 - lat1;
    let dlon = (b.lon - a.lon).to_radians();
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    let h = h.clamp(0.0, 1.0);
    2.0 * EARTH_RADIUS_KM * h.sqrt().atan2((1.0 - h).sqrt())
}

/// Order replica endpoints by distance from the client, nearest first.
///
/// Ties, and every comparison when the client location is unknown, fall back
/// to lexicographic endpoint id, so the order is total and independent of
/// input order.
pub fn rank<S: AsRef<str>>(replicas: &[(S, GeoPoint)], client: Option<GeoPoint>) -> Vec<String> {
    let mut keyed: Vec<(f64, &str)> = replicas
        .iter()
        .map(|(id, loc)| {
            let d = client.map_or(0.0, |c| haversine(c, *loc));
            (d, id.as_ref())
        })
        .collect();
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)));
    keyed.into_iter().map(|(_, id)| id.to_string()).collect()
}

/// CIDR to location table with longest-prefix lookup.
#[derive(Debug, Default, Clone)]
pub struct GeoDatabase {
    // Indexed by prefix length; keys are masked network addresses.
    v4: Vec<HashMap<u32, GeoPoint>>,
    v6: Vec<HashMap<u128, GeoPoint>>,
    len: usize,
}

impl GeoDatabase {
    pub fn new() -> Self {
        GeoDatabase {
            v4: vec![HashMap::new(); 33],
            v6: vec![HashMap::new(); 129],
            len: 0,
        }
    }

    pub fn load(path: &Path) -> Result<Self, GeoError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Parse `cidr,lat,lon` lines; `#` starts a comment. A CIDR may appear
    /// only once.
    pub fn parse(text: &str) -> Result<Self, GeoError> {
        let mut db = GeoDatabase::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let err = |reason: String| GeoError::Parse { line, reason };
            let fields: Vec<&str> = body.split(',').map(str::trim).collect();
            let [cidr, lat, lon] = fields[..] else {
                return Err(err(format!("expected 3 fields, found {}", fields.len())));
            };
            let net: IpNet = cidr.parse().map_err(|e| err(format!("cidr {cidr:?}: {e}")))?;
            let lat: f64 = lat.parse().map_err(|e| err(format!("lat {lat:?}: {e}")))?;
            let lon: f64 = lon.parse().map_err(|e| err(format!("lon {lon:?}: {e}")))?;
            let point = GeoPoint::new(lat, lon).map_err(|e| err(e.to_string()))?;
            if !db.insert(net, point) {
                return Err(err(format!("duplicate cidr {net}")));
            }
        }
        Ok(db)
    }

    /// Returns false if the network was already present.
    pub fn insert(&mut self, net: IpNet, point: GeoPoint) -> bool {
        let net = net.trunc();
        let fresh = match net {
            IpNet::V4(n) => self.v4[n.prefix_len() as usize]
                .insert(u32::from(n.network()), point)
                .is_none(),
            IpNet::V6(n) => self.v6[n.prefix_len() as usize]
                .insert(u128::from(n.network()), point)
                .is_none(),
        };
        if fresh {
            self.len += 1;
        }
        fresh
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn lookup(&self, ip: IpAddr) -> Option<GeoPoint> {
        let ip = match ip {
            IpAddr::V6(v6) => v6.to_ipv4_mapped().map(IpAddr::V4).unwrap_or(ip),
            v4 => v4,
        };
        match ip {
            IpAddr::V4(a) => {
                let bits = u32::from(a);
                (0..=32u32).rev().find_map(|len| {
                    let masked = if len == 0 { 0 } else { bits & (u32::MAX << (32 - len)) };
                    self.v4[len as usize].get(&masked).copied()
                })
            }
            IpAddr::V6(a) => {
                let bits = u128::from(a);
                (0..=128u32).rev().find_map(|len| {
                    let masked = if len == 0 { 0 } else { bits & (u128::MAX << (128 - len)) };
                    self.v6[len as usize].get(&masked).copied()
                })
            }
        }
    }
}
