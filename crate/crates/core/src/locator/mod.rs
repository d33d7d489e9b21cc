//! Replica resolution over the union namespace.
//!
//! A lookup consults L1, then L2, and only on a miss fans out to every
//! eligible endpoint covering the path, bounded by one shared deadline.
//! Concurrent misses of the same path share one fan-out.

mod cache;
mod memcached;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use chrono::{DateTime, SubsecRound, Utc};
use dashmap::DashMap;
use futures::future::join_all;
use serde::Serialize;
use tokio::sync::OnceCell;
use tokio::time::Instant;

use crate::config::{EndpointConfig, FederationConfig};
use crate::endpoints::{Endpoint, EndpointError, ListEntry, Listing};
use crate::path;

pub use cache::{L2Cache, L2Error, MemoryL2};
pub use memcached::MemcachedL2;

use cache::{listing_key, location_key, L1Cache, Record};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ReplicaLocation {
    pub endpoint_id: String,
    pub backend_path: String,
    pub size: Option<u64>,
    pub is_directory: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ReplicaSet {
    pub federated_path: String,
    /// In endpoint configuration order, at most one per endpoint.
    pub replicas: Vec<ReplicaLocation>,
    pub resolved_at: DateTime<Utc>,
    /// False when some covering endpoint timed out, failed, or was skipped
    /// as offline.
    pub complete: bool,
}

impl ReplicaSet {
    pub fn is_empty(&self) -> bool {
        self.replicas.is_empty()
    }

    pub fn replica(&self, endpoint_id: &str) -> Option<&ReplicaLocation> {
        self.replicas.iter().find(|r| r.endpoint_id == endpoint_id)
    }

    pub fn endpoint_ids(&self) -> Vec<&str> {
        self.replicas.iter().map(|r| r.endpoint_id.as_str()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CacheEntry {
    pub replica_set: ReplicaSet,
    pub expires_at: DateTime<Utc>,
    /// Known absent everywhere; implies no replicas.
    pub negative: bool,
}

/// Union of one directory across endpoints.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MergedListing {
    pub federated_path: String,
    /// Sorted by name, names unique.
    pub entries: Vec<ListEntry>,
    pub resolved_at: DateTime<Utc>,
    pub complete: bool,
    /// Some endpoint has the directory, or it is an ancestor of a
    /// configured federated prefix.
    pub found: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ListingEntry {
    pub listing: MergedListing,
    pub expires_at: DateTime<Utc>,
    pub negative: bool,
}

#[derive(Debug, Default)]
pub struct LocatorCounters {
    pub l1_hits: AtomicU64,
    pub l2_hits: AtomicU64,
    pub misses: AtomicU64,
    /// Callers that joined another caller's in-flight resolution.
    pub coalesced: AtomicU64,
    pub fanouts: AtomicU64,
    pub l2_errors: AtomicU64,
}

impl LocatorCounters {
    pub fn hits(&self) -> u64 {
        self.l1_hits.load(Ordering::Relaxed) + self.l2_hits.load(Ordering::Relaxed)
    }
}

/// Backend path for `path` on `endpoint`, or `None` when the endpoint's
/// federated prefix does not cover it.
pub fn translate(path: &str, endpoint: &EndpointConfig) -> Option<String> {
    let rest = path::strip_prefix(path, &endpoint.federated_prefix)?;
    Some(path::join(&endpoint.backend_prefix, rest))
}

type Flights<T> = DashMap<String, Arc<OnceCell<T>>>;

pub struct Locator {
    endpoints: Vec<Arc<Endpoint>>,
    l1: L1Cache,
    l2: Option<Arc<dyn L2Cache>>,
    fanout_timeout: Duration,
    ttl_positive: Duration,
    ttl_negative: Duration,
    locate_flights: Flights<ReplicaSet>,
    listing_flights: Flights<MergedListing>,
    counters: LocatorCounters,
}

impl Locator {
    pub fn new(endpoints: Vec<Arc<Endpoint>>, config: &FederationConfig, l2: Option<Arc<dyn L2Cache>>) -> Self {
        Locator {
            endpoints,
            l1: L1Cache::new(config.l1_capacity),
            l2,
            fanout_timeout: config.fanout_timeout,
            ttl_positive: config.cache_ttl_positive,
            ttl_negative: config.cache_ttl_negative,
            locate_flights: DashMap::new(),
            listing_flights: DashMap::new(),
            counters: LocatorCounters::default(),
        }
    }

    pub fn endpoints(&self) -> &[Arc<Endpoint>] {
        &self.endpoints
    }

    pub fn endpoint(&self, id: &str) -> Option<&Arc<Endpoint>> {
        self.endpoints.iter().find(|e| e.id() == id)
    }

    pub fn counters(&self) -> &LocatorCounters {
        &self.counters
    }

    /// Replica set of a normalized federated path. Replicas on endpoints that
    /// are currently offline are never returned, even from cache. Times are
    /// kept to the millisecond, the precision of L2 records.
    pub async fn locate(&self, path: &str, now: DateTime<Utc>) -> ReplicaSet {
        debug_assert_eq!(path::normalize(path).as_deref(), Ok(path));
        let now = now.trunc_subsecs(3);
        let key = location_key(path);
        if let Some(Record::Replicas(e)) = self.l1.get(&key, now) {
            self.counters.l1_hits.fetch_add(1, Ordering::Relaxed);
            return self.live(e.replica_set);
        }
        let set = self
            .single_flight(&self.locate_flights, &key, async {
                if let Some(Record::Replicas(e)) = self.lookup(&key, now).await {
                    return e.replica_set;
                }
                self.counters.misses.fetch_add(1, Ordering::Relaxed);
                let set = self.fan_out_stat(path, now).await;
                let negative = set.complete && set.is_empty();
                let ttl = self.ttl_for(set.complete && !set.is_empty());
                let entry = CacheEntry {
                    replica_set: set.clone(),
                    expires_at: now + ttl,
                    negative,
                };
                self.store(key.clone(), Record::Replicas(entry), ttl, now).await;
                set
            })
            .await;
        self.live(set)
    }

    /// Union of the immediate children of a normalized federated directory.
    pub async fn merged_listing(&self, path: &str, now: DateTime<Utc>) -> MergedListing {
        debug_assert_eq!(path::normalize(path).as_deref(), Ok(path));
        let now = now.trunc_subsecs(3);
        let key = listing_key(path);
        if let Some(Record::Listing(e)) = self.l1.get(&key, now) {
            self.counters.l1_hits.fetch_add(1, Ordering::Relaxed);
            return e.listing;
        }
        self.single_flight(&self.listing_flights, &key, async {
            if let Some(Record::Listing(e)) = self.lookup(&key, now).await {
                return e.listing;
            }
            self.counters.misses.fetch_add(1, Ordering::Relaxed);
            let listing = self.fan_out_list(path, now).await;
            let ttl = self.ttl_for(listing.complete && listing.found);
            let entry = ListingEntry {
                listing: listing.clone(),
                expires_at: now + ttl,
                negative: listing.complete && !listing.found,
            };
            self.store(key.clone(), Record::Listing(entry), ttl, now).await;
            listing
        })
        .await
    }

    /// Drop cached state for `path` and for every ancestor directory, whose
    /// listings (and implicit existence) may change with it.
    pub async fn invalidate(&self, path: &str) {
        let mut keys = vec![location_key(path), listing_key(path)];
        let mut cur = path;
        while let Some(parent) = path::parent(cur) {
            keys.push(location_key(parent));
            keys.push(listing_key(parent));
            cur = parent;
        }
        for k in &keys {
            self.l1.remove(k);
        }
        if let Some(l2) = &self.l2 {
            let results = join_all(keys.iter().map(|k| l2.delete(k))).await;
            for r in results {
                if let Err(e) = r {
                    self.counters.l2_errors.fetch_add(1, Ordering::Relaxed);
                    tracing::warn!(error = %e, path, "L2 invalidate failed");
                }
            }
        }
    }

    /// True when `path` is "/" or an ancestor of some federated prefix, so
    /// it exists as a directory by configuration alone.
    pub fn is_virtual_directory(&self, path: &str) -> bool {
        path == "/" || !self.virtual_children(path).is_empty()
    }

    /// Cached replica entry for `path` in L1, ignoring expiry.
    pub fn peek_l1(&self, path: &str) -> Option<CacheEntry> {
        match self.l1.peek(&location_key(path))? {
            Record::Replicas(e) => Some(e),
            Record::Listing(_) => None,
        }
    }

    /// Cached replica entry for `path` in L2, ignoring expiry.
    pub async fn peek_l2(&self, path: &str) -> Option<CacheEntry> {
        let bytes = self.l2.as_ref()?.get(&location_key(path)).await.ok()??;
        match Record::decode(&bytes).ok()? {
            Record::Replicas(e) => Some(e),
            Record::Listing(_) => None,
        }
    }

    async fn single_flight<T: Clone>(
        &self,
        flights: &Flights<T>,
        key: &str,
        resolve: impl std::future::Future<Output = T>,
    ) -> T {
        let cell = flights.entry(key.to_string()).or_default().clone();
        let mut resolve = Some(resolve);
        let value = cell
            .get_or_init(|| resolve.take().expect("initializer runs once"))
            .await
            .clone();
        if resolve.is_some() {
            self.counters.coalesced.fetch_add(1, Ordering::Relaxed);
        }
        flights.remove_if(key, |_, c| Arc::ptr_eq(c, &cell));
        value
    }

    async fn lookup(&self, key: &str, now: DateTime<Utc>) -> Option<Record> {
        if let Some(r) = self.l1.get(key, now) {
            self.counters.l1_hits.fetch_add(1, Ordering::Relaxed);
            return Some(r);
        }
        let l2 = self.l2.as_ref()?;
        let bytes = match l2.get(key).await {
            Ok(Some(b)) => b,
            Ok(None) => return None,
            Err(e) => {
                self.counters.l2_errors.fetch_add(1, Ordering::Relaxed);
                tracing::warn!(error = %e, "L2 get failed");
                return None;
            }
        };
        match Record::decode(&bytes) {
            Ok(r) if r.expires_at() > now => {
                self.counters.l2_hits.fetch_add(1, Ordering::Relaxed);
                self.l1.insert(key.to_string(), r.clone(), now);
                Some(r)
            }
            Ok(_) => None,
            Err(e) => {
                self.counters.l2_errors.fetch_add(1, Ordering::Relaxed);
                tracing::warn!(error = %e, "undecodable L2 record");
                None
            }
        }
    }

    async fn store(&self, key: String, record: Record, ttl: Duration, now: DateTime<Utc>) {
        if ttl.is_zero() {
            return;
        }
        if let Some(l2) = &self.l2 {
            if let Err(e) = l2.set(&key, &record.encode(), ttl).await {
                self.counters.l2_errors.fetch_add(1, Ordering::Relaxed);
                tracing::warn!(error = %e, "L2 set failed");
            }
        }
        self.l1.insert(key, record, now);
    }

    fn ttl_for(&self, positive: bool) -> Duration {
        if positive {
            self.ttl_positive
        } else {
            self.ttl_negative
        }
    }

    fn live(&self, mut set: ReplicaSet) -> ReplicaSet {
        let before = set.replicas.len();
        set.replicas
            .retain(|r| self.endpoint(&r.endpoint_id).is_some_and(|e| e.status().is_eligible()));
        if set.replicas.len() != before {
            set.complete = false;
        }
        set
    }

    /// Covering endpoints with their backend paths, plus whether any covering
    /// endpoint had to be skipped as offline.
    fn covering(&self, path: &str) -> (Vec<(&Arc<Endpoint>, String)>, bool) {
        let mut skipped = false;
        let mut out = Vec::new();
        for ep in &self.endpoints {
            let Some(backend) = translate(path, ep.config()) else {
                continue;
            };
            if ep.status().is_eligible() {
                out.push((ep, backend));
            } else {
                skipped = true;
            }
        }
        (out, skipped)
    }

    async fn fan_out_stat(&self, path: &str, now: DateTime<Utc>) -> ReplicaSet {
        self.counters.fanouts.fetch_add(1, Ordering::Relaxed);
        let deadline = Instant::now() + self.fanout_timeout;
        let (targets, skipped) = self.covering(path);
        let results = join_all(
            targets
                .iter()
                .map(|(ep, backend)| async move { ep.stat(backend, deadline).await }),
        )
        .await;
        let mut complete = !skipped;
        let mut replicas = Vec::new();
        for ((ep, backend), result) in targets.into_iter().zip(results) {
            match result {
                Ok(stat) if stat.exists => replicas.push(ReplicaLocation {
                    endpoint_id: ep.id().to_string(),
                    backend_path: backend,
                    size: stat.size,
                    is_directory: stat.is_directory,
                }),
                Ok(_) | Err(EndpointError::NotFound) | Err(EndpointError::NotADirectory) => {}
                Err(e) => {
                    complete = false;
                    tracing::debug!(endpoint = ep.id(), error = %e, path, "stat failed");
                }
            }
        }
        ReplicaSet {
            federated_path: path.to_string(),
            replicas,
            resolved_at: now,
            complete,
        }
    }

    async fn fan_out_list(&self, path: &str, now: DateTime<Utc>) -> MergedListing {
        self.counters.fanouts.fetch_add(1, Ordering::Relaxed);
        let deadline = Instant::now() + self.fanout_timeout;
        let (mut targets, skipped) = self.covering(path);
        // Size conflicts go to the first endpoint in id order.
        targets.sort_by(|a, b| a.0.id().cmp(b.0.id()));
        let results = join_all(
            targets
                .iter()
                .map(|(ep, backend)| async move { ep.list(backend, deadline).await }),
        )
        .await;
        let mut complete = !skipped;
        let mut found = false;
        let mut entries = Vec::new();
        for ((ep, _), result) in targets.iter().zip(results) {
            match result {
                Ok(listing) => {
                    found = true;
                    entries.extend(listing.entries().iter().cloned());
                }
                Err(EndpointError::NotFound) | Err(EndpointError::NotADirectory) => {}
                Err(e) => {
                    complete = false;
                    tracing::debug!(endpoint = ep.id(), error = %e, path, "list failed");
                }
            }
        }
        let virtual_dirs = self.virtual_children(path);
        found |= !virtual_dirs.is_empty() || path == "/";
        entries.extend(virtual_dirs.into_iter().map(|name| ListEntry {
            name,
            is_directory: true,
            size: None,
        }));
        MergedListing {
            federated_path: path.to_string(),
            entries: Listing::from_entries(entries).entries().to_vec(),
            resolved_at: now,
            complete,
            found,
        }
    }

    /// First segments of federated prefixes lying strictly below `path`.
    fn virtual_children(&self, path: &str) -> Vec<String> {
        let mut names: Vec<String> = self
            .endpoints
            .iter()
            .filter_map(|ep| {
                let rest = path::strip_prefix(&ep.config().federated_prefix, path)?;
                let first = rest.strip_prefix('/')?.split('/').next()?;
                Some(first.to_string())
            })
            .collect();
        names.sort();
        names.dedup();
        names
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::EndpointKind;
    use crate::geo::GeoPoint;
    use url::Url;

    fn cfg(fed: &str, backend: &str) -> EndpointConfig {
        EndpointConfig {
            id: "e".into(),
            kind: EndpointKind::Webdav,
            base_url: Url::parse("http://127.0.0.1:1").unwrap(),
            federated_prefix: fed.into(),
            backend_prefix: backend.into(),
            location: GeoPoint::new(0.0, 0.0).unwrap(),
            writable: false,
            s3: None,
        }
    }

    #[test]
    fn translation() {
        let c = cfg("/data/atlas", "/rucio");
        assert_eq!(translate("/data/atlas/f", &c).as_deref(), Some("/rucio/f"));
        assert_eq!(translate("/other/f", &c), None);
        assert_eq!(translate("/data/atlas", &c).as_deref(), Some("/rucio"));
        assert_eq!(translate("/data/atlasx", &c), None);
        let root = cfg("/", "/");
        assert_eq!(translate("/a/b", &root).as_deref(), Some("/a/b"));
        assert_eq!(translate("/", &root).as_deref(), Some("/"));
        let into_root = cfg("/data", "/");
        assert_eq!(translate("/data/x", &into_root).as_deref(), Some("/x"));
        assert_eq!(translate("/data", &into_root).as_deref(), Some("/"));
        let from_root = cfg("/", "/store");
        assert_eq!(translate("/x", &from_root).as_deref(), Some("/store/x"));
    }

    #[test]
    fn virtual_directories() {
        let mut a = cfg("/data/atlas", "/");
        a.id = "a".into();
        let mut b = cfg("/data/cms/x", "/");
        b.id = "b".into();
        let config = FederationConfig::with_endpoints(vec![a.clone(), b.clone()]);
        let http = reqwest::Client::new();
        let endpoints = [a, b]
            .into_iter()
            .map(|c| Arc::new(Endpoint::new(c, http.clone()).unwrap()))
            .collect();
        let loc = Locator::new(endpoints, &config, None);
        assert_eq!(loc.virtual_children("/"), ["data"]);
        assert_eq!(loc.virtual_children("/data"), ["atlas", "cms"]);
        assert_eq!(loc.virtual_children("/data/cms"), ["x"]);
        assert!(loc.virtual_children("/data/atlas").is_empty());
        assert!(loc.is_virtual_directory("/data/cms"));
        assert!(!loc.is_virtual_directory("/data/atlas/f"));
    }
}
