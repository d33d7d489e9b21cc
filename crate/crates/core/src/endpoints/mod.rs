//! Storage endpoints behind the federation.
//!
//! Each protocol implements [`EndpointClient`]; [`Endpoint`] wraps a client
//! with its configuration, live status, deadlines and query counters. Adding
//! a new backend (Azure, SWIFT) means adding one more client.

mod s3;
mod webdav;
pub(crate) mod xml;

use std::fmt;
use std::sync::atomic::{AtomicU64, AtomicU8, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use async_trait::async_trait;
use chrono::{DateTime, Utc};
use http::Method;
use serde::Serialize;
use tokio::time::Instant;
use url::Url;

use crate::config::{EndpointConfig, EndpointKind};
use crate::signer::SignError;

pub use s3::S3Client;
pub use webdav::{WebDavClient, DIRECTORY_CONTENT_TYPE};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EndpointError {
    #[error("deadline exceeded")]
    Timeout,
    #[error("not found")]
    NotFound,
    #[error("not a directory")]
    NotADirectory,
    #[error("transport: {0}")]
    Transport(String),
    #[error("backend answered {0}")]
    Status(u16),
    #[error("unparseable backend response: {0}")]
    Protocol(String),
    #[error("signing: {0}")]
    Signing(#[from] SignError),
}

impl From<reqwest::Error> for EndpointError {
    fn from(e: reqwest::Error) -> Self {
        if e.is_timeout() {
            EndpointError::Timeout
        } else {
            EndpointError::Transport(e.to_string())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum EndpointStatus {
    Unknown,
    Online,
    Offline,
}

impl EndpointStatus {
    fn from_u8(v: u8) -> Self {
        match v {
            1 => EndpointStatus::Online,
            2 => EndpointStatus::Offline,
            _ => EndpointStatus::Unknown,
        }
    }

    fn as_u8(self) -> u8 {
        match self {
            EndpointStatus::Unknown => 0,
            EndpointStatus::Online => 1,
            EndpointStatus::Offline => 2,
        }
    }

    /// Unknown endpoints are optimistically eligible for fan-out.
    pub fn is_eligible(self) -> bool {
        self != EndpointStatus::Offline
    }
}

impl fmt::Display for EndpointStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EndpointStatus::Unknown => "unknown",
            EndpointStatus::Online => "online",
            EndpointStatus::Offline => "offline",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct StatResult {
    pub exists: bool,
    pub size: Option<u64>,
    pub modified: Option<DateTime<Utc>>,
    pub is_directory: bool,
}

impl StatResult {
    pub fn absent() -> Self {
        StatResult::default()
    }

    pub fn file(size: u64, modified: Option<DateTime<Utc>>) -> Self {
        StatResult {
            exists: true,
            size: Some(size),
            modified,
            is_directory: false,
        }
    }

    pub fn directory() -> Self {
        StatResult {
            exists: true,
            is_directory: true,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct ListEntry {
    pub name: String,
    pub is_directory: bool,
    pub size: Option<u64>,
}

/// Immediate children of one directory, sorted by name, names unique.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Listing {
    entries: Vec<ListEntry>,
}

impl Listing {
    /// Builds a listing, merging repeated names: a name that is a directory
    /// in any entry is a directory, and the first reported size is kept.
    /// Names that are empty or contain '/' are dropped.
    pub fn from_entries(entries: impl IntoIterator<Item = ListEntry>) -> Self {
        let mut merged: std::collections::BTreeMap<String, ListEntry> = Default::default();
        for e in entries {
            if e.name.is_empty() || e.name.contains('/') {
                continue;
            }
            match merged.get_mut(&e.name) {
                Some(existing) => {
                    existing.is_directory |= e.is_directory;
                    if existing.size.is_none() {
                        existing.size = e.size;
                    }
                }
                None => {
                    merged.insert(e.name.clone(), e);
                }
            }
        }
        let mut entries: Vec<ListEntry> = merged.into_values().collect();
        for e in &mut entries {
            if e.is_directory {
                e.size = None;
            }
        }
        Listing { entries }
    }

    pub fn entries(&self) -> &[ListEntry] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }
}

/// Protocol side of an endpoint. Implementations never mutate backend state
/// in `stat`, `list` or `probe`; deadlines are applied by [`Endpoint`].
#[async_trait]
pub trait EndpointClient: Send + Sync + fmt::Debug {
    async fn stat(&self, backend_path: &str) -> Result<StatResult, EndpointError>;
    async fn list(&self, backend_path: &str) -> Result<Listing, EndpointError>;
    /// A cheap reachability check.
    async fn probe(&self) -> bool;
    async fn delete(&self, backend_path: &str) -> Result<(), EndpointError>;
    /// Location a client can use directly for `method` on `backend_path`.
    fn redirect_url(
        &self,
        backend_path: &str,
        method: &Method,
        expiry: Duration,
        now: DateTime<Utc>,
    ) -> Result<Url, EndpointError>;
}

/// Per-endpoint traffic counters as seen from the gateway.
#[derive(Debug, Default)]
pub struct EndpointCounters {
    /// stat + list operations issued.
    pub queries: AtomicU64,
    /// Metadata HTTP requests sent for those operations.
    pub requests: AtomicU64,
    pub timeouts: AtomicU64,
    pub errors: AtomicU64,
    pub probes: AtomicU64,
}

impl EndpointCounters {
    pub fn snapshot(&self) -> CounterSnapshot {
        CounterSnapshot {
            queries: self.queries.load(Ordering::Relaxed),
            requests: self.requests.load(Ordering::Relaxed),
            timeouts: self.timeouts.load(Ordering::Relaxed),
            errors: self.errors.load(Ordering::Relaxed),
            probes: self.probes.load(Ordering::Relaxed),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct CounterSnapshot {
    pub queries: u64,
    pub requests: u64,
    pub timeouts: u64,
    pub errors: u64,
    pub probes: u64,
}

pub struct Endpoint {
    config: EndpointConfig,
    client: Box<dyn EndpointClient>,
    status: AtomicU8,
    last_poll: Mutex<Option<DateTime<Utc>>>,
    counters: Arc<EndpointCounters>,
}

impl fmt::Debug for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Endpoint")
            .field("id", &self.config.id)
            .field("kind", &self.config.kind)
            .field("status", &self.status())
            .finish_non_exhaustive()
    }
}

impl Endpoint {
    /// Build the protocol client matching `config.kind`.
    pub fn new(config: EndpointConfig, http: reqwest::Client) -> Result<Self, EndpointError> {
        let counters = Arc::new(EndpointCounters::default());
        let client: Box<dyn EndpointClient> = match config.kind {
            EndpointKind::Webdav => Box::new(WebDavClient::new(&config, http, counters.clone())),
            EndpointKind::S3 => Box::new(S3Client::new(&config, http, counters.clone())?),
        };
        Ok(Self::with_client(config, client, counters))
    }

    pub fn with_client(
        config: EndpointConfig,
        client: Box<dyn EndpointClient>,
        counters: Arc<EndpointCounters>,
    ) -> Self {
        Endpoint {
            config,
            client,
            status: AtomicU8::new(EndpointStatus::Unknown.as_u8()),
            last_poll: Mutex::new(None),
            counters,
        }
    }

    pub fn id(&self) -> &str {
        &self.config.id
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.config
    }

    pub fn status(&self) -> EndpointStatus {
        EndpointStatus::from_u8(self.status.load(Ordering::Acquire))
    }

    /// Written by the health poller only.
    pub fn set_status(&self, status: EndpointStatus) {
        self.status.store(status.as_u8(), Ordering::Release);
    }

    pub fn last_poll(&self) -> Option<DateTime<Utc>> {
        *self.last_poll.lock().unwrap()
    }

    pub(crate) fn record_poll(&self, at: DateTime<Utc>) {
        *self.last_poll.lock().unwrap() = Some(at);
    }

    pub fn counters(&self) -> &EndpointCounters {
        &self.counters
    }

    pub async fn stat(&self, backend_path: &str, deadline: Instant) -> Result<StatResult, EndpointError> {
        self.counters.queries.fetch_add(1, Ordering::Relaxed);
        self.bounded(deadline, self.client.stat(backend_path)).await
    }

    pub async fn list(&self, backend_path: &str, deadline: Instant) -> Result<Listing, EndpointError> {
        self.counters.queries.fetch_add(1, Ordering::Relaxed);
        self.bounded(deadline, self.client.list(backend_path)).await
    }

    pub async fn probe(&self, deadline: Instant) -> bool {
        self.counters.probes.fetch_add(1, Ordering::Relaxed);
        tokio::time::timeout_at(deadline, self.client.probe())
            .await
            .unwrap_or(false)
    }

    pub async fn delete(&self, backend_path: &str, deadline: Instant) -> Result<(), EndpointError> {
        self.bounded(deadline, self.client.delete(backend_path)).await
    }

    pub fn redirect_url(
        &self,
        backend_path: &str,
        method: &Method,
        expiry: Duration,
        now: DateTime<Utc>,
    ) -> Result<Url, EndpointError> {
        self.client.redirect_url(backend_path, method, expiry, now)
    }

    async fn bounded<T>(
        &self,
        deadline: Instant,
        fut: impl std::future::Future<Output = Result<T, EndpointError>>,
    ) -> Result<T, EndpointError> {
        let result = match tokio::time::timeout_at(deadline, fut).await {
            Ok(r) => r,
            Err(_) => Err(EndpointError::Timeout),
        };
        match &result {
            Err(EndpointError::Timeout) => {
                self.counters.timeouts.fetch_add(1, Ordering::Relaxed);
            }
            Err(EndpointError::NotFound) | Err(EndpointError::NotADirectory) | Ok(_) => {}
            Err(_) => {
                self.counters.errors.fetch_add(1, Ordering::Relaxed);
            }
        }
        result
    }
}

/// HTTP client shared by all endpoint clients. Redirects are never followed.
pub fn http_client() -> reqwest::Client {
    reqwest::Client::builder()
        .redirect(reqwest::redirect::Policy::none())
        .connect_timeout(Duration::from_secs(5))
        .pool_idle_timeout(Duration::from_secs(30))
        .build()
        .expect("static client configuration")
}

/// `base` with `path` (unencoded) appended to its own path.
pub(crate) fn join_url(base: &Url, path: &str) -> Url {
    let mut url = base.clone();
    let base_path = base.path().trim_end_matches('/');
    let tail = if path == "/" { "" } else { path };
    let joined = format!("{base_path}{}", crate::path::encode_path(tail));
    url.set_path(if joined.is_empty() { "/" } else { &joined });
    url.set_query(None);
    url
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn listing_merges_names() {
        let l = Listing::from_entries([
            ListEntry {
                name: "b".into(),
                is_directory: false,
                size: Some(3),
            },
            ListEntry {
                name: "a".into(),
                is_directory: false,
                size: Some(1),
            },
            ListEntry {
                name: "b".into(),
                is_directory: true,
                size: None,
            },
            ListEntry {
                name: "x/y".into(),
                is_directory: false,
                size: None,
            },
            ListEntry {
                name: "".into(),
                is_directory: true,
                size: None,
            },
        ]);
        assert_eq!(l.names().collect::<Vec<_>>(), ["a", "b"]);
        assert!(l.entries()[1].is_directory);
        assert_eq!(l.entries()[1].size, None);
    }

    #[test]
    fn url_joining() {
        let base = Url::parse("https://ep.example/dav").unwrap();
        assert_eq!(join_url(&base, "/d/f").as_str(), "https://ep.example/dav/d/f");
        assert_eq!(join_url(&base, "/").as_str(), "https://ep.example/dav");
        let slash = Url::parse("https://ep.example/dav/").unwrap();
        assert_eq!(join_url(&slash, "/a b").as_str(), "https://ep.example/dav/a%20b");
        let bare = Url::parse("http://h:1").unwrap();
        assert_eq!(join_url(&bare, "/").as_str(), "http://h:1/");
    }

    proptest! {
        #[test]
        fn listing_names_are_unique_and_plain(
            raw in proptest::collection::vec(("[ab/]{0,3}", any::<bool>(), proptest::option::of(0u64..9)), 0..12)
        ) {
            let l = Listing::from_entries(raw.iter().map(|(n, d, s)| ListEntry {
                name: n.clone(),
                is_directory: *d,
                size: *s,
            }));
            let names: Vec<&str> = l.names().collect();
            let mut dedup = names.clone();
            dedup.dedup();
            prop_assert_eq!(&names, &dedup);
            prop_assert!(names.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(names.iter().all(|n| !n.is_empty() && !n.contains('/')));
            for e in l.entries() {
                let dir = raw.iter().any(|(n, d, _)| n == &e.name && *d);
                prop_assert_eq!(e.is_directory, dir);
                if dir {
                    prop_assert_eq!(e.size, None);
                }
            }
        }
    }
}
