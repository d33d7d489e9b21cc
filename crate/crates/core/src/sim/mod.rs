//! In-process simulated storage endpoints.
//!
//! A [`SimEndpoint`] serves either the WebDAV or the S3 wire surface over
//! loopback HTTP from an in-memory [`ObjectStore`]. Latency, error rate and
//! availability can be changed at runtime, and every request is counted on
//! arrival so tests can assert exactly what reached the backend.
//!
//! Both flavours use implicit directories: a path is a directory iff some
//! object lives below it.

pub mod memcached;

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, AtomicU32, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use axum::body::Body;
use axum::extract::{Request, State};
use axum::response::Response;
use axum::Router;
use bytes::Bytes;
use chrono::{DateTime, Utc};
use http::{header, HeaderValue, Method, StatusCode};
use percent_encoding::percent_decode_str;
use tokio::net::TcpListener;
use tokio::sync::watch;
use tokio::task::JoinHandle;
use url::Url;

use crate::config::{EndpointConfig, EndpointKind, S3Settings};
use crate::endpoints::xml::{write_list_bucket, BucketPage, MultistatusWriter};
use crate::endpoints::{ListEntry, Listing};
use crate::geo::GeoPoint;
use crate::path::{encode_path, join_child, normalize};
use crate::signer::{verify, SigningKey};

const DIRECTORY_CONTENT_TYPE: &str = "httpd/unix-directory";
const MAX_BODY: usize = 64 * 1024 * 1024;

#[derive(Debug, Clone)]
pub struct StoredObject {
    pub data: Bytes,
    pub modified: DateTime<Utc>,
}

/// Objects keyed by normalized absolute path.
#[derive(Debug, Default)]
pub struct ObjectStore {
    objects: RwLock<BTreeMap<String, StoredObject>>,
}

impl ObjectStore {
    pub fn put(&self, path: &str, data: impl Into<Bytes>) {
        let path = normalize(path).expect("store paths must be valid");
        let obj = StoredObject {
            data: data.into(),
            modified: Utc::now(),
        };
        self.objects.write().unwrap().insert(path, obj);
    }

    pub fn get(&self, path: &str) -> Option<StoredObject> {
        self.objects.read().unwrap().get(path).cloned()
    }

    pub fn remove(&self, path: &str) -> bool {
        self.objects.write().unwrap().remove(path).is_some()
    }

    pub fn clear(&self) {
        self.objects.write().unwrap().clear();
    }

    pub fn paths(&self) -> Vec<String> {
        self.objects.read().unwrap().keys().cloned().collect()
    }

    pub fn is_dir(&self, path: &str) -> bool {
        if path == "/" {
            return true;
        }
        let prefix = format!("{path}/");
        self.objects
            .read()
            .unwrap()
            .range(prefix.clone()..)
            .next()
            .is_some_and(|(k, _)| k.starts_with(&prefix))
    }

    /// Immediate children of a directory path.
    pub fn children(&self, path: &str) -> Listing {
        let prefix = if path == "/" {
            "/".to_string()
        } else {
            format!("{path}/")
        };
        let objects = self.objects.read().unwrap();
        let entries = objects
            .range(prefix.clone()..)
            .take_while(|(k, _)| k.starts_with(&prefix))
            .map(|(k, obj)| {
                let rest = &k[prefix.len()..];
                match rest.split_once('/') {
                    Some((dir, _)) => ListEntry {
                        name: dir.to_string(),
                        is_directory: true,
                        size: None,
                    },
                    None => ListEntry {
                        name: rest.to_string(),
                        is_directory: false,
                        size: Some(obj.data.len() as u64),
                    },
                }
            })
            .collect::<Vec<_>>();
        Listing::from_entries(entries)
    }
}

#[derive(Debug, Clone)]
pub enum SimKind {
    WebDav,
    S3 { bucket: String, key: SigningKey },
}

/// Requests received, counted before any fault injection applies.
#[derive(Debug, Default)]
pub struct SimCounters {
    /// HEAD of an object or DAV resource.
    pub stat: AtomicU64,
    /// PROPFIND or bucket listing.
    pub list: AtomicU64,
    /// OPTIONS (WebDAV) or HEAD bucket (S3).
    pub probe: AtomicU64,
    pub get: AtomicU64,
    pub put: AtomicU64,
    pub delete: AtomicU64,
    /// Requests refused for a missing or invalid signature.
    pub rejected: AtomicU64,
}

impl SimCounters {
    /// Metadata queries: stat + list.
    pub fn queries(&self) -> u64 {
        self.stat.load(Ordering::SeqCst) + self.list.load(Ordering::SeqCst)
    }

    pub fn get_count(&self) -> u64 {
        self.get.load(Ordering::SeqCst)
    }

    pub fn probes(&self) -> u64 {
        self.probe.load(Ordering::SeqCst)
    }
}

struct Shared {
    kind: SimKind,
    store: ObjectStore,
    latency_ms: AtomicU64,
    down: AtomicBool,
    error_per_mille: AtomicU32,
    counters: SimCounters,
}

struct Running {
    stop: watch::Sender<bool>,
    task: JoinHandle<()>,
}

#[derive(Clone)]
struct RunState {
    shared: Arc<Shared>,
    stop: watch::Receiver<bool>,
}

pub struct SimEndpoint {
    shared: Arc<Shared>,
    addr: SocketAddr,
    running: Mutex<Option<Running>>,
}

impl std::fmt::Debug for SimEndpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SimEndpoint")
            .field("addr", &self.addr)
            .field("kind", &self.shared.kind)
            .finish_non_exhaustive()
    }
}

impl SimEndpoint {
    pub async fn start(kind: SimKind) -> std::io::Result<Self> {
        let listener = TcpListener::bind("127.0.0.1:0").await?;
        let addr = listener.local_addr()?;
        let shared = Arc::new(Shared {
            kind,
            store: ObjectStore::default(),
            latency_ms: AtomicU64::new(0),
            down: AtomicBool::new(false),
            error_per_mille: AtomicU32::new(0),
            counters: SimCounters::default(),
        });
        let sim = SimEndpoint {
            shared,
            addr,
            running: Mutex::new(None),
        };
        sim.serve(listener);
        Ok(sim)
    }

    pub async fn start_webdav() -> std::io::Result<Self> {
        Self::start(SimKind::WebDav).await
    }

    pub async fn start_s3(bucket: &str, key: SigningKey) -> std::io::Result<Self> {
        Self::start(SimKind::S3 {
            bucket: bucket.to_string(),
            key,
        })
        .await
    }

    fn serve(&self, listener: TcpListener) {
        let (stop_tx, stop_rx) = watch::channel(false);
        let state = RunState {
            shared: self.shared.clone(),
            stop: stop_rx.clone(),
        };
        let app = Router::new().fallback(handle).with_state(state);
        let mut stop = stop_rx;
        let task = tokio::spawn(async move {
            let _ = axum::serve(listener, app)
                .with_graceful_shutdown(async move {
                    let _ = stop.wait_for(|s| *s).await;
                })
                .await;
        });
        *self.running.lock().unwrap() = Some(Running { stop: stop_tx, task });
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn base_url(&self) -> Url {
        Url::parse(&format!("http://{}", self.addr)).expect("loopback url")
    }

    pub fn kind(&self) -> &SimKind {
        &self.shared.kind
    }

    pub fn store(&self) -> &ObjectStore {
        &self.shared.store
    }

    pub fn counters(&self) -> &SimCounters {
        &self.shared.counters
    }

    pub fn set_latency(&self, latency: Duration) {
        self.shared
            .latency_ms
            .store(latency.as_millis() as u64, Ordering::SeqCst);
    }

    /// While down every request is answered 503 (after being counted).
    pub fn set_down(&self, down: bool) {
        self.shared.down.store(down, Ordering::SeqCst);
    }

    pub fn is_down(&self) -> bool {
        self.shared.down.load(Ordering::SeqCst)
    }

    /// Fraction of requests answered 500, in [0, 1].
    pub fn set_error_rate(&self, rate: f64) {
        let per_mille = (rate.clamp(0.0, 1.0) * 1000.0).round() as u32;
        self.shared.error_per_mille.store(per_mille, Ordering::SeqCst);
    }

    pub fn is_running(&self) -> bool {
        self.running.lock().unwrap().is_some()
    }

    /// Close the listener and cut in-flight (sleeping) requests short.
    pub async fn stop(&self) {
        let running = self.running.lock().unwrap().take();
        if let Some(r) = running {
            let _ = r.stop.send(true);
            let _ = r.task.await;
        }
    }

    /// Listen again on the same port.
    pub async fn restart(&self) -> std::io::Result<()> {
        if self.is_running() {
            return Ok(());
        }
        let listener = TcpListener::bind(self.addr).await?;
        self.serve(listener);
        Ok(())
    }

    /// Configuration for federating this endpoint.
    pub fn endpoint_config(
        &self,
        id: &str,
        federated_prefix: &str,
        backend_prefix: &str,
        location: GeoPoint,
        writable: bool,
    ) -> EndpointConfig {
        let (kind, s3) = match &self.shared.kind {
            SimKind::WebDav => (EndpointKind::Webdav, None),
            SimKind::S3 { bucket, key } => (
                EndpointKind::S3,
                Some(S3Settings {
                    access_key: key.access_key().to_string(),
                    secret_key: key.secret().to_string(),
                    region: key.region().to_string(),
                    bucket: bucket.clone(),
                }),
            ),
        };
        EndpointConfig {
            id: id.to_string(),
            kind,
            base_url: self.base_url(),
            federated_prefix: federated_prefix.to_string(),
            backend_prefix: backend_prefix.to_string(),
            location,
            writable,
            s3,
        }
    }
}

impl Drop for SimEndpoint {
    fn drop(&mut self) {
        if let Some(r) = self.running.get_mut().unwrap().take() {
            let _ = r.stop.send(true);
            r.task.abort();
        }
    }
}

fn status(code: StatusCode) -> Response {
    Response::builder()
        .status(code)
        .body(Body::empty())
        .expect("static response")
}

fn s3_error(code: StatusCode, name: &str) -> Response {
    Response::builder()
        .status(code)
        .header(header::CONTENT_TYPE, "application/xml")
        .body(Body::from(format!(
            "<?xml version=\"1.0\" encoding=\"UTF-8\"?><Error><Code>{name}</Code></Error>"
        )))
        .expect("static response")
}

async fn handle(State(state): State<RunState>, req: Request) -> Response {
    let shared = &state.shared;
    let counters = &shared.counters;
    let method = req.method().clone();
    let is_list_query = req
        .uri()
        .query()
        .is_some_and(|q| q.split('&').any(|p| p.starts_with("list-type=")));

    let counter = match (&shared.kind, method.as_str()) {
        (SimKind::WebDav, "OPTIONS") => &counters.probe,
        (SimKind::WebDav, "PROPFIND") => &counters.list,
        (SimKind::S3 { .. }, "HEAD") if bucket_only(req.uri().path()) => &counters.probe,
        (SimKind::S3 { .. }, "GET") if is_list_query => &counters.list,
        (_, "HEAD") => &counters.stat,
        (_, "PUT") => &counters.put,
        (_, "DELETE") => &counters.delete,
        _ => &counters.get,
    };
    counter.fetch_add(1, Ordering::SeqCst);

    if shared.down.load(Ordering::SeqCst) {
        return status(StatusCode::SERVICE_UNAVAILABLE);
    }
    let latency = shared.latency_ms.load(Ordering::SeqCst);
    if latency > 0 {
        let mut stop = state.stop.clone();
        tokio::select! {
            _ = tokio::time::sleep(Duration::from_millis(latency)) => {}
            _ = stop.wait_for(|s| *s) => return status(StatusCode::SERVICE_UNAVAILABLE),
        }
    }
    let per_mille = shared.error_per_mille.load(Ordering::SeqCst);
    if per_mille > 0 && rand::random_range(0..1000) < per_mille {
        return status(StatusCode::INTERNAL_SERVER_ERROR);
    }

    match &shared.kind {
        SimKind::WebDav => handle_webdav(shared, req).await,
        SimKind::S3 { bucket, key } => handle_s3(shared, bucket, key, req).await,
    }
}

fn bucket_only(raw_path: &str) -> bool {
    raw_path.trim_matches('/').split('/').filter(|s| !s.is_empty()).count() <= 1
}

fn decoded_path(raw_path: &str) -> Option<String> {
    let decoded = percent_decode_str(raw_path).decode_utf8().ok()?;
    normalize(&decoded).ok()
}

async fn read_body(req: Request) -> Option<Bytes> {
    axum::body::to_bytes(req.into_body(), MAX_BODY).await.ok()
}

fn http_date(t: DateTime<Utc>) -> String {
    t.format("%a, %d %b %Y %H:%M:%S GMT").to_string()
}

async fn handle_webdav(shared: &Shared, req: Request) -> Response {
    let Some(path) = decoded_path(req.uri().path()) else {
        return status(StatusCode::BAD_REQUEST);
    };
    let store = &shared.store;
    match req.method().as_str() {
        "OPTIONS" => Response::builder()
            .status(StatusCode::OK)
            .header("DAV", "1")
            .header(header::ALLOW, "OPTIONS, HEAD, GET, PUT, DELETE, PROPFIND")
            .body(Body::empty())
            .expect("static response"),
        "HEAD" => {
            if let Some(obj) = store.get(&path) {
                Response::builder()
                    .status(StatusCode::OK)
                    .header(header::CONTENT_LENGTH, obj.data.len())
                    .header(header::LAST_MODIFIED, http_date(obj.modified))
                    .body(Body::empty())
                    .expect("static response")
            } else if store.is_dir(&path) {
                Response::builder()
                    .status(StatusCode::OK)
                    .header(header::CONTENT_TYPE, DIRECTORY_CONTENT_TYPE)
                    .body(Body::empty())
                    .expect("static response")
            } else {
                status(StatusCode::NOT_FOUND)
            }
        }
        "GET" => match store.get(&path) {
            Some(obj) => Response::new(Body::from(obj.data)),
            None if store.is_dir(&path) => status(StatusCode::METHOD_NOT_ALLOWED),
            None => status(StatusCode::NOT_FOUND),
        },
        "PUT" => {
            if path == "/" || store.is_dir(&path) {
                return status(StatusCode::CONFLICT);
            }
            match read_body(req).await {
                Some(body) => {
                    store.put(&path, body);
                    status(StatusCode::CREATED)
                }
                None => status(StatusCode::PAYLOAD_TOO_LARGE),
            }
        }
        "DELETE" => {
            if store.remove(&path) {
                status(StatusCode::NO_CONTENT)
            } else {
                status(StatusCode::NOT_FOUND)
            }
        }
        "PROPFIND" => {
            let depth = req
                .headers()
                .get("Depth")
                .and_then(|v| v.to_str().ok())
                .unwrap_or("1")
                .trim()
                .to_string();
            if depth != "0" && depth != "1" {
                return status(StatusCode::FORBIDDEN);
            }
            let mut w = MultistatusWriter::new();
            if let Some(obj) = store.get(&path) {
                w.resource(
                    &encode_path(&path),
                    false,
                    Some(obj.data.len() as u64),
                    Some(&http_date(obj.modified)),
                );
            } else if store.is_dir(&path) {
                let href = if path == "/" {
                    "/".to_string()
                } else {
                    format!("{}/", encode_path(&path))
                };
                w.resource(&href, true, None, None);
                if depth == "1" {
                    for e in store.children(&path).entries() {
                        let child = join_child(&path, &e.name);
                        if e.is_directory {
                            w.resource(&format!("{}/", encode_path(&child)), true, None, None);
                        } else {
                            let modified = store.get(&child).map(|o| http_date(o.modified));
                            w.resource(&encode_path(&child), false, e.size, modified.as_deref());
                        }
                    }
                }
            } else {
                return status(StatusCode::NOT_FOUND);
            }
            Response::builder()
                .status(StatusCode::MULTI_STATUS)
                .header(header::CONTENT_TYPE, "application/xml; charset=utf-8")
                .body(Body::from(w.finish()))
                .expect("static response")
        }
        _ => status(StatusCode::METHOD_NOT_ALLOWED),
    }
}

async fn handle_s3(shared: &Shared, bucket: &str, key: &SigningKey, req: Request) -> Response {
    let host = req
        .headers()
        .get(header::HOST)
        .and_then(|h| h.to_str().ok())
        .unwrap_or_default()
        .to_string();
    let path_and_query = req
        .uri()
        .path_and_query()
        .map(|p| p.as_str().to_string())
        .unwrap_or_else(|| "/".to_string());
    let signed = Url::parse(&format!("http://{host}{path_and_query}"))
        .is_ok_and(|url| verify(key, req.method(), &url, Utc::now()));
    if !signed {
        shared.counters.rejected.fetch_add(1, Ordering::SeqCst);
        return s3_error(StatusCode::FORBIDDEN, "SignatureDoesNotMatch");
    }

    let Some(path) = decoded_path(req.uri().path()) else {
        return s3_error(StatusCode::BAD_REQUEST, "InvalidURI");
    };
    let mut segments = path[1..].splitn(2, '/');
    let req_bucket = segments.next().unwrap_or_default();
    if req_bucket != bucket {
        return s3_error(StatusCode::NOT_FOUND, "NoSuchBucket");
    }
    let object = segments.next().map(|k| format!("/{k}"));
    let store = &shared.store;

    match (req.method().clone(), object) {
        (Method::HEAD, None) => status(StatusCode::OK),
        (Method::GET, None) => {
            let query: Vec<(String, String)> = req
                .uri()
                .query()
                .map(|q| url::form_urlencoded::parse(q.as_bytes()).into_owned().collect())
                .unwrap_or_default();
            let param = |n: &str| query.iter().find(|(k, _)| k == n).map(|(_, v)| v.as_str());
            if param("list-type") != Some("2") {
                return s3_error(StatusCode::NOT_IMPLEMENTED, "NotImplemented");
            }
            let prefix = param("prefix").unwrap_or("");
            let max_keys = param("max-keys").and_then(|m| m.parse().ok()).unwrap_or(1000usize);
            let page = list_bucket(store, prefix, param("delimiter"), max_keys, param("continuation-token"));
            Response::builder()
                .status(StatusCode::OK)
                .header(header::CONTENT_TYPE, "application/xml")
                .body(Body::from(write_list_bucket(bucket, prefix, &page)))
                .expect("static response")
        }
        (Method::HEAD, Some(obj)) => match store.get(&obj) {
            Some(o) => Response::builder()
                .status(StatusCode::OK)
                .header(header::CONTENT_LENGTH, o.data.len())
                .header(header::LAST_MODIFIED, http_date(o.modified))
                .body(Body::empty())
                .expect("static response"),
            None => status(StatusCode::NOT_FOUND),
        },
        (Method::GET, Some(obj)) => match store.get(&obj) {
            Some(o) => {
                let mut resp = Response::new(Body::from(o.data));
                resp.headers_mut().insert(
                    header::CONTENT_TYPE,
                    HeaderValue::from_static("application/octet-stream"),
                );
                resp
            }
            None => s3_error(StatusCode::NOT_FOUND, "NoSuchKey"),
        },
        (Method::PUT, Some(obj)) => match read_body(req).await {
            Some(body) => {
                store.put(&obj, body);
                status(StatusCode::OK)
            }
            None => s3_error(StatusCode::PAYLOAD_TOO_LARGE, "EntityTooLarge"),
        },
        (Method::DELETE, Some(obj)) => {
            if store.remove(&obj) {
                status(StatusCode::NO_CONTENT)
            } else {
                s3_error(StatusCode::NOT_FOUND, "NoSuchKey")
            }
        }
        _ => s3_error(StatusCode::METHOD_NOT_ALLOWED, "MethodNotAllowed"),
    }
}

/// ListObjectsV2 over the store. Keys are store paths without the leading
/// slash; the continuation token is the last entry returned.
fn list_bucket(
    store: &ObjectStore,
    prefix: &str,
    delimiter: Option<&str>,
    max_keys: usize,
    token: Option<&str>,
) -> BucketPage {
    let mut entries: BTreeMap<String, Option<u64>> = BTreeMap::new();
    let objects = store.objects.read().unwrap();
    for (path, obj) in objects.iter() {
        let key = &path[1..];
        let Some(rest) = key.strip_prefix(prefix) else {
            continue;
        };
        match delimiter.and_then(|d| rest.find(d).map(|i| i + d.len())) {
            Some(end) => {
                entries.insert(format!("{prefix}{}", &rest[..end]), None);
            }
            None => {
                entries.insert(key.to_string(), Some(obj.data.len() as u64));
            }
        }
    }
    let mut page = BucketPage::default();
    let mut remaining = entries
        .into_iter()
        .filter(|(k, _)| token.is_none_or(|t| k.as_str() > t))
        .peekable();
    let mut last = None;
    for (k, size) in remaining.by_ref().take(max_keys.max(1)) {
        last = Some(k.clone());
        match size {
            Some(s) => page.objects.push((k, s)),
            None => page.common_prefixes.push(k),
        }
    }
    if remaining.peek().is_some() {
        page.next_token = last;
    }
    page
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn store_directories() {
        let s = ObjectStore::default();
        s.put("/a/b", "1");
        s.put("/a/c/d", "22");
        s.put("/ab", "x");
        assert!(s.is_dir("/a"));
        assert!(s.is_dir("/a/c"));
        assert!(!s.is_dir("/a/b"));
        assert!(!s.is_dir("/x"));
        let names: Vec<_> = s.children("/a").names().map(String::from).collect();
        assert_eq!(names, ["b", "c"]);
        assert_eq!(s.children("/").names().collect::<Vec<_>>(), ["a", "ab"]);
    }

    #[test]
    fn bucket_listing_pages() {
        let s = ObjectStore::default();
        for k in ["/a/b", "/a/c", "/a/d/e", "/z"] {
            s.put(k, "x");
        }
        let all = list_bucket(&s, "a/", Some("/"), 1000, None);
        assert_eq!(
            all.objects.iter().map(|o| o.0.as_str()).collect::<Vec<_>>(),
            ["a/b", "a/c"]
        );
        assert_eq!(all.common_prefixes, ["a/d/"]);
        assert_eq!(all.next_token, None);
        let first = list_bucket(&s, "a/", Some("/"), 2, None);
        assert_eq!(first.next_token.as_deref(), Some("a/c"));
        let second = list_bucket(&s, "a/", Some("/"), 2, first.next_token.as_deref());
        assert_eq!(second.common_prefixes, ["a/d/"]);
        assert_eq!(second.next_token, None);
    }
}
