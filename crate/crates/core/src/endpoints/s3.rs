use std::sync::atomic::Ordering;
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use chrono::{DateTime, Utc};
use http::{header, Method, StatusCode};
use url::Url;

use super::webdav::parse_http_date;
use super::xml::parse_list_bucket;
use super::{EndpointClient, EndpointCounters, EndpointError, ListEntry, Listing, StatResult};
use crate::config::EndpointConfig;
use crate::signer::{presign, PresignRequest, SignError, SigningKey};

/// Validity of the URLs the gateway signs for its own metadata requests.
const INTERNAL_EXPIRY_SECS: u64 = 300;

/// S3-compatible object store, path-style, every request query-signed.
///
/// Directories are implicit: a path is a directory iff some key has it as a
/// proper prefix.
#[derive(Debug)]
pub struct S3Client {
    base: Url,
    bucket: String,
    key: SigningKey,
    http: reqwest::Client,
    counters: Arc<EndpointCounters>,
}

impl S3Client {
    pub fn new(
        config: &EndpointConfig,
        http: reqwest::Client,
        counters: Arc<EndpointCounters>,
    ) -> Result<Self, EndpointError> {
        let s3 = config.s3.as_ref().ok_or(SignError::MissingCredentials)?;
        Ok(S3Client {
            base: config.base_url.clone(),
            bucket: s3.bucket.clone(),
            key: SigningKey::new(&s3.access_key, &s3.secret_key, &s3.region)?,
            http,
            counters,
        })
    }

    fn host(&self) -> String {
        let host = self.base.host_str().unwrap_or_default();
        match self.base.port() {
            Some(p) => format!("{host}:{p}"),
            None => host.to_string(),
        }
    }

    /// `/<base path>/<bucket><backend_path>`, unencoded.
    fn object_path(&self, backend_path: &str) -> String {
        let base = self.base.path().trim_end_matches('/');
        let tail = if backend_path == "/" { "" } else { backend_path };
        format!("{base}/{}{tail}", self.bucket)
    }

    fn sign(
        &self,
        method: Method,
        path: String,
        expiry_secs: u64,
        now: DateTime<Utc>,
        extra_query: Vec<(String, String)>,
    ) -> Result<Url, EndpointError> {
        let req = PresignRequest {
            method,
            tls: self.base.scheme() == "https",
            host: self.host(),
            canonical_path: path,
            expiry_secs,
            signing_time: now,
            extra_query,
        };
        Ok(presign(&self.key, &req)?)
    }

    async fn head_object(&self, key_path: &str) -> Result<Option<StatResult>, EndpointError> {
        self.counters.requests.fetch_add(1, Ordering::Relaxed);
        let url = self.sign(
            Method::HEAD,
            self.object_path(key_path),
            INTERNAL_EXPIRY_SECS,
            Utc::now(),
            vec![],
        )?;
        let resp = self.http.head(url).send().await?;
        match resp.status() {
            StatusCode::NOT_FOUND => Ok(None),
            s if s.is_success() => {
                let headers = resp.headers();
                let size = headers
                    .get(header::CONTENT_LENGTH)
                    .and_then(|v| v.to_str().ok())
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| EndpointError::Protocol("HEAD without Content-Length".into()))?;
                let modified = headers
                    .get(header::LAST_MODIFIED)
                    .and_then(|v| v.to_str().ok())
                    .and_then(parse_http_date);
                Ok(Some(StatResult::file(size, modified)))
            }
            s => Err(EndpointError::Status(s.as_u16())),
        }
    }

    /// One page of a delimiter listing under `prefix` (a key prefix, "" or
    /// ending in '/').
    async fn list_page(
        &self,
        prefix: &str,
        max_keys: Option<u32>,
        token: Option<&str>,
    ) -> Result<super::xml::BucketPage, EndpointError> {
        self.counters.requests.fetch_add(1, Ordering::Relaxed);
        let mut query = vec![
            ("delimiter".to_string(), "/".to_string()),
            ("list-type".to_string(), "2".to_string()),
            ("prefix".to_string(), prefix.to_string()),
        ];
        if let Some(n) = max_keys {
            query.push(("max-keys".to_string(), n.to_string()));
        }
        if let Some(t) = token {
            query.push(("continuation-token".to_string(), t.to_string()));
        }
        let url = self.sign(
            Method::GET,
            self.object_path("/"),
            INTERNAL_EXPIRY_SECS,
            Utc::now(),
            query,
        )?;
        let resp = self.http.get(url).send().await?;
        if !resp.status().is_success() {
            return Err(EndpointError::Status(resp.status().as_u16()));
        }
        let body = resp.text().await?;
        parse_list_bucket(&body).map_err(EndpointError::Protocol)
    }
}

fn key_prefix(backend_path: &str) -> String {
    if backend_path == "/" {
        String::new()
    } else {
        format!("{}/", &backend_path[1..])
    }
}

#[async_trait]
impl EndpointClient for S3Client {
    async fn stat(&self, backend_path: &str) -> Result<StatResult, EndpointError> {
        if backend_path == "/" {
            return Ok(StatResult::directory());
        }
        if let Some(found) = self.head_object(backend_path).await? {
            return Ok(found);
        }
        let page = self.list_page(&key_prefix(backend_path), Some(1), None).await?;
        if page.objects.is_empty() && page.common_prefixes.is_empty() {
            Ok(StatResult::absent())
        } else {
            Ok(StatResult::directory())
        }
    }

    async fn list(&self, backend_path: &str) -> Result<Listing, EndpointError> {
        let prefix = key_prefix(backend_path);
        let mut entries = Vec::new();
        let mut token: Option<String> = None;
        loop {
            let page = self.list_page(&prefix, None, token.as_deref()).await?;
            for (key, size) in page.objects {
                if let Some(name) = key.strip_prefix(&prefix) {
                    entries.push(ListEntry {
                        name: name.to_string(),
                        is_directory: false,
                        size: Some(size),
                    });
                }
            }
            for p in page.common_prefixes {
                if let Some(name) = p.strip_prefix(&prefix) {
                    entries.push(ListEntry {
                        name: name.trim_end_matches('/').to_string(),
                        is_directory: true,
                        size: None,
                    });
                }
            }
            match page.next_token {
                Some(t) => token = Some(t),
                None => break,
            }
        }
        if entries.is_empty() && backend_path != "/" {
            return match self.head_object(backend_path).await? {
                Some(_) => Err(EndpointError::NotADirectory),
                None => Err(EndpointError::NotFound),
            };
        }
        Ok(Listing::from_entries(entries))
    }

    async fn probe(&self) -> bool {
        let Ok(url) = self.sign(
            Method::HEAD,
            self.object_path("/"),
            INTERNAL_EXPIRY_SECS,
            Utc::now(),
            vec![],
        ) else {
            return false;
        };
        match self.http.head(url).send().await {
            Ok(r) => r.status().is_success(),
            Err(_) => false,
        }
    }

    async fn delete(&self, backend_path: &str) -> Result<(), EndpointError> {
        let url = self.sign(
            Method::DELETE,
            self.object_path(backend_path),
            INTERNAL_EXPIRY_SECS,
            Utc::now(),
            vec![],
        )?;
        let resp = self.http.delete(url).send().await?;
        match resp.status() {
            s if s.is_success() => Ok(()),
            StatusCode::NOT_FOUND => Err(EndpointError::NotFound),
            s => Err(EndpointError::Status(s.as_u16())),
        }
    }

    fn redirect_url(
        &self,
        backend_path: &str,
        method: &Method,
        expiry: Duration,
        now: DateTime<Utc>,
    ) -> Result<Url, EndpointError> {
        self.sign(
            method.clone(),
            self.object_path(backend_path),
            expiry.as_secs(),
            now,
            vec![],
        )
    }
}
