use std::sync::atomic::Ordering;
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use chrono::{DateTime, Utc};
use http::{header, Method, StatusCode};
use percent_encoding::percent_decode_str;
use url::Url;

use super::xml::parse_multistatus;
use super::{join_url, EndpointClient, EndpointCounters, EndpointError, ListEntry, Listing, StatResult};
use crate::config::EndpointConfig;

/// Content type a DAV server reports on HEAD of a collection.
pub const DIRECTORY_CONTENT_TYPE: &str = "httpd/unix-directory";

const PROPFIND_BODY: &str = "<?xml version=\"1.0\" encoding=\"utf-8\"?>\n\
<D:propfind xmlns:D=\"DAV:\"><D:prop><D:resourcetype/><D:getcontentlength/><D:getlastmodified/></D:prop></D:propfind>";

/// Plain HTTP/WebDAV endpoint: HEAD for stat, PROPFIND Depth 1 for list,
/// OPTIONS for probe. Redirects point at the unsigned backend URL.
#[derive(Debug)]
pub struct WebDavClient {
    base: Url,
    http: reqwest::Client,
    counters: Arc<EndpointCounters>,
}

impl WebDavClient {
    pub fn new(config: &EndpointConfig, http: reqwest::Client, counters: Arc<EndpointCounters>) -> Self {
        WebDavClient {
            base: config.base_url.clone(),
            http,
            counters,
        }
    }

    fn url(&self, backend_path: &str) -> Url {
        join_url(&self.base, backend_path)
    }
}

pub(crate) fn parse_http_date(value: &str) -> Option<DateTime<Utc>> {
    DateTime::parse_from_rfc2822(value).ok().map(|d| d.with_timezone(&Utc))
}

fn decoded_path(href: &str) -> String {
    // Hrefs may be absolute URLs or absolute paths.
    let path = match Url::parse(href) {
        Ok(u) => u.path().to_string(),
        Err(_) => href.to_string(),
    };
    let path = percent_decode_str(&path).decode_utf8_lossy().into_owned();
    let trimmed = path.trim_end_matches('/');
    if trimmed.is_empty() {
        "/".to_string()
    } else {
        trimmed.to_string()
    }
}

#[async_trait]
impl EndpointClient for WebDavClient {
    async fn stat(&self, backend_path: &str) -> Result<StatResult, EndpointError> {
        self.counters.requests.fetch_add(1, Ordering::Relaxed);
        let resp = self.http.head(self.url(backend_path)).send().await?;
        match resp.status() {
            StatusCode::NOT_FOUND | StatusCode::GONE => Ok(StatResult::absent()),
            s if s.is_success() => {
                let headers = resp.headers();
                let is_dir = headers
                    .get(header::CONTENT_TYPE)
                    .and_then(|v| v.to_str().ok())
                    .is_some_and(|v| v.starts_with(DIRECTORY_CONTENT_TYPE));
                if is_dir {
                    return Ok(StatResult::directory());
                }
                let size = headers
                    .get(header::CONTENT_LENGTH)
                    .and_then(|v| v.to_str().ok())
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| EndpointError::Protocol("HEAD without Content-Length".into()))?;
                let modified = headers
                    .get(header::LAST_MODIFIED)
                    .and_then(|v| v.to_str().ok())
                    .and_then(parse_http_date);
                Ok(StatResult::file(size, modified))
            }
            s => Err(EndpointError::Status(s.as_u16())),
        }
    }

    async fn list(&self, backend_path: &str) -> Result<Listing, EndpointError> {
        self.counters.requests.fetch_add(1, Ordering::Relaxed);
        let url = self.url(backend_path);
        let resp = self
            .http
            .request(Method::from_bytes(b"PROPFIND").expect("valid method"), url.clone())
            .header("Depth", "1")
            .header(header::CONTENT_TYPE, "application/xml; charset=utf-8")
            .body(PROPFIND_BODY)
            .send()
            .await?;
        match resp.status() {
            StatusCode::MULTI_STATUS => {}
            StatusCode::NOT_FOUND => return Err(EndpointError::NotFound),
            s => return Err(EndpointError::Status(s.as_u16())),
        }
        let body = resp.text().await?;
        let resources = parse_multistatus(&body).map_err(EndpointError::Protocol)?;
        let own = decoded_path(url.path());
        let mut children = Vec::new();
        let mut saw_self = false;
        for r in resources {
            let path = decoded_path(&r.href);
            if path == own {
                saw_self = true;
                if !r.is_collection {
                    return Err(EndpointError::NotADirectory);
                }
                continue;
            }
            let parent_matches = match path.rsplit_once('/') {
                Some(("", _)) => own == "/",
                Some((parent, _)) => parent == own,
                None => false,
            };
            if !parent_matches {
                continue;
            }
            let name = path.rsplit('/').next().unwrap_or_default().to_string();
            children.push(ListEntry {
                name,
                is_directory: r.is_collection,
                size: r.content_length,
            });
        }
        if !saw_self && children.is_empty() {
            return Err(EndpointError::Protocol("multistatus without self entry".into()));
        }
        Ok(Listing::from_entries(children))
    }

    async fn probe(&self) -> bool {
        match self.http.request(Method::OPTIONS, self.base.clone()).send().await {
            Ok(r) => r.status().is_success(),
            Err(_) => false,
        }
    }

    async fn delete(&self, backend_path: &str) -> Result<(), EndpointError> {
        let resp = self.http.delete(self.url(backend_path)).send().await?;
        match resp.status() {
            s if s.is_success() => Ok(()),
            StatusCode::NOT_FOUND => Err(EndpointError::NotFound),
            s => Err(EndpointError::Status(s.as_u16())),
        }
    }

    fn redirect_url(
        &self,
        backend_path: &str,
        _method: &Method,
        _expiry: Duration,
        _now: DateTime<Utc>,
    ) -> Result<Url, EndpointError> {
        Ok(self.url(backend_path))
    }
}
