//! Time-limited pre-signed S3 URLs (Signature Version 4, query authorization,
//! unsigned payload, path-style addressing).
//!
//! [`presign`] never reads the clock: the signing time is part of the request
//! so identical inputs give byte-identical URLs. [`verify`] is the server-side
//! counterpart used by the simulated object store.

use std::fmt::Write;

use chrono::{DateTime, NaiveDateTime, Utc};
use hmac::{Hmac, KeyInit, Mac};
use http::Method;
use percent_encoding::{percent_decode_str, utf8_percent_encode};
use sha2::{Digest, Sha256};
use url::Url;

use crate::path::{encode_path, UNRESERVED};

pub const ALGORITHM: &str = "AWS4-HMAC-SHA256";
pub const SERVICE: &str = "s3";
pub const UNSIGNED_PAYLOAD: &str = "UNSIGNED-PAYLOAD";
/// Seven days, the longest validity the scheme allows.
pub const MAX_EXPIRY_SECS: u64 = 604_800;

const X_AMZ_ALGORITHM: &str = "X-Amz-Algorithm";
const X_AMZ_CREDENTIAL: &str = "X-Amz-Credential";
const X_AMZ_DATE: &str = "X-Amz-Date";
const X_AMZ_EXPIRES: &str = "X-Amz-Expires";
const X_AMZ_SIGNED_HEADERS: &str = "X-Amz-SignedHeaders";
const X_AMZ_SIGNATURE: &str = "X-Amz-Signature";

const ISO8601_BASIC: &str = "%Y%m%dT%H%M%SZ";

type HmacSha256 = Hmac<Sha256>;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SignError {
    #[error("access key and secret key must be non-empty")]
    MissingCredentials,
    #[error("expiry {0}s outside 1..={MAX_EXPIRY_SECS}")]
    ExpiryOutOfRange(u64),
    #[error("malformed host {0:?}")]
    MalformedHost(String),
    #[error("malformed path {0:?}")]
    MalformedPath(String),
}

#[derive(Clone, PartialEq, Eq)]
pub struct SigningKey {
    access_key: String,
    secret_key: String,
    region: String,
}

impl std::fmt::Debug for SigningKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SigningKey")
            .field("access_key", &self.access_key)
            .field("region", &self.region)
            .finish_non_exhaustive()
    }
}

impl SigningKey {
    pub fn new(
        access_key: impl Into<String>,
        secret_key: impl Into<String>,
        region: impl Into<String>,
    ) -> Result<Self, SignError> {
        let (access_key, secret_key) = (access_key.into(), secret_key.into());
        if access_key.is_empty() || secret_key.is_empty() {
            return Err(SignError::MissingCredentials);
        }
        Ok(SigningKey {
            access_key,
            secret_key,
            region: region.into(),
        })
    }

    pub fn access_key(&self) -> &str {
        &self.access_key
    }

    pub fn region(&self) -> &str {
        &self.region
    }

    pub(crate) fn secret(&self) -> &str {
        &self.secret_key
    }

    fn derive(&self, date: &str) -> Vec<u8> {
        let k_date = hmac(format!("AWS4{}", self.secret_key).as_bytes(), date.as_bytes());
        let k_region = hmac(&k_date, self.region.as_bytes());
        let k_service = hmac(&k_region, SERVICE.as_bytes());
        hmac(&k_service, b"aws4_request")
    }
}

#[derive(Debug, Clone)]
pub struct PresignRequest {
    pub method: Method,
    /// `https` when true, `http` otherwise.
    pub tls: bool,
    /// Authority, optionally with port: `s3.example.org` or `127.0.0.1:9000`.
    pub host: String,
    /// Unencoded path including the bucket, e.g. `/bucket/dir/key`.
    pub canonical_path: String,
    pub expiry_secs: u64,
    pub signing_time: DateTime<Utc>,
    /// Additional query parameters covered by the signature (list-type,
    /// prefix, ...), unencoded.
    pub extra_query: Vec<(String, String)>,
}

impl PresignRequest {
    pub fn new(
        method: Method,
        host: impl Into<String>,
        canonical_path: impl Into<String>,
        expiry_secs: u64,
        signing_time: DateTime<Utc>,
    ) -> Self {
        PresignRequest {
            method,
            tls: false,
            host: host.into(),
            canonical_path: canonical_path.into(),
            expiry_secs,
            signing_time,
            extra_query: Vec::new(),
        }
    }
}

pub fn presign(key: &SigningKey, req: &PresignRequest) -> Result<Url, SignError> {
    if !(1..=MAX_EXPIRY_SECS).contains(&req.expiry_secs) {
        return Err(SignError::ExpiryOutOfRange(req.expiry_secs));
    }
    let host_ok = !req.host.is_empty()
        && !req
            .host
            .chars()
            .any(|c| c.is_whitespace() || c.is_control() || "/?#@\\".contains(c));
    if !host_ok {
        return Err(SignError::MalformedHost(req.host.clone()));
    }
    if !req.canonical_path.starts_with('/') || req.canonical_path.chars().any(char::is_control) {
        return Err(SignError::MalformedPath(req.canonical_path.clone()));
    }

    let scheme = if req.tls { "https" } else { "http" };
    let encoded_path = encode_path(&req.canonical_path);
    // Round-trip through the URL parser so the signed host matches what a
    // verifier sees after default-port elision.
    let base = Url::parse(&format!("{scheme}://{}{encoded_path}", req.host))
        .map_err(|_| SignError::MalformedHost(req.host.clone()))?;
    if base.path() != encoded_path {
        return Err(SignError::MalformedPath(req.canonical_path.clone()));
    }
    let host = host_header(&base).ok_or_else(|| SignError::MalformedHost(req.host.clone()))?;

    let amz_date = req.signing_time.format(ISO8601_BASIC).to_string();
    let date = &amz_date[..8];
    let scope = format!("{date}/{}/{SERVICE}/aws4_request", key.region);

    let mut params: Vec<(String, String)> = req.extra_query.iter().map(|(k, v)| (encode(k), encode(v))).collect();
    params.extend([
        (X_AMZ_ALGORITHM.to_string(), ALGORITHM.to_string()),
        (
            X_AMZ_CREDENTIAL.to_string(),
            encode(&format!("{}/{scope}", key.access_key)),
        ),
        (X_AMZ_DATE.to_string(), amz_date.clone()),
        (X_AMZ_EXPIRES.to_string(), req.expiry_secs.to_string()),
        (X_AMZ_SIGNED_HEADERS.to_string(), "host".to_string()),
    ]);
    params.sort();
    let query = join_query(&params);

    let signature = signature(key, &req.method, &encoded_path, &query, &host, &amz_date);
    let mut url = base;
    url.set_query(Some(&format!("{query}&{X_AMZ_SIGNATURE}={signature}")));
    Ok(url)
}

/// True iff `url` carries a valid signature by `key` for `method` and `now`
/// lies before the end of its validity window. Non-canonical encodings are
/// rejected so that any single-character change invalidates the URL.
pub fn verify(key: &SigningKey, method: &Method, url: &Url, now: DateTime<Utc>) -> bool {
    check(key, method, url, now).is_some()
}

fn check(key: &SigningKey, method: &Method, url: &Url, now: DateTime<Utc>) -> Option<()> {
    if !matches!(url.scheme(), "http" | "https") || url.fragment().is_some() {
        return None;
    }
    let host = host_header(url)?;
    let path = url.path();
    if encode_path(&decode(path)?) != path {
        return None;
    }

    let mut params: Vec<(&str, &str)> = Vec::new();
    let mut signature = None;
    for pair in url.query()?.split('&') {
        let (name, value) = pair.split_once('=')?;
        if encode(&decode(name)?) != name || encode(&decode(value)?) != value {
            return None;
        }
        if name == X_AMZ_SIGNATURE {
            if signature.replace(value).is_some() {
                return None;
            }
        } else {
            if params.iter().any(|(n, _)| *n == name) {
                return None;
            }
            params.push((name, value));
        }
    }
    let signature = signature?;
    if signature.len() != 64 || !signature.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f')) {
        return None;
    }
    let get = |name: &str| params.iter().find(|(n, _)| *n == name).map(|(_, v)| *v);

    if get(X_AMZ_ALGORITHM)? != ALGORITHM || get(X_AMZ_SIGNED_HEADERS)? != "host" {
        return None;
    }
    let amz_date = get(X_AMZ_DATE)?;
    let signed_at = NaiveDateTime::parse_from_str(amz_date, ISO8601_BASIC).ok()?.and_utc();
    if signed_at.format(ISO8601_BASIC).to_string() != amz_date {
        return None;
    }
    let expires = get(X_AMZ_EXPIRES)?;
    let expiry: u64 = expires.parse().ok()?;
    if expiry.to_string() != expires || !(1..=MAX_EXPIRY_SECS).contains(&expiry) {
        return None;
    }
    let credential = decode(get(X_AMZ_CREDENTIAL)?)?;
    let expected = format!(
        "{}/{}/{}/{SERVICE}/aws4_request",
        key.access_key,
        &amz_date[..8],
        key.region
    );
    if credential != expected {
        return None;
    }
    if now >= signed_at + chrono::Duration::seconds(expiry as i64) {
        return None;
    }

    let mut sorted: Vec<(String, String)> = params.iter().map(|(n, v)| (n.to_string(), v.to_string())).collect();
    sorted.sort();
    let string_to_sign = string_to_sign(key, method, path, &join_query(&sorted), &host, amz_date);
    let provided = hex::decode(signature).ok()?;
    let mut mac = HmacSha256::new_from_slice(&key.derive(&amz_date[..8])).ok()?;
    mac.update(string_to_sign.as_bytes());
    mac.verify_slice(&provided).ok()
}

fn signature(
    key: &SigningKey,
    method: &Method,
    encoded_path: &str,
    canonical_query: &str,
    host: &str,
    amz_date: &str,
) -> String {
    let sts = string_to_sign(key, method, encoded_path, canonical_query, host, amz_date);
    hex::encode(hmac(&key.derive(&amz_date[..8]), sts.as_bytes()))
}

fn string_to_sign(
    key: &SigningKey,
    method: &Method,
    encoded_path: &str,
    canonical_query: &str,
    host: &str,
    amz_date: &str,
) -> String {
    let canonical_request =
        format!("{method}\n{encoded_path}\n{canonical_query}\nhost:{host}\n\nhost\n{UNSIGNED_PAYLOAD}");
    let mut out = String::new();
    let _ = write!(
        out,
        "{ALGORITHM}\n{amz_date}\n{}/{}/{SERVICE}/aws4_request\n{}",
        &amz_date[..8],
        key.region,
        hex::encode(Sha256::digest(canonical_request.as_bytes()))
    );
    out
}

fn host_header(url: &Url) -> Option<String> {
    let host = url.host_str()?;
    Some(match url.port() {
        Some(port) => format!("{host}:{port}"),
        None => host.to_string(),
    })
}

fn hmac(key: &[u8], data: &[u8]) -> Vec<u8> {
    let mut mac = HmacSha256::new_from_slice(key).expect("HMAC accepts keys of any length");
    mac.update(data);
    mac.finalize().into_bytes().to_vec()
}

fn encode(s: &str) -> String {
    utf8_percent_encode(s, UNRESERVED).to_string()
}

fn decode(s: &str) -> Option<String> {
    percent_decode_str(s).decode_utf8().ok().map(|c| c.into_owned())
}

fn join_query(params: &[(String, String)]) -> String {
    params
        .iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect::<Vec<_>>()
        .join("&")
}
