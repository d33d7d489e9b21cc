//! Gateway configuration: a single TOML file, validated once at startup and
//! immutable afterwards.
//!
//! ```toml
//! [federation]
//! listen_address = "0.0.0.0:8080"
//! fanout_timeout = "3s"
//!
//! [auth]
//! members_path = "members.txt"
//!
//! [[endpoints]]
//! id = "cern"
//! kind = "s3"
//! base_url = "https://s3.cern.example"
//! federated_prefix = "/atlas"
//! backend_prefix = "/"
//! location = { lat = 46.233, lon = 6.056 }
//! s3_access_key = "env:CERN_ACCESS_KEY"
//! s3_secret_key = "env:CERN_SECRET_KEY"
//! s3_region = "cern"
//! s3_bucket = "atlas"
//! ```
//!
//! Durations accept integer or fractional seconds, or humantime strings
//! ("250ms", "3s", "5m"). Relative file paths resolve against the directory
//! holding the config file. Secret values of the form `env:NAME` are read
//! from the environment.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Deserializer};
use url::Url;

use crate::geo::GeoPoint;
use crate::path::{normalize, PathError};

pub const DEFAULT_LISTEN: &str = "127.0.0.1:8080";
pub const DEFAULT_FANOUT_TIMEOUT: Duration = Duration::from_secs(3);
pub const DEFAULT_POLL_INTERVAL: Duration = Duration::from_secs(30);
pub const DEFAULT_PROBE_TIMEOUT: Duration = Duration::from_secs(2);
pub const DEFAULT_FAILURE_THRESHOLD: u32 = 2;
pub const DEFAULT_TTL_POSITIVE: Duration = Duration::from_secs(300);
pub const DEFAULT_TTL_NEGATIVE: Duration = Duration::from_secs(30);
pub const DEFAULT_PRESIGN_EXPIRY: Duration = Duration::from_secs(3600);
pub const DEFAULT_L1_CAPACITY: usize = 100_000;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parsing config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Validation(String),
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Validation(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EndpointKind {
    Webdav,
    S3,
}

impl std::fmt::Display for EndpointKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EndpointKind::Webdav => "webdav",
            EndpointKind::S3 => "s3",
        })
    }
}

#[derive(Clone, PartialEq, Eq)]
pub struct S3Settings {
    pub access_key: String,
    pub secret_key: String,
    pub region: String,
    pub bucket: String,
}

impl std::fmt::Debug for S3Settings {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("S3Settings")
            .field("access_key", &self.access_key)
            .field("region", &self.region)
            .field("bucket", &self.bucket)
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EndpointConfig {
    pub id: String,
    pub kind: EndpointKind,
    pub base_url: Url,
    pub federated_prefix: String,
    pub backend_prefix: String,
    pub location: GeoPoint,
    pub writable: bool,
    /// Present iff `kind` is S3.
    pub s3: Option<S3Settings>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum L2Config {
    None,
    /// Process-local store; only useful when one is injected and shared.
    Memory,
    /// `host:port` of a memcached-compatible server.
    Memcached(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FederationConfig {
    pub listen_address: String,
    pub fanout_timeout: Duration,
    pub health_poll_interval: Duration,
    pub probe_timeout: Duration,
    pub failure_threshold: u32,
    pub cache_ttl_positive: Duration,
    pub cache_ttl_negative: Duration,
    pub l1_capacity: usize,
    pub l2: L2Config,
    pub presign_expiry: Duration,
    pub geo_db_path: Option<PathBuf>,
    pub members_path: Option<PathBuf>,
    pub privileged_path: Option<PathBuf>,
    pub required_attribute_prefix: String,
    pub scratch_prefix: String,
    /// Accept identity from X-Fed-Subject / X-Fed-Attributes. Tests only.
    pub insecure_header_auth: bool,
    /// Header carrying the client DN verified by a fronting TLS terminator.
    pub subject_header: Option<String>,
    pub trust_forwarded_for: bool,
    pub endpoints: Vec<EndpointConfig>,
}

impl FederationConfig {
    /// A config with every default applied around the given endpoints.
    pub fn with_endpoints(endpoints: Vec<EndpointConfig>) -> Self {
        FederationConfig {
            listen_address: DEFAULT_LISTEN.to_string(),
            fanout_timeout: DEFAULT_FANOUT_TIMEOUT,
            health_poll_interval: DEFAULT_POLL_INTERVAL,
            probe_timeout: DEFAULT_PROBE_TIMEOUT,
            failure_threshold: DEFAULT_FAILURE_THRESHOLD,
            cache_ttl_positive: DEFAULT_TTL_POSITIVE,
            cache_ttl_negative: DEFAULT_TTL_NEGATIVE,
            l1_capacity: DEFAULT_L1_CAPACITY,
            l2: L2Config::None,
            presign_expiry: DEFAULT_PRESIGN_EXPIRY,
            geo_db_path: None,
            members_path: None,
            privileged_path: None,
            required_attribute_prefix: "/atlas".to_string(),
            scratch_prefix: "/scratch".to_string(),
            insecure_header_auth: false,
            subject_header: None,
            trust_forwarded_for: false,
            endpoints,
        }
    }

    /// Parse TOML text. Relative paths are resolved against `base_dir`.
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        let raw: RawConfig = toml::from_str(text)?;
        raw.into_config(base_dir)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.fanout_timeout.is_zero() {
            return Err(invalid("federation.fanout_timeout must be > 0"));
        }
        if self.presign_expiry.is_zero() {
            return Err(invalid("federation.presign_expiry must be > 0"));
        }
        if self.presign_expiry > Duration::from_secs(crate::signer::MAX_EXPIRY_SECS) {
            return Err(invalid("federation.presign_expiry exceeds 7 days"));
        }
        if self.health_poll_interval.is_zero() {
            return Err(invalid("federation.health_poll_interval must be > 0"));
        }
        if self.probe_timeout.is_zero() {
            return Err(invalid("federation.probe_timeout must be > 0"));
        }
        if self.failure_threshold == 0 {
            return Err(invalid("federation.failure_threshold must be >= 1"));
        }
        if self.l1_capacity == 0 {
            return Err(invalid("cache.l1_capacity must be >= 1"));
        }
        if self.listen_address.parse::<std::net::SocketAddr>().is_err() {
            return Err(invalid(format!(
                "federation.listen_address {:?} is not host:port",
                self.listen_address
            )));
        }
        check_prefix("auth.scratch_prefix", &self.scratch_prefix)?;
        if self.endpoints.is_empty() {
            return Err(invalid("at least one endpoint must be configured"));
        }
        let mut seen = HashSet::new();
        for ep in &self.endpoints {
            if ep.id.is_empty() {
                return Err(invalid("endpoint id must be non-empty"));
            }
            if !seen.insert(ep.id.as_str()) {
                return Err(invalid(format!("duplicate endpoint id {:?}", ep.id)));
            }
            let ctx = |field: &str| format!("endpoint {:?} {field}", ep.id);
            check_prefix(&ctx("federated_prefix"), &ep.federated_prefix)?;
            check_prefix(&ctx("backend_prefix"), &ep.backend_prefix)?;
            if !matches!(ep.base_url.scheme(), "http" | "https") || ep.base_url.host_str().is_none() {
                return Err(invalid(format!("{} must be an http(s) URL", ctx("base_url"))));
            }
            match (ep.kind, &ep.s3) {
                (EndpointKind::S3, None) => return Err(invalid(format!("{} requires s3_* settings", ctx("kind s3")))),
                (EndpointKind::Webdav, Some(_)) => {
                    return Err(invalid(format!("{} must not carry s3_* settings", ctx("kind webdav"))))
                }
                (EndpointKind::S3, Some(s3)) => {
                    if s3.access_key.is_empty() || s3.secret_key.is_empty() {
                        return Err(invalid(format!("{} are empty", ctx("s3 credentials"))));
                    }
                    if s3.bucket.is_empty() || s3.bucket.contains('/') {
                        return Err(invalid(format!("{} is not a bucket name", ctx("s3_bucket"))));
                    }
                }
                (EndpointKind::Webdav, None) => {}
            }
        }
        Ok(())
    }
}

fn check_prefix(field: &str, value: &str) -> Result<(), ConfigError> {
    match normalize(value) {
        Ok(n) if n == value => Ok(()),
        Ok(n) => Err(invalid(format!("{field} {value:?} is not normalized (expected {n:?})"))),
        Err(e) => Err(invalid(format!("{field} {value:?}: {e}"))),
    }
}

/// Canonical absolute form of a prefix; see [`crate::path`] for the rules.
pub fn validate_prefix(path: &str) -> Result<String, PathError> {
    normalize(path)
}

/// Read, parse, fill defaults and validate.
pub fn load_config(path: &Path) -> Result<FederationConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    FederationConfig::from_toml(&text, base)
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default)]
    federation: RawFederation,
    #[serde(default)]
    auth: RawAuth,
    #[serde(default)]
    geo: RawGeo,
    #[serde(default)]
    cache: RawCache,
    #[serde(default)]
    endpoints: Vec<RawEndpoint>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawFederation {
    listen_address: Option<String>,
    #[serde(default, deserialize_with = "de_duration")]
    fanout_timeout: Option<Duration>,
    #[serde(default, deserialize_with = "de_duration")]
    health_poll_interval: Option<Duration>,
    #[serde(default, deserialize_with = "de_duration")]
    probe_timeout: Option<Duration>,
    failure_threshold: Option<u32>,
    #[serde(default, deserialize_with = "de_duration")]
    presign_expiry: Option<Duration>,
    trust_forwarded_for: Option<bool>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawAuth {
    members_path: Option<PathBuf>,
    privileged_path: Option<PathBuf>,
    required_attribute_prefix: Option<String>,
    scratch_prefix: Option<String>,
    insecure_header_auth: Option<bool>,
    subject_header: Option<String>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawGeo {
    db_path: Option<PathBuf>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawCache {
    #[serde(default, deserialize_with = "de_duration")]
    ttl_positive: Option<Duration>,
    #[serde(default, deserialize_with = "de_duration")]
    ttl_negative: Option<Duration>,
    l1_capacity: Option<usize>,
    /// "none", "memory", or "memcached://host:port".
    l2: Option<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEndpoint {
    id: String,
    kind: EndpointKind,
    base_url: String,
    #[serde(default = "root")]
    federated_prefix: String,
    #[serde(default = "root")]
    backend_prefix: String,
    location: GeoPoint,
    #[serde(default)]
    writable: bool,
    s3_access_key: Option<String>,
    s3_secret_key: Option<String>,
    s3_region: Option<String>,
    s3_bucket: Option<String>,
}

fn root() -> String {
    "/".to_string()
}

impl RawConfig {
    fn into_config(self, base: &Path) -> Result<FederationConfig, ConfigError> {
        let resolve = |p: Option<PathBuf>| p.map(|p| if p.is_absolute() { p } else { base.join(p) });
        let endpoints = self
            .endpoints
            .into_iter()
            .map(RawEndpoint::into_endpoint)
            .collect::<Result<Vec<_>, _>>()?;
        let mut cfg = FederationConfig::with_endpoints(endpoints);
        let f = self.federation;
        if let Some(v) = f.listen_address {
            cfg.listen_address = v;
        }
        if let Some(v) = f.fanout_timeout {
            cfg.fanout_timeout = v;
        }
        if let Some(v) = f.health_poll_interval {
            cfg.health_poll_interval = v;
        }
        if let Some(v) = f.probe_timeout {
            cfg.probe_timeout = v;
        }
        if let Some(v) = f.failure_threshold {
            cfg.failure_threshold = v;
        }
        if let Some(v) = f.presign_expiry {
            cfg.presign_expiry = v;
        }
        cfg.trust_forwarded_for = f.trust_forwarded_for.unwrap_or(false);

        let a = self.auth;
        cfg.members_path = resolve(a.members_path);
        cfg.privileged_path = resolve(a.privileged_path);
        if let Some(v) = a.required_attribute_prefix {
            cfg.required_attribute_prefix = v;
        }
        if let Some(v) = a.scratch_prefix {
            cfg.scratch_prefix = v;
        }
        cfg.insecure_header_auth = a.insecure_header_auth.unwrap_or(false);
        cfg.subject_header = a.subject_header;

        cfg.geo_db_path = resolve(self.geo.db_path);

        let c = self.cache;
        if let Some(v) = c.ttl_positive {
            cfg.cache_ttl_positive = v;
        }
        if let Some(v) = c.ttl_negative {
            cfg.cache_ttl_negative = v;
        }
        if let Some(v) = c.l1_capacity {
            cfg.l1_capacity = v;
        }
        cfg.l2 = match c.l2.as_deref() {
            None | Some("none") => L2Config::None,
            Some("memory") => L2Config::Memory,
            Some(other) => match other.strip_prefix("memcached://") {
                Some(addr) if !addr.is_empty() => L2Config::Memcached(addr.to_string()),
                _ => {
                    return Err(invalid(format!(
                        "cache.l2 {other:?} is not none|memory|memcached://host:port"
                    )))
                }
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl RawEndpoint {
    fn into_endpoint(self) -> Result<EndpointConfig, ConfigError> {
        let base_url =
            Url::parse(&self.base_url).map_err(|e| invalid(format!("endpoint {:?} base_url: {e}", self.id)))?;
        let fields = [self.s3_access_key, self.s3_secret_key, self.s3_region, self.s3_bucket];
        let s3 = match fields {
            [None, None, None, None] => None,
            [Some(ak), Some(sk), Some(region), Some(bucket)] => Some(S3Settings {
                access_key: resolve_secret(&ak)?,
                secret_key: resolve_secret(&sk)?,
                region,
                bucket,
            }),
            _ => {
                return Err(invalid(format!(
                    "endpoint {:?}: s3_access_key, s3_secret_key, s3_region and s3_bucket must be given together",
                    self.id
                )))
            }
        };
        Ok(EndpointConfig {
            id: self.id,
            kind: self.kind,
            base_url,
            federated_prefix: self.federated_prefix,
            backend_prefix: self.backend_prefix,
            location: self.location,
            writable: self.writable,
            s3,
        })
    }
}

fn resolve_secret(value: &str) -> Result<String, ConfigError> {
    match value.strip_prefix("env:") {
        Some(name) => std::env::var(name).map_err(|_| invalid(format!("environment variable {name} is not set"))),
        None => Ok(value.to_string()),
    }
}

fn de_duration<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Duration>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Int(u64),
        Float(f64),
        Text(String),
    }
    let parsed = match Raw::deserialize(d)? {
        Raw::Int(s) => Duration::from_secs(s),
        Raw::Float(s) => Duration::try_from_secs_f64(s).map_err(serde::de::Error::custom)?,
        Raw::Text(t) => humantime::parse_duration(&t).map_err(serde::de::Error::custom)?,
    };
    Ok(Some(parsed))
}

#[cfg(test)]
mod tests {
    use super::*;

    const ONE: &str = r#"
[[endpoints]]
id = "ep1"
kind = "webdav"
base_url = "http://127.0.0.1:1/dav"
location = { lat = 46.2, lon = 6.1 }
"#;

    fn parse(text: &str) -> Result<FederationConfig, ConfigError> {
        FederationConfig::from_toml(text, Path::new("/etc/fedgate"))
    }

    #[test]
    fn defaults_fill_in() {
        let cfg = parse(ONE).unwrap();
        assert_eq!(cfg.fanout_timeout, Duration::from_secs(3));
        assert_eq!(cfg.health_poll_interval, Duration::from_secs(30));
        assert_eq!(cfg.cache_ttl_positive, Duration::from_secs(300));
        assert_eq!(cfg.cache_ttl_negative, Duration::from_secs(30));
        assert_eq!(cfg.presign_expiry, Duration::from_secs(3600));
        assert_eq!(cfg.failure_threshold, 2);
        assert_eq!(cfg.endpoints[0].federated_prefix, "/");
        assert_eq!(cfg.l2, L2Config::None);
    }

    #[test]
    fn zero_endpoints_rejected() {
        let err = parse("[federation]\nfanout_timeout = 1\n").unwrap_err();
        assert!(err.to_string().contains("at least one endpoint"), "{err}");
    }

    #[test]
    fn duplicate_id_named() {
        let err = parse(&format!("{ONE}{ONE}")).unwrap_err();
        assert!(err.to_string().contains("duplicate endpoint id \"ep1\""), "{err}");
    }

    #[test]
    fn durations_and_paths() {
        let text = format!(
            "[federation]\nfanout_timeout = \"250ms\"\npresign_expiry = 1.5\n[geo]\ndb_path = \"geo.csv\"\n[auth]\nmembers_path = \"/abs/m.txt\"\n{ONE}"
        );
        let cfg = parse(&text).unwrap();
        assert_eq!(cfg.fanout_timeout, Duration::from_millis(250));
        assert_eq!(cfg.presign_expiry, Duration::from_millis(1500));
        assert_eq!(cfg.geo_db_path.as_deref(), Some(Path::new("/etc/fedgate/geo.csv")));
        assert_eq!(cfg.members_path.as_deref(), Some(Path::new("/abs/m.txt")));
    }

    #[test]
    fn invariant_violations() {
        assert!(parse(&format!("[federation]\nfanout_timeout = 0\n{ONE}")).is_err());
        assert!(parse(&format!("[federation]\npresign_expiry = \"0s\"\n{ONE}")).is_err());
        let bad_prefix = ONE.replace("location", "federated_prefix = \"/a//b\"\nlocation");
        assert!(parse(&bad_prefix).unwrap_err().to_string().contains("not normalized"));
        let traversal = ONE.replace("location", "backend_prefix = \"/a/../b\"\nlocation");
        assert!(parse(&traversal).is_err());
        let s3_on_dav = ONE.replace(
            "location",
            "s3_access_key=\"a\"\ns3_secret_key=\"b\"\ns3_region=\"r\"\ns3_bucket=\"k\"\nlocation",
        );
        assert!(parse(&s3_on_dav).unwrap_err().to_string().contains("must not carry"));
        let s3_missing = ONE.replace("\"webdav\"", "\"s3\"");
        assert!(parse(&s3_missing).unwrap_err().to_string().contains("requires s3_"));
        let partial = ONE.replace("location", "s3_access_key=\"a\"\nlocation");
        assert!(parse(&partial).is_err());
        let bad_loc = ONE.replace("lat = 46.2", "lat = 146.2");
        assert!(matches!(parse(&bad_loc), Err(ConfigError::Parse(_))));
        assert!(matches!(parse("[[endpoints]\n"), Err(ConfigError::Parse(_))));
        assert!(matches!(
            parse(&format!("bogus = 1\n{ONE}")),
            Err(ConfigError::Parse(_))
        ));
    }

    #[test]
    fn env_indirection() {
        std::env::set_var("FEDGATE_TEST_SECRET_XYZ", "s3cr3t");
        let text = ONE.replace("\"webdav\"", "\"s3\"").replace(
            "location",
            "s3_access_key=\"ak\"\ns3_secret_key=\"env:FEDGATE_TEST_SECRET_XYZ\"\ns3_region=\"r\"\ns3_bucket=\"b\"\nlocation",
        );
        let cfg = parse(&text).unwrap();
        assert_eq!(cfg.endpoints[0].s3.as_ref().unwrap().secret_key, "s3cr3t");
        let missing = text.replace("FEDGATE_TEST_SECRET_XYZ", "FEDGATE_TEST_UNSET_VAR_XYZ");
        assert!(parse(&missing)
            .unwrap_err()
            .to_string()
            .contains("FEDGATE_TEST_UNSET_VAR_XYZ"));
    }

    #[test]
    fn deterministic() {
        assert_eq!(parse(ONE).unwrap(), parse(ONE).unwrap());
    }

    #[test]
    fn l2_forms() {
        let cfg = parse(&format!("[cache]\nl2 = \"memcached://127.0.0.1:11211\"\n{ONE}")).unwrap();
        assert_eq!(cfg.l2, L2Config::Memcached("127.0.0.1:11211".into()));
        assert!(parse(&format!("[cache]\nl2 = \"redis://x\"\n{ONE}")).is_err());
    }

    #[test]
    fn prefix_examples() {
        assert_eq!(validate_prefix("/data//atlas/").unwrap(), "/data/atlas");
        assert_eq!(validate_prefix("/").unwrap(), "/");
        assert!(validate_prefix("/a/../b").is_err());
    }
}
