//! Federation in a box: simulated endpoints, generated geo and membership
//! fixtures, and a gateway wired to them, all on loopback ports.

mod script;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::net::IpAddr;
use std::sync::Arc;
use std::time::Duration;

use http::Method;

use crate::config::FederationConfig;
use crate::gateway::{metrics, Gateway, GatewayError, RunningGateway};
use crate::geo::GeoPoint;
use crate::locator::L2Cache;
use crate::signer::SigningKey;
use crate::sim::{SimEndpoint, SimKind};

pub use script::{parse_script, ParsedStep, ScriptError, ScriptReport, Step, StepOutcome};

pub const CERN: (f64, f64) = (46.2330, 6.0557);
pub const TRIUMF: (f64, f64) = (49.2475, -123.2308);
pub const UVIC: (f64, f64) = (48.4634, -123.3117);

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("scenario: {0}")]
    Spec(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Script(#[from] ScriptError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EndpointKindSpec {
    WebDav,
    S3,
}

#[derive(Debug, Clone)]
pub struct EndpointSpec {
    pub id: String,
    pub kind: EndpointKindSpec,
    pub location: GeoPoint,
    pub latency: Duration,
    pub initially_down: bool,
    /// Backend paths to contents.
    pub objects: BTreeMap<String, Vec<u8>>,
    pub federated_prefix: String,
    pub backend_prefix: String,
    pub writable: bool,
}

impl EndpointSpec {
    pub fn new(id: &str, kind: EndpointKindSpec, (lat, lon): (f64, f64)) -> Self {
        EndpointSpec {
            id: id.to_string(),
            kind,
            location: GeoPoint::new(lat, lon).expect("valid coordinates"),
            latency: Duration::ZERO,
            initially_down: false,
            objects: BTreeMap::new(),
            federated_prefix: "/".to_string(),
            backend_prefix: "/".to_string(),
            writable: true,
        }
    }

    pub fn with_object(mut self, path: &str, data: impl Into<Vec<u8>>) -> Self {
        self.objects.insert(path.to_string(), data.into());
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClientRole {
    /// Listed in the privileged file.
    Privileged,
    /// Carries the organisation attribute.
    Member,
    /// Authenticated but not part of the organisation.
    Outsider,
    /// Presents no credential at all.
    Anonymous,
}

#[derive(Debug, Clone)]
pub struct ClientSpec {
    pub name: String,
    pub ip: IpAddr,
    pub location: GeoPoint,
    pub role: ClientRole,
}

impl ClientSpec {
    pub fn new(name: &str, ip: &str, (lat, lon): (f64, f64), role: ClientRole) -> Self {
        ClientSpec {
            name: name.to_string(),
            ip: ip.parse().expect("valid client ip"),
            location: GeoPoint::new(lat, lon).expect("valid coordinates"),
            role,
        }
    }

    pub fn subject(&self) -> Option<String> {
        match self.role {
            ClientRole::Anonymous => None,
            _ => Some(format!("/DC=org/DC=example/CN={}", self.name)),
        }
    }

    pub fn attributes(&self) -> Vec<String> {
        match self.role {
            ClientRole::Member => vec!["/atlas/Role=NULL".to_string()],
            _ => Vec::new(),
        }
    }
}

/// Overrides applied on top of the harness defaults.
#[derive(Debug, Clone, Default)]
pub struct Knobs {
    pub fanout_timeout: Option<Duration>,
    pub health_poll_interval: Option<Duration>,
    pub probe_timeout: Option<Duration>,
    pub failure_threshold: Option<u32>,
    pub cache_ttl_positive: Option<Duration>,
    pub cache_ttl_negative: Option<Duration>,
    pub presign_expiry: Option<Duration>,
    pub scratch_prefix: Option<String>,
    /// Shared L2, e.g. to put several federations behind one cache.
    pub l2: Option<Arc<dyn L2Cache>>,
}

#[derive(Debug, Clone)]
pub struct ScenarioSpec {
    pub endpoints: Vec<EndpointSpec>,
    pub clients: Vec<ClientSpec>,
    pub knobs: Knobs,
}

impl ScenarioSpec {
    /// CERN and TRIUMF as S3 stores, Victoria as WebDAV, with one client of
    /// each role near CERN and one member near each of the other sites.
    pub fn three_sites() -> Self {
        ScenarioSpec {
            endpoints: vec![
                EndpointSpec::new("cern", EndpointKindSpec::S3, CERN),
                EndpointSpec::new("triumf", EndpointKindSpec::S3, TRIUMF),
                EndpointSpec::new("uvic", EndpointKindSpec::WebDav, UVIC),
            ],
            clients: vec![
                ClientSpec::new("geneva", "192.0.2.10", (46.2044, 6.1432), ClientRole::Member),
                ClientSpec::new("vancouver", "198.51.100.10", (49.2827, -123.1207), ClientRole::Member),
                ClientSpec::new("victoria", "203.0.113.10", (48.4284, -123.3656), ClientRole::Member),
                ClientSpec::new("admin", "192.0.2.20", (46.2330, 6.0557), ClientRole::Privileged),
                ClientSpec::new("outsider", "192.0.2.30", (46.2044, 6.1432), ClientRole::Outsider),
                ClientSpec::new("anonymous", "192.0.2.40", (46.2044, 6.1432), ClientRole::Anonymous),
            ],
            knobs: Knobs::default(),
        }
    }

    /// Put `data` at `path` on every endpoint.
    pub fn with_object_everywhere(mut self, path: &str, data: &[u8]) -> Self {
        for e in &mut self.endpoints {
            e.objects.insert(path.to_string(), data.to_vec());
        }
        self
    }

    pub fn endpoint_mut(&mut self, id: &str) -> &mut EndpointSpec {
        self.endpoints
            .iter_mut()
            .find(|e| e.id == id)
            .unwrap_or_else(|| panic!("no endpoint {id} in scenario"))
    }

    fn validate(&self) -> Result<(), HarnessError> {
        let mut ids = std::collections::HashSet::new();
        for e in &self.endpoints {
            if !ids.insert(&e.id) {
                return Err(HarnessError::Spec(format!("duplicate endpoint id {}", e.id)));
            }
            for p in e.objects.keys() {
                if crate::path::normalize(p).as_deref() != Ok(p.as_str()) {
                    return Err(HarnessError::Spec(format!(
                        "object path {p:?} on {} is not normalized",
                        e.id
                    )));
                }
            }
        }
        let mut ips = std::collections::HashSet::new();
        for c in &self.clients {
            if !ips.insert(c.ip) {
                return Err(HarnessError::Spec(format!("duplicate client ip {}", c.ip)));
            }
        }
        Ok(())
    }
}

/// A running scenario.
pub struct Federation {
    spec: ScenarioSpec,
    sims: Vec<(String, SimEndpoint)>,
    gateway: RunningGateway,
    http: reqwest::Client,
    _fixtures: tempfile::TempDir,
}

pub const HARNESS_POLL_INTERVAL: Duration = Duration::from_millis(250);
pub const HARNESS_PROBE_TIMEOUT: Duration = Duration::from_millis(500);

/// Start the simulated endpoints and a gateway in front of them.
pub async fn launch(spec: ScenarioSpec) -> Result<Federation, HarnessError> {
    spec.validate()?;
    let fixtures = tempfile::tempdir()?;
    let mut sims = Vec::with_capacity(spec.endpoints.len());
    let mut endpoint_configs = Vec::with_capacity(spec.endpoints.len());
    for e in &spec.endpoints {
        let sim = match e.kind {
            EndpointKindSpec::WebDav => SimEndpoint::start(SimKind::WebDav).await?,
            EndpointKindSpec::S3 => {
                let key = SigningKey::new(
                    format!("AK{}", e.id.to_uppercase()),
                    format!("secret/{}+key", e.id),
                    format!("site-{}", e.id),
                )
                .map_err(|err| HarnessError::Spec(err.to_string()))?;
                SimEndpoint::start(SimKind::S3 {
                    bucket: format!("{}-data", e.id),
                    key,
                })
                .await?
            }
        };
        for (p, data) in &e.objects {
            sim.store().put(p, data.clone());
        }
        sim.set_latency(e.latency);
        sim.set_down(e.initially_down);
        endpoint_configs.push(sim.endpoint_config(
            &e.id,
            &e.federated_prefix,
            &e.backend_prefix,
            e.location,
            e.writable,
        ));
        sims.push((e.id.clone(), sim));
    }

    let mut geo = String::from("# generated client locations\n");
    let mut members = String::new();
    let mut privileged = String::new();
    for c in &spec.clients {
        let bits = if c.ip.is_ipv4() { 32 } else { 128 };
        let _ = writeln!(geo, "{}/{bits},{},{}", c.ip, c.location.lat(), c.location.lon());
        if let (ClientRole::Privileged, Some(s)) = (c.role, c.subject()) {
            let _ = writeln!(privileged, "{s}");
        }
        if let (ClientRole::Member, Some(s)) = (c.role, c.subject()) {
            let _ = writeln!(members, "{s}");
        }
    }
    let geo_path = fixtures.path().join("geo.csv");
    let members_path = fixtures.path().join("members.txt");
    let privileged_path = fixtures.path().join("privileged.txt");
    std::fs::write(&geo_path, geo)?;
    std::fs::write(&members_path, members)?;
    std::fs::write(&privileged_path, privileged)?;

    let mut config = FederationConfig::with_endpoints(endpoint_configs);
    config.listen_address = "127.0.0.1:0".to_string();
    config.geo_db_path = Some(geo_path);
    config.members_path = Some(members_path);
    config.privileged_path = Some(privileged_path);
    config.insecure_header_auth = true;
    config.trust_forwarded_for = true;
    config.health_poll_interval = HARNESS_POLL_INTERVAL;
    config.probe_timeout = HARNESS_PROBE_TIMEOUT;
    let k = &spec.knobs;
    macro_rules! knob {
        ($($field:ident),*) => { $( if let Some(v) = k.$field.clone() { config.$field = v; } )* };
    }
    knob!(
        fanout_timeout,
        health_poll_interval,
        probe_timeout,
        failure_threshold,
        cache_ttl_positive,
        cache_ttl_negative,
        presign_expiry,
        scratch_prefix
    );

    let gateway = Gateway::with_l2(config, k.l2.clone())?;
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await?;
    let gateway = gateway.start(listener)?;
    let http = reqwest::Client::builder()
        .redirect(reqwest::redirect::Policy::none())
        .build()
        .map_err(|e| HarnessError::Spec(e.to_string()))?;
    Ok(Federation {
        spec,
        sims,
        gateway,
        http,
        _fixtures: fixtures,
    })
}

impl Federation {
    pub fn spec(&self) -> &ScenarioSpec {
        &self.spec
    }

    pub fn base_url(&self) -> String {
        self.gateway.base_url()
    }

    pub fn gateway(&self) -> &Gateway {
        self.gateway.gateway()
    }

    pub fn http(&self) -> &reqwest::Client {
        &self.http
    }

    pub fn sim(&self, id: &str) -> &SimEndpoint {
        self.sims
            .iter()
            .find(|(i, _)| i == id)
            .map(|(_, s)| s)
            .unwrap_or_else(|| panic!("no endpoint {id} in scenario"))
    }

    pub fn sims(&self) -> impl Iterator<Item = (&str, &SimEndpoint)> {
        self.sims.iter().map(|(i, s)| (i.as_str(), s))
    }

    /// Endpoint id whose simulated server listens on `url`'s host and port.
    pub fn endpoint_for_url(&self, url: &url::Url) -> Option<&str> {
        let port = url.port_or_known_default()?;
        self.sims
            .iter()
            .find(|(_, s)| s.addr().port() == port && url.host_str() == Some(&s.addr().ip().to_string()))
            .map(|(i, _)| i.as_str())
    }

    pub fn client(&self, name: &str) -> &ClientSpec {
        self.spec
            .clients
            .iter()
            .find(|c| c.name == name)
            .unwrap_or_else(|| panic!("no client {name} in scenario"))
    }

    pub fn client_by_ip(&self, ip: IpAddr) -> Option<&ClientSpec> {
        self.spec.clients.iter().find(|c| c.ip == ip)
    }

    pub fn set_latency(&self, id: &str, latency: Duration) {
        self.sim(id).set_latency(latency);
    }

    pub fn set_down(&self, id: &str, down: bool) {
        self.sim(id).set_down(down);
    }

    /// A gateway request carrying `client`'s address and identity headers.
    pub fn request(&self, client: &ClientSpec, method: Method, path: &str) -> reqwest::RequestBuilder {
        let url = format!("{}{}", self.base_url(), crate::path::encode_path(path));
        let mut req = self
            .http
            .request(method, url)
            .header("X-Forwarded-For", client.ip.to_string());
        if let Some(s) = client.subject() {
            req = req.header("X-Fed-Subject", s);
        }
        let attrs = client.attributes();
        if !attrs.is_empty() {
            req = req.header("X-Fed-Attributes", attrs.join(","));
        }
        req
    }

    /// Sum of stat/list requests received by all simulated endpoints.
    pub fn total_sim_queries(&self) -> u64 {
        self.sims.iter().map(|(_, s)| s.counters().queries()).sum()
    }

    pub async fn metrics(&self) -> BTreeMap<String, u64> {
        let url = format!("{}/.well-known/fedgate/metrics", self.base_url());
        let body = match self.http.get(url).send().await {
            Ok(r) => r.text().await.unwrap_or_default(),
            Err(_) => String::new(),
        };
        metrics::parse(&body)
    }

    /// Wait until `n` health poll cycles that began after this call have
    /// completed.
    pub async fn wait_polls(&self, n: u64) {
        let health = self.gateway().health();
        let target = health.started() + n;
        while health.cycles() < target {
            tokio::time::sleep(Duration::from_millis(5)).await;
        }
    }

    pub async fn run_script(&self, text: &str) -> Result<ScriptReport, HarnessError> {
        let steps = parse_script(text)?;
        Ok(script::run(self, &steps).await)
    }

    pub async fn run_script_file(&self, path: &std::path::Path) -> Result<ScriptReport, HarnessError> {
        let text = std::fs::read_to_string(path)?;
        self.run_script(&text).await
    }

    /// Stop the gateway (draining requests) and every simulated endpoint.
    pub async fn teardown(mut self) {
        let _ = self.gateway.stop().await;
        for (_, s) in &self.sims {
            s.stop().await;
        }
    }
}
