//! Client-facing HTTP/WebDAV front.
//!
//! Every federated request runs authenticate, authorize, locate, rank and
//! redirect in that order; a denial stops the chain before any endpoint
//! is contacted. Object bytes never pass through the gateway.
//!
//! Administrative resources live outside the namespace under
//! `/.well-known/fedgate/`: `healthz`, `status` (JSON) and `metrics`.

mod handlers;
pub mod metrics;

use std::net::{IpAddr, SocketAddr};
use std::sync::Arc;

use axum::Router;
use chrono::{DateTime, Utc};
use http::Method;
use tokio::net::TcpListener;
use tokio::sync::watch;
use tokio::task::JoinHandle;

use crate::authz::{ClientIdentity, MembershipRegistry};
use crate::config::{ConfigError, FederationConfig, L2Config};
use crate::endpoints::{http_client, Endpoint, EndpointError};
use crate::geo::{GeoDatabase, GeoError};
use crate::health::HealthMonitor;
use crate::locator::{L2Cache, Locator, MemcachedL2, MemoryL2, ReplicaSet};

pub use handlers::{ATTRIBUTES_HEADER, REPLICAS_HEADER, SUBJECT_HEADER};
pub use metrics::RequestMetrics;

/// Reserved path prefix for the administrative resources.
pub const ADMIN_PREFIX: &str = "/.well-known/fedgate/";

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("geo database: {0}")]
    Geo(#[from] GeoError),
    #[error("membership files: {0}")]
    Members(std::io::Error),
    #[error("endpoint {id}: {source}")]
    Endpoint { id: String, source: EndpointError },
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: String, source: std::io::Error },
    #[error("server: {0}")]
    Serve(std::io::Error),
}

/// Everything a request handler may touch. Only endpoint status and the
/// caches change after construction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RequestContext {
    pub method: Method,
    pub federated_path: String,
    pub client_ip: IpAddr,
    pub identity: ClientIdentity,
    pub received_at: DateTime<Utc>,
}

pub struct GatewayState {
    config: FederationConfig,
    locator: Arc<Locator>,
    health: Arc<HealthMonitor>,
    geo: GeoDatabase,
    registry: MembershipRegistry,
    requests: RequestMetrics,
}

/// A configured gateway, not yet listening.
#[derive(Clone)]
pub struct Gateway {
    state: Arc<GatewayState>,
}

impl Gateway {
    /// Build from configuration; the L2 cache is taken from `config.l2`.
    pub fn new(config: FederationConfig) -> Result<Self, GatewayError> {
        let l2: Option<Arc<dyn L2Cache>> = match &config.l2 {
            L2Config::None => None,
            L2Config::Memory => Some(Arc::new(MemoryL2::new())),
            L2Config::Memcached(addr) => Some(Arc::new(MemcachedL2::new(addr.clone()))),
        };
        Self::with_l2(config, l2)
    }

    /// Build with an explicit L2, e.g. one [`MemoryL2`] shared by several
    /// gateways in one process.
    pub fn with_l2(config: FederationConfig, l2: Option<Arc<dyn L2Cache>>) -> Result<Self, GatewayError> {
        config.validate()?;
        let geo = match &config.geo_db_path {
            Some(p) => GeoDatabase::load(p)?,
            None => GeoDatabase::new(),
        };
        let registry = MembershipRegistry::load(
            config.members_path.as_deref(),
            config.privileged_path.as_deref(),
            &config.required_attribute_prefix,
        )
        .map_err(GatewayError::Members)?;
        let http = http_client();
        let endpoints = config
            .endpoints
            .iter()
            .map(|c| {
                Endpoint::new(c.clone(), http.clone())
                    .map(Arc::new)
                    .map_err(|source| GatewayError::Endpoint {
                        id: c.id.clone(),
                        source,
                    })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let locator = Arc::new(Locator::new(endpoints.clone(), &config, l2));
        let health = Arc::new(HealthMonitor::new(
            endpoints,
            config.probe_timeout,
            config.failure_threshold,
        ));
        Ok(Gateway {
            state: Arc::new(GatewayState {
                config,
                locator,
                health,
                geo,
                registry,
                requests: RequestMetrics::default(),
            }),
        })
    }

    pub fn config(&self) -> &FederationConfig {
        &self.state.config
    }

    pub fn locator(&self) -> &Arc<Locator> {
        &self.state.locator
    }

    pub fn health(&self) -> &Arc<HealthMonitor> {
        &self.state.health
    }

    pub fn requests(&self) -> &RequestMetrics {
        &self.state.requests
    }

    pub fn geo(&self) -> &GeoDatabase {
        &self.state.geo
    }

    /// The HTTP application. Peer addresses are read from
    /// `ConnectInfo<SocketAddr>` when the server provides it.
    pub fn router(&self) -> Router {
        handlers::router(self.state.clone())
    }

    /// Replica set of `path` with file replicas on eligible endpoints only,
    /// ranked nearest first from `client_ip`. No authorization; operator
    /// tool.
    pub async fn resolve(&self, path: &str, client_ip: Option<IpAddr>) -> Result<ReplicaSet, crate::PathError> {
        let path = crate::path::normalize(path)?;
        let mut set = self.state.locator.locate(&path, Utc::now()).await;
        let client = client_ip.and_then(|ip| self.state.geo.lookup(ip));
        set.replicas = handlers::ranked(&self.state, &set, client)
            .into_iter()
            .cloned()
            .collect();
        Ok(set)
    }

    /// Serve on an already bound listener in a background task, together
    /// with the health poller.
    pub fn start(self, listener: TcpListener) -> std::io::Result<RunningGateway> {
        let addr = listener.local_addr()?;
        let (stop, stop_rx) = watch::channel(false);
        let poller = tokio::spawn(
            self.state
                .health
                .clone()
                .run_poller(self.state.config.health_poll_interval, stop_rx.clone()),
        );
        let app = self.router().into_make_service_with_connect_info::<SocketAddr>();
        let mut server_stop = stop_rx;
        let server = tokio::spawn(async move {
            let result = axum::serve(listener, app)
                .with_graceful_shutdown(async move {
                    let _ = server_stop.wait_for(|s| *s).await;
                })
                .await;
            let _ = poller.await;
            result
        });
        Ok(RunningGateway {
            addr,
            gateway: self,
            stop,
            server: Some(server),
        })
    }

    /// Bind `listen_address` and serve until `shutdown` resolves, then
    /// drain in-flight requests.
    pub async fn serve(self, shutdown: impl std::future::Future<Output = ()>) -> Result<(), GatewayError> {
        let addr = self.state.config.listen_address.clone();
        let listener = TcpListener::bind(&addr).await.map_err(|source| GatewayError::Bind {
            addr: addr.clone(),
            source,
        })?;
        tracing::info!(address = %listener.local_addr().map_err(GatewayError::Serve)?, "listening");
        let mut running = self.start(listener).map_err(GatewayError::Serve)?;
        shutdown.await;
        tracing::info!("shutting down");
        running.stop().await.map_err(GatewayError::Serve)
    }
}

/// A gateway serving in the background.
pub struct RunningGateway {
    addr: SocketAddr,
    gateway: Gateway,
    stop: watch::Sender<bool>,
    server: Option<JoinHandle<std::io::Result<()>>>,
}

impl RunningGateway {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn gateway(&self) -> &Gateway {
        &self.gateway
    }

    /// Stop accepting, drain in-flight requests, stop the poller.
    pub async fn stop(&mut self) -> std::io::Result<()> {
        let _ = self.stop.send(true);
        match self.server.take() {
            Some(task) => task.await.unwrap_or_else(|e| Err(std::io::Error::other(e))),
            None => Ok(()),
        }
    }
}

impl Drop for RunningGateway {
    fn drop(&mut self) {
        let _ = self.stop.send(true);
        if let Some(task) = self.server.take() {
            task.abort();
        }
    }
}
