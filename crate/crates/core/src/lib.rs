//! A dynamic storage federation gateway.
//!
//! Many WebDAV and S3 storage endpoints are presented to clients as a single
//! virtual namespace. Each request is resolved live: the replica locations of
//! a path are looked up in a two-level cache or, on a miss, by querying every
//! covering endpoint in parallel under a deadline. Clients are then redirected
//! to the closest live replica, with S3 locations turned into short-lived
//! pre-signed URLs.
//!
//! Layering, from the client inwards:
//!
//! - [`gateway`]: HTTP/WebDAV front (GET, HEAD, PROPFIND, PUT, DELETE).
//! - [`authz`]: identity and per-operation grants.
//! - [`locator`]: replica resolution, L1/L2 caching, merged directory listings.
//! - [`geo`]: GeoIP lookup and great-circle ranking.
//! - [`endpoints`]: per-protocol endpoint clients, [`signer`] for S3 URLs.
//! - [`health`]: background reachability polling.
//!
//! [`sim`] and [`harness`] provide in-process simulated endpoints and a
//! federation-in-a-box used by the test suites.

pub mod authz;
pub mod config;
pub mod endpoints;
pub mod gateway;
pub mod geo;
pub mod harness;
pub mod health;
pub mod locator;
pub mod signer;
pub mod sim;

mod path;

pub use config::{load_config, validate_prefix, EndpointConfig, EndpointKind, FederationConfig};
pub use path::PathError;
