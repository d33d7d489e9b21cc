use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::sync::Arc;

use axum::body::Body;
use axum::extract::{ConnectInfo, Request, State};
use axum::response::Response;
use axum::Router;
use chrono::Utc;
use http::{header, HeaderMap, HeaderValue, Method, StatusCode};
use percent_encoding::percent_decode_str;
use serde::Serialize;

use super::{metrics, GatewayState, RequestContext, ADMIN_PREFIX};
use crate::authz::{authenticate, authorize, AuthError, Decision, OperationClass, TransportIdentity};
use crate::endpoints::xml::MultistatusWriter;
use crate::endpoints::EndpointStatus;
use crate::endpoints::DIRECTORY_CONTENT_TYPE;
use crate::geo::{rank, GeoPoint};
use crate::locator::{translate, ReplicaLocation, ReplicaSet};
use crate::path;

pub const SUBJECT_HEADER: &str = "x-fed-subject";
pub const ATTRIBUTES_HEADER: &str = "x-fed-attributes";
/// Ranked endpoint ids behind a redirect, nearest first.
pub const REPLICAS_HEADER: &str = "x-fed-replicas";
const ALLOW: &str = "OPTIONS, GET, HEAD, PUT, DELETE, PROPFIND";

pub(super) fn router(state: Arc<GatewayState>) -> Router {
    Router::new().fallback(handle).with_state(state)
}

async fn handle(State(state): State<Arc<GatewayState>>, req: Request) -> Response {
    let method = req.method().clone();
    let raw_path = req.uri().path().to_string();
    if let Some(resource) = raw_path.strip_prefix(ADMIN_PREFIX) {
        return admin(&state, &method, resource);
    }
    let peer = req
        .extensions()
        .get::<ConnectInfo<SocketAddr>>()
        .map(|c| c.0.ip())
        .unwrap_or(IpAddr::V4(Ipv4Addr::LOCALHOST));
    let response = federated(&state, method.clone(), &raw_path, req.headers(), peer).await;
    state.requests.record(method.as_str(), response.status().as_u16());
    tracing::debug!(%method, path = raw_path, status = response.status().as_u16(), "request");
    response
}

fn plain(status: StatusCode, text: impl Into<String>) -> Response {
    let mut text = text.into();
    if !text.ends_with('\n') {
        text.push('\n');
    }
    Response::builder()
        .status(status)
        .header(header::CONTENT_TYPE, "text/plain; charset=utf-8")
        .body(Body::from(text))
        .expect("static response parts")
}

fn admin(state: &GatewayState, method: &Method, what: &str) -> Response {
    if method != Method::GET && method != Method::HEAD {
        let mut r = plain(StatusCode::METHOD_NOT_ALLOWED, "method not allowed");
        r.headers_mut()
            .insert(header::ALLOW, HeaderValue::from_static("GET, HEAD"));
        return r;
    }
    match what {
        "healthz" => plain(StatusCode::OK, "ok"),
        "status" => {
            #[derive(Serialize)]
            struct Row<'a> {
                id: &'a str,
                kind: String,
                status: EndpointStatus,
                consecutive_failures: u32,
                last_change: Option<chrono::DateTime<Utc>>,
                last_poll: Option<chrono::DateTime<Utc>>,
            }
            let states = state.health.states();
            let rows: Vec<Row> = state
                .locator
                .endpoints()
                .iter()
                .zip(&states)
                .map(|(ep, h)| Row {
                    id: ep.id(),
                    kind: ep.config().kind.to_string(),
                    status: ep.status(),
                    consecutive_failures: h.consecutive_failures,
                    last_change: h.last_change,
                    last_poll: ep.last_poll(),
                })
                .collect();
            let body = serde_json::json!({ "poll_cycles": state.health.cycles(), "endpoints": rows });
            Response::builder()
                .header(header::CONTENT_TYPE, "application/json")
                .body(Body::from(body.to_string()))
                .expect("static response parts")
        }
        "metrics" => Response::builder()
            .header(header::CONTENT_TYPE, "text/plain; version=0.0.4")
            .body(Body::from(metrics::render(&state.requests, &state.locator)))
            .expect("static response parts"),
        _ => plain(StatusCode::NOT_FOUND, "no such admin resource"),
    }
}

fn client_ip(state: &GatewayState, headers: &HeaderMap, peer: IpAddr) -> IpAddr {
    if state.config.trust_forwarded_for {
        let first = headers
            .get("x-forwarded-for")
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.split(',').next())
            .and_then(|v| v.trim().parse().ok());
        if let Some(ip) = first {
            return ip;
        }
    }
    peer
}

fn transport_identity(state: &GatewayState, headers: &HeaderMap) -> TransportIdentity {
    let text = |name: &str| headers.get(name).and_then(|v| v.to_str().ok()).map(str::to_string);
    if state.config.insecure_header_auth {
        let attributes = text(ATTRIBUTES_HEADER)
            .map(|v| {
                v.split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(str::to_string)
                    .collect()
            })
            .unwrap_or_default();
        return TransportIdentity {
            subject: text(SUBJECT_HEADER),
            attributes,
        };
    }
    TransportIdentity {
        subject: state.config.subject_header.as_deref().and_then(text),
        attributes: Vec::new(),
    }
}

async fn federated(
    state: &GatewayState,
    method: Method,
    raw_path: &str,
    headers: &HeaderMap,
    peer: IpAddr,
) -> Response {
    let decoded = match percent_decode_str(raw_path).decode_utf8() {
        Ok(p) => p,
        Err(_) => return plain(StatusCode::BAD_REQUEST, "path is not UTF-8"),
    };
    let federated_path = match path::normalize(&decoded) {
        Ok(p) => p,
        Err(e) => return plain(StatusCode::BAD_REQUEST, e.to_string()),
    };
    if method == Method::OPTIONS {
        return Response::builder()
            .header(header::ALLOW, ALLOW)
            .header("DAV", "1")
            .body(Body::empty())
            .expect("static response parts");
    }
    let Some(op) = OperationClass::from_method(&method) else {
        let mut r = plain(StatusCode::METHOD_NOT_ALLOWED, "method not allowed");
        r.headers_mut().insert(header::ALLOW, HeaderValue::from_static(ALLOW));
        return r;
    };
    let identity = match authenticate(&transport_identity(state, headers), &state.registry) {
        Ok(id) => id,
        Err(AuthError::Unauthenticated) => return plain(StatusCode::UNAUTHORIZED, "credential required"),
        Err(e @ AuthError::Forbidden(_)) => return plain(StatusCode::FORBIDDEN, e.to_string()),
    };
    if authorize(&identity, op, &federated_path, &state.config.scratch_prefix) == Decision::Deny {
        return plain(
            StatusCode::FORBIDDEN,
            format!("{op:?} not permitted on {federated_path}"),
        );
    }
    let ctx = RequestContext {
        method,
        federated_path,
        client_ip: client_ip(state, headers, peer),
        identity,
        received_at: Utc::now(),
    };
    match ctx.method.as_str() {
        "GET" => get(state, &ctx).await,
        "HEAD" => head(state, &ctx).await,
        "PUT" => put(state, &ctx).await,
        "DELETE" => delete(state, &ctx).await,
        _ => {
            let depth = headers.get("depth").and_then(|v| v.to_str().ok()).map(str::trim);
            propfind(state, &ctx, depth).await
        }
    }
}

/// File replicas on eligible endpoints, nearest first.
pub(super) fn ranked<'a>(
    state: &GatewayState,
    set: &'a ReplicaSet,
    client: Option<GeoPoint>,
) -> Vec<&'a ReplicaLocation> {
    let candidates: Vec<(&str, GeoPoint)> = set
        .replicas
        .iter()
        .filter(|r| !r.is_directory)
        .filter_map(|r| {
            let ep = state.locator.endpoint(&r.endpoint_id)?;
            ep.status().is_eligible().then(|| (ep.id(), ep.config().location))
        })
        .collect();
    rank(&candidates, client)
        .into_iter()
        .filter_map(|id| set.replica(&id))
        .collect()
}

fn is_directory(state: &GatewayState, set: &ReplicaSet) -> bool {
    state.locator.is_virtual_directory(&set.federated_path) || set.replicas.iter().any(|r| r.is_directory)
}

fn absent(set: &ReplicaSet) -> Response {
    if set.complete {
        plain(StatusCode::NOT_FOUND, "not found")
    } else {
        plain(StatusCode::SERVICE_UNAVAILABLE, "no endpoint answered in time")
    }
}

fn redirect(
    state: &GatewayState,
    ctx: &RequestContext,
    status: StatusCode,
    ranked_ids: &[&str],
    endpoint_id: &str,
    backend_path: &str,
) -> Response {
    let Some(ep) = state.locator.endpoint(endpoint_id) else {
        return plain(StatusCode::INTERNAL_SERVER_ERROR, "unknown endpoint");
    };
    match ep.redirect_url(backend_path, &ctx.method, state.config.presign_expiry, ctx.received_at) {
        Ok(url) => Response::builder()
            .status(status)
            .header(header::LOCATION, url.as_str())
            .header(REPLICAS_HEADER, ranked_ids.join(","))
            .body(Body::empty())
            .expect("static response parts"),
        Err(e) => {
            tracing::error!(endpoint = endpoint_id, error = %e, "cannot build redirect");
            plain(StatusCode::INTERNAL_SERVER_ERROR, "cannot build redirect")
        }
    }
}

fn client_location(state: &GatewayState, ctx: &RequestContext) -> Option<GeoPoint> {
    state.geo.lookup(ctx.client_ip)
}

async fn get(state: &GatewayState, ctx: &RequestContext) -> Response {
    let set = state.locator.locate(&ctx.federated_path, ctx.received_at).await;
    let order = ranked(state, &set, client_location(state, ctx));
    let Some(best) = order.first() else {
        if is_directory(state, &set) {
            let mut r = plain(StatusCode::METHOD_NOT_ALLOWED, "collections are listed with PROPFIND");
            r.headers_mut()
                .insert(header::ALLOW, HeaderValue::from_static("OPTIONS, HEAD, PROPFIND"));
            return r;
        }
        return absent(&set);
    };
    let ids: Vec<&str> = order.iter().map(|r| r.endpoint_id.as_str()).collect();
    redirect(
        state,
        ctx,
        StatusCode::FOUND,
        &ids,
        &best.endpoint_id,
        &best.backend_path,
    )
}

async fn head(state: &GatewayState, ctx: &RequestContext) -> Response {
    let set = state.locator.locate(&ctx.federated_path, ctx.received_at).await;
    let order = ranked(state, &set, client_location(state, ctx));
    let builder = Response::builder().status(StatusCode::OK);
    match order.first() {
        Some(best) => {
            let mut builder = builder.header(REPLICAS_HEADER, best.endpoint_id.as_str());
            if let Some(size) = best.size {
                builder = builder.header(header::CONTENT_LENGTH, size);
            }
            builder.body(Body::empty()).expect("static response parts")
        }
        None if is_directory(state, &set) => builder
            .header(header::CONTENT_TYPE, DIRECTORY_CONTENT_TYPE)
            .body(Body::empty())
            .expect("static response parts"),
        None => absent(&set),
    }
}

async fn put(state: &GatewayState, ctx: &RequestContext) -> Response {
    let targets: Vec<(&str, GeoPoint, String)> = state
        .locator
        .endpoints()
        .iter()
        .filter(|ep| ep.config().writable && ep.status().is_eligible())
        .filter_map(|ep| {
            let backend = translate(&ctx.federated_path, ep.config())?;
            Some((ep.id(), ep.config().location, backend))
        })
        .collect();
    let pairs: Vec<(&str, GeoPoint)> = targets.iter().map(|(id, loc, _)| (*id, *loc)).collect();
    let order = rank(&pairs, client_location(state, ctx));
    let Some(best) = order.first() else {
        return plain(StatusCode::SERVICE_UNAVAILABLE, "no writable endpoint online");
    };
    let backend = &targets.iter().find(|t| t.0 == best).expect("ranked from targets").2;
    let ids: Vec<&str> = order.iter().map(String::as_str).collect();
    let response = redirect(state, ctx, StatusCode::TEMPORARY_REDIRECT, &ids, best, backend);
    state.locator.invalidate(&ctx.federated_path).await;
    response
}

async fn delete(state: &GatewayState, ctx: &RequestContext) -> Response {
    let set = state.locator.locate(&ctx.federated_path, ctx.received_at).await;
    let order = ranked(state, &set, client_location(state, ctx));
    let Some(best) = order.first() else {
        return absent(&set);
    };
    let ids: Vec<&str> = order.iter().map(|r| r.endpoint_id.as_str()).collect();
    let response = redirect(
        state,
        ctx,
        StatusCode::TEMPORARY_REDIRECT,
        &ids,
        &best.endpoint_id,
        &best.backend_path,
    );
    state.locator.invalidate(&ctx.federated_path).await;
    response
}

fn href(federated_path: &str, collection: bool) -> String {
    let mut h = path::encode_path(federated_path);
    if collection && !h.ends_with('/') {
        h.push('/');
    }
    h
}

async fn propfind(state: &GatewayState, ctx: &RequestContext, depth: Option<&str>) -> Response {
    let children = match depth {
        Some("0") => false,
        Some("1") => true,
        _ => return plain(StatusCode::FORBIDDEN, "Depth must be 0 or 1"),
    };
    let set = state.locator.locate(&ctx.federated_path, ctx.received_at).await;
    let mut doc = MultistatusWriter::new();
    if is_directory(state, &set) {
        doc.resource(&href(&ctx.federated_path, true), true, None, None);
        if children {
            let listing = state.locator.merged_listing(&ctx.federated_path, ctx.received_at).await;
            for e in &listing.entries {
                let child = path::join_child(&ctx.federated_path, &e.name);
                doc.resource(&href(&child, e.is_directory), e.is_directory, e.size, None);
            }
        }
    } else {
        let order = ranked(state, &set, client_location(state, ctx));
        let Some(best) = order.first() else {
            return absent(&set);
        };
        doc.resource(&href(&ctx.federated_path, false), false, best.size, None);
    }
    Response::builder()
        .status(StatusCode::MULTI_STATUS)
        .header(header::CONTENT_TYPE, "text/xml; charset=\"utf-8\"")
        .body(Body::from(doc.finish()))
        .expect("static response parts")
}
