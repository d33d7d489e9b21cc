use std::collections::BTreeMap;
use std::sync::atomic::Ordering;
use std::sync::Arc;
use std::time::Duration;

use chrono::{SubsecRound, Utc};
use fedgate::endpoints::{http_client, Endpoint, EndpointStatus};
use fedgate::geo::GeoPoint;
use fedgate::locator::{L2Cache, Locator, MemoryL2};
use fedgate::signer::SigningKey;
use fedgate::sim::SimEndpoint;
use fedgate::FederationConfig;

struct Setup {
    sims: Vec<SimEndpoint>,
    locator: Arc<Locator>,
}

impl Setup {
    async fn new(l2: Option<Arc<dyn L2Cache>>) -> Self {
        Self::with_config(l2, |_| {}).await
    }

    async fn with_config(l2: Option<Arc<dyn L2Cache>>, tweak: impl FnOnce(&mut FederationConfig)) -> Self {
        let a = SimEndpoint::start_webdav().await.unwrap();
        let b = SimEndpoint::start_s3("b", SigningKey::new("AK", "sk", "r").unwrap())
            .await
            .unwrap();
        let c = SimEndpoint::start_webdav().await.unwrap();
        let here = GeoPoint::new(0.0, 0.0).unwrap();
        let configs = vec![
            a.endpoint_config("a", "/", "/", here, true),
            b.endpoint_config("b", "/", "/srv", here, true),
            c.endpoint_config("c", "/group", "/", here, true),
        ];
        let mut config = FederationConfig::with_endpoints(configs.clone());
        tweak(&mut config);
        let http = http_client();
        let endpoints = configs
            .into_iter()
            .map(|c| Arc::new(Endpoint::new(c, http.clone()).unwrap()))
            .collect();
        Setup {
            locator: Arc::new(Locator::new(endpoints, &config, l2)),
            sims: vec![a, b, c],
        }
    }

    fn queries(&self) -> u64 {
        self.sims.iter().map(|s| s.counters().queries()).sum()
    }

    fn endpoint_queries(&self) -> u64 {
        self.locator
            .endpoints()
            .iter()
            .map(|e| e.counters().snapshot().queries)
            .sum()
    }
}

#[tokio::test]
async fn translation_applies_per_endpoint_prefixes() {
    let s = Setup::new(None).await;
    s.sims[0].store().put("/group/f", &b"1"[..]);
    s.sims[1].store().put("/srv/group/f", &b"22"[..]);
    s.sims[2].store().put("/f", &b"333"[..]);
    let set = s.locator.locate("/group/f", Utc::now()).await;
    assert!(set.complete);
    let got: BTreeMap<_, _> = set
        .replicas
        .iter()
        .map(|r| (r.endpoint_id.as_str(), (r.backend_path.as_str(), r.size)))
        .collect();
    assert_eq!(
        got,
        BTreeMap::from([
            ("a", ("/group/f", Some(1))),
            ("b", ("/srv/group/f", Some(2))),
            ("c", ("/f", Some(3))),
        ])
    );
    // c does not cover /other, so it is not asked.
    let before = s.sims[2].counters().queries();
    let _ = s.locator.locate("/other", Utc::now()).await;
    assert_eq!(s.sims[2].counters().queries(), before);
}

#[tokio::test]
async fn a_hit_within_ttl_costs_no_queries() {
    let s = Setup::new(None).await;
    s.sims[0].store().put("/x", &b"1"[..]);
    let now = Utc::now();
    let first = s.locator.locate("/x", now).await;
    let q = s.queries();
    assert!(q > 0);
    let second = s.locator.locate("/x", now + chrono::Duration::seconds(1)).await;
    assert_eq!(s.queries(), q);
    assert_eq!(first.replicas, second.replicas);
    assert_eq!(s.locator.counters().l1_hits.load(Ordering::SeqCst), 1);
}

#[tokio::test]
async fn expiry_and_invalidate_each_cost_one_burst() {
    let s = Setup::new(None).await;
    s.sims[1].store().put("/srv/d/x", &b"1"[..]);
    let now = Utc::now();
    let _ = s.locator.locate("/d/x", now).await;
    let per_burst = s.endpoint_queries();
    assert_eq!(per_burst, 2, "a and b cover /d/x");

    let later = now + chrono::Duration::seconds(301);
    let _ = s.locator.locate("/d/x", later).await;
    assert_eq!(s.endpoint_queries(), 2 * per_burst);
    let _ = s.locator.locate("/d/x", later).await;
    assert_eq!(s.endpoint_queries(), 2 * per_burst);

    // Invalidating a child also drops the parent's cached listing.
    let _ = s.locator.merged_listing("/d", later).await;
    s.locator.invalidate("/d/x").await;
    assert!(s.locator.peek_l1("/d/x").is_none());
    let before = s.endpoint_queries();
    let _ = s.locator.merged_listing("/d", later).await;
    let _ = s.locator.locate("/d/x", later).await;
    assert_eq!(s.endpoint_queries(), before + 2 * per_burst);
    assert_eq!(s.locator.counters().fanouts.load(Ordering::SeqCst), 5);
}

#[tokio::test]
async fn concurrent_misses_share_one_fan_out() {
    let s = Setup::new(None).await;
    s.sims[0].store().put("/hot", &b"1"[..]);
    for sim in &s.sims {
        sim.set_latency(Duration::from_millis(100));
    }
    let now = Utc::now();
    let tasks: Vec<_> = (0..50)
        .map(|_| {
            let l = s.locator.clone();
            tokio::spawn(async move { l.locate("/hot", now).await })
        })
        .collect();
    for t in tasks {
        assert_eq!(t.await.unwrap().replicas.len(), 1);
    }
    let c = s.locator.counters();
    assert_eq!(c.fanouts.load(Ordering::SeqCst), 1);
    assert_eq!(c.misses.load(Ordering::SeqCst), 1);
    assert_eq!(s.endpoint_queries(), 2);
    assert_eq!(
        c.coalesced.load(Ordering::SeqCst) + c.l1_hits.load(Ordering::SeqCst),
        49
    );
}

#[tokio::test]
async fn l1_and_l2_hold_the_same_entry() {
    let l2 = Arc::new(MemoryL2::new());
    let s = Setup::new(Some(l2.clone())).await;
    s.sims[0].store().put("/y", &b"12"[..]);
    let now = Utc::now();
    let set = s.locator.locate("/y", now).await;
    let l1 = s.locator.peek_l1("/y").unwrap();
    let l2e = s.locator.peek_l2("/y").await.unwrap();
    assert_eq!(l1, l2e);
    assert_eq!(l1.replica_set, set);
    assert!(!l1.negative);

    // A second locator sharing the L2 answers without touching endpoints
    // and backfills its own L1.
    let other = Setup::new(Some(l2.clone())).await;
    let _ = other.locator.locate("/y", now).await;
    assert_eq!(other.queries(), 0);
    assert_eq!(other.locator.counters().l2_hits.load(Ordering::SeqCst), 1);
    assert!(other.locator.peek_l1("/y").is_some());

    s.locator.invalidate("/y").await;
    assert!(s.locator.peek_l2("/y").await.is_none());
}

#[tokio::test]
async fn offline_endpoints_are_skipped_and_make_results_incomplete() {
    let s = Setup::with_config(None, |c| c.cache_ttl_negative = Duration::from_secs(5)).await;
    s.sims[0].store().put("/z", &b"1"[..]);
    s.sims[1].store().put("/srv/z", &b"1"[..]);
    s.locator.endpoint("a").unwrap().set_status(EndpointStatus::Offline);
    let now = Utc::now().trunc_subsecs(3);
    let set = s.locator.locate("/z", now).await;
    assert_eq!(s.sims[0].counters().queries(), 0);
    assert_eq!(set.endpoint_ids(), vec!["b"]);
    assert!(!set.complete);
    let entry = s.locator.peek_l1("/z").unwrap();
    assert_eq!(entry.expires_at, now + chrono::Duration::seconds(5));

    // A cached replica on an endpoint that goes offline is hidden.
    s.locator.endpoint("a").unwrap().set_status(EndpointStatus::Online);
    let set = s.locator.locate("/z", now + chrono::Duration::seconds(6)).await;
    assert_eq!(set.endpoint_ids(), vec!["a", "b"]);
    s.locator.endpoint("b").unwrap().set_status(EndpointStatus::Offline);
    let set = s.locator.locate("/z", now + chrono::Duration::seconds(7)).await;
    assert_eq!(set.endpoint_ids(), vec!["a"]);
    assert!(!set.complete);
}

#[tokio::test]
async fn a_hung_endpoint_does_not_hold_the_answer() {
    let s = Setup::with_config(None, |c| c.fanout_timeout = Duration::from_millis(300)).await;
    s.sims[0].store().put("/h", &b"1"[..]);
    s.sims[1].store().put("/srv/h", &b"1"[..]);
    s.sims[1].set_latency(Duration::from_secs(10));
    let start = std::time::Instant::now();
    let set = s.locator.locate("/h", Utc::now()).await;
    assert!(start.elapsed() < Duration::from_millis(600), "{:?}", start.elapsed());
    assert_eq!(set.endpoint_ids(), vec!["a"]);
    assert!(!set.complete);
}

#[tokio::test]
async fn merged_listing_is_the_union() {
    let s = Setup::new(None).await;
    s.sims[0].store().put("/group/a", &b"1"[..]);
    s.sims[0].store().put("/group/d/x", &b"1"[..]);
    s.sims[1].store().put("/srv/group/b", &b"22"[..]);
    s.sims[1].store().put("/srv/group/a", &b"999"[..]);
    s.sims[2].store().put("/c", &b"333"[..]);
    s.sims[2].store().put("/d", &b"4444"[..]);
    let listing = s.locator.merged_listing("/group", Utc::now()).await;
    assert!(listing.found && listing.complete);
    let got: Vec<_> = listing
        .entries
        .iter()
        .map(|e| (e.name.as_str(), e.is_directory, e.size))
        .collect();
    // "d" is a directory on a and a file on c: directory wins; "a" keeps
    // the size reported by the lowest endpoint id.
    assert_eq!(
        got,
        vec![
            ("a", false, Some(1)),
            ("b", false, Some(2)),
            ("c", false, Some(3)),
            ("d", true, None),
        ]
    );
    let root = s.locator.merged_listing("/", Utc::now()).await;
    assert!(root.entries.iter().any(|e| e.name == "group" && e.is_directory));
    let missing = s.locator.merged_listing("/nothing", Utc::now()).await;
    assert!(!missing.found && missing.complete);
}
