//! Background reachability polling. The poller is the only writer of
//! endpoint status; everything else reads it.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use chrono::{DateTime, Utc};
use futures::future::join_all;
use serde::Serialize;
use tokio::sync::watch;
use tokio::time::{Instant, MissedTickBehavior};

use crate::endpoints::{Endpoint, EndpointStatus};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct HealthState {
    pub endpoint_id: String,
    pub status: EndpointStatus,
    pub consecutive_failures: u32,
    /// Time of the last status transition; `None` until the first one.
    pub last_change: Option<DateTime<Utc>>,
}

pub struct HealthMonitor {
    endpoints: Vec<Arc<Endpoint>>,
    probe_timeout: Duration,
    failure_threshold: u32,
    states: Mutex<Vec<HealthState>>,
    poll_lock: tokio::sync::Mutex<()>,
    started: AtomicU64,
    cycles: AtomicU64,
}

impl HealthMonitor {
    pub fn new(endpoints: Vec<Arc<Endpoint>>, probe_timeout: Duration, failure_threshold: u32) -> Self {
        let states = endpoints
            .iter()
            .map(|e| HealthState {
                endpoint_id: e.id().to_string(),
                status: e.status(),
                consecutive_failures: 0,
                last_change: None,
            })
            .collect();
        HealthMonitor {
            endpoints,
            probe_timeout,
            failure_threshold: failure_threshold.max(1),
            states: Mutex::new(states),
            poll_lock: tokio::sync::Mutex::new(()),
            started: AtomicU64::new(0),
            cycles: AtomicU64::new(0),
        }
    }

    pub fn states(&self) -> Vec<HealthState> {
        self.states.lock().unwrap().clone()
    }

    /// Completed poll cycles.
    pub fn cycles(&self) -> u64 {
        self.cycles.load(Ordering::Acquire)
    }

    /// Poll cycles begun. Cycles never overlap, so cycle `n` is complete
    /// once `cycles() >= n`.
    pub fn started(&self) -> u64 {
        self.started.load(Ordering::Acquire)
    }

    /// Probe every endpoint concurrently, each bounded by the probe timeout,
    /// and publish the resulting statuses.
    pub async fn poll_once(&self, now: DateTime<Utc>) -> Vec<HealthState> {
        let _writer = self.poll_lock.lock().await;
        self.started.fetch_add(1, Ordering::AcqRel);
        let deadline = Instant::now() + self.probe_timeout;
        let results = join_all(self.endpoints.iter().map(|e| e.probe(deadline))).await;
        let mut states = self.states.lock().unwrap();
        for ((ep, state), ok) in self.endpoints.iter().zip(states.iter_mut()).zip(results) {
            let next = if ok {
                state.consecutive_failures = 0;
                EndpointStatus::Online
            } else {
                state.consecutive_failures = state.consecutive_failures.saturating_add(1);
                if state.consecutive_failures >= self.failure_threshold {
                    EndpointStatus::Offline
                } else {
                    state.status
                }
            };
            if next != state.status {
                tracing::info!(endpoint = ep.id(), from = %state.status, to = %next, "endpoint status changed");
                state.status = next;
                state.last_change = Some(now);
            }
            ep.set_status(next);
            ep.record_poll(now);
        }
        self.cycles.fetch_add(1, Ordering::AcqRel);
        states.clone()
    }

    /// Poll immediately, then every `interval`, until `shutdown` turns true.
    pub async fn run_poller(self: Arc<Self>, interval: Duration, mut shutdown: watch::Receiver<bool>) {
        let mut ticker = tokio::time::interval(interval.max(Duration::from_millis(1)));
        ticker.set_missed_tick_behavior(MissedTickBehavior::Delay);
        loop {
            tokio::select! {
                _ = ticker.tick() => {}
                _ = shutdown.wait_for(|s| *s) => return,
            }
            tokio::select! {
                _ = self.poll_once(Utc::now()) => {}
                _ = shutdown.wait_for(|s| *s) => return,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{EndpointConfig, EndpointKind};
    use crate::endpoints::{EndpointClient, EndpointError, Listing, StatResult};
    use crate::geo::GeoPoint;
    use async_trait::async_trait;
    use http::Method;
    use std::sync::atomic::AtomicBool;
    use url::Url;

    #[derive(Debug, Default)]
    struct Switch {
        up: AtomicBool,
        hang: AtomicBool,
    }

    #[derive(Debug)]
    struct Probed(Arc<Switch>);

    #[async_trait]
    impl EndpointClient for Probed {
        async fn stat(&self, _: &str) -> Result<StatResult, EndpointError> {
            Ok(StatResult::absent())
        }
        async fn list(&self, _: &str) -> Result<Listing, EndpointError> {
            Ok(Listing::default())
        }
        async fn probe(&self) -> bool {
            if self.0.hang.load(Ordering::SeqCst) {
                std::future::pending::<()>().await;
            }
            self.0.up.load(Ordering::SeqCst)
        }
        async fn delete(&self, _: &str) -> Result<(), EndpointError> {
            Ok(())
        }
        fn redirect_url(&self, _: &str, _: &Method, _: Duration, _: DateTime<Utc>) -> Result<Url, EndpointError> {
            Err(EndpointError::NotFound)
        }
    }

    fn endpoint(id: &str) -> (Arc<Endpoint>, Arc<Switch>) {
        let switch = Arc::new(Switch::default());
        switch.up.store(true, Ordering::SeqCst);
        let cfg = EndpointConfig {
            id: id.into(),
            kind: EndpointKind::Webdav,
            base_url: Url::parse("http://127.0.0.1:1").unwrap(),
            federated_prefix: "/".into(),
            backend_prefix: "/".into(),
            location: GeoPoint::new(0.0, 0.0).unwrap(),
            writable: false,
            s3: None,
        };
        let ep = Endpoint::with_client(cfg, Box::new(Probed(switch.clone())), Default::default());
        (Arc::new(ep), switch)
    }

    #[tokio::test]
    async fn threshold_and_recovery() {
        let (a, sa) = endpoint("a");
        let (b, _) = endpoint("b");
        let mon = HealthMonitor::new(vec![a.clone(), b.clone()], Duration::from_millis(200), 2);
        assert_eq!(a.status(), EndpointStatus::Unknown);
        let t0 = Utc::now();
        mon.poll_once(t0).await;
        assert_eq!(a.status(), EndpointStatus::Online);
        assert_eq!(mon.states()[0].last_change, Some(t0));

        sa.up.store(false, Ordering::SeqCst);
        let s = mon.poll_once(Utc::now()).await;
        assert_eq!((s[0].status, s[0].consecutive_failures), (EndpointStatus::Online, 1));
        let s = mon.poll_once(Utc::now()).await;
        assert_eq!((s[0].status, s[0].consecutive_failures), (EndpointStatus::Offline, 2));
        assert_eq!(a.status(), EndpointStatus::Offline);
        assert_eq!(b.status(), EndpointStatus::Online);

        sa.up.store(true, Ordering::SeqCst);
        let s = mon.poll_once(Utc::now()).await;
        assert_eq!((s[0].status, s[0].consecutive_failures), (EndpointStatus::Online, 0));
    }

    #[tokio::test]
    async fn hung_probe_is_bounded_and_isolated() {
        let (a, sa) = endpoint("a");
        let (b, _) = endpoint("b");
        sa.hang.store(true, Ordering::SeqCst);
        let mon = HealthMonitor::new(vec![a.clone(), b.clone()], Duration::from_millis(100), 1);
        let started = std::time::Instant::now();
        mon.poll_once(Utc::now()).await;
        assert!(started.elapsed() < Duration::from_millis(500));
        assert_eq!(a.status(), EndpointStatus::Offline);
        assert_eq!(b.status(), EndpointStatus::Online);
    }

    #[tokio::test]
    async fn poller_runs_on_schedule_and_stops() {
        let (a, _) = endpoint("a");
        let mon = Arc::new(HealthMonitor::new(vec![a], Duration::from_millis(50), 2));
        let (tx, rx) = watch::channel(false);
        let task = tokio::spawn(mon.clone().run_poller(Duration::from_millis(40), rx));
        tokio::time::sleep(Duration::from_millis(190)).await;
        assert!((3..=7).contains(&mon.cycles()), "cycles = {}", mon.cycles());
        tx.send(true).unwrap();
        tokio::time::timeout(Duration::from_millis(100), task)
            .await
            .unwrap()
            .unwrap();
    }
}
