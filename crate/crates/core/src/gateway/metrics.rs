use std::collections::BTreeMap;
use std::fmt::Write;
use std::sync::atomic::Ordering;
use std::sync::Mutex;

use crate::endpoints::EndpointStatus;
use crate::locator::Locator;

/// Request tallies by method and status code.
#[derive(Debug, Default)]
pub struct RequestMetrics {
    by_method_status: Mutex<BTreeMap<(String, u16), u64>>,
}

impl RequestMetrics {
    pub fn record(&self, method: &str, status: u16) {
        *self
            .by_method_status
            .lock()
            .unwrap()
            .entry((method.to_string(), status))
            .or_default() += 1;
    }

    pub fn count(&self, method: &str, status: u16) -> u64 {
        self.by_method_status
            .lock()
            .unwrap()
            .get(&(method.to_string(), status))
            .copied()
            .unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.by_method_status.lock().unwrap().values().sum()
    }
}

/// One `name{labels} value` line per sample, sorted within each family.
pub(crate) fn render(requests: &RequestMetrics, locator: &Locator) -> String {
    let mut out = String::new();
    for ((method, status), n) in requests.by_method_status.lock().unwrap().iter() {
        let _ = writeln!(
            out,
            "fedgate_requests_total{{method=\"{method}\",status=\"{status}\"}} {n}"
        );
    }
    let c = locator.counters();
    let load = |a: &std::sync::atomic::AtomicU64| a.load(Ordering::Relaxed);
    let _ = writeln!(out, "fedgate_cache_hits_total {}", c.hits());
    let _ = writeln!(out, "fedgate_cache_l1_hits_total {}", load(&c.l1_hits));
    let _ = writeln!(out, "fedgate_cache_l2_hits_total {}", load(&c.l2_hits));
    let _ = writeln!(out, "fedgate_cache_misses_total {}", load(&c.misses));
    let _ = writeln!(out, "fedgate_cache_coalesced_total {}", load(&c.coalesced));
    let _ = writeln!(out, "fedgate_cache_l2_errors_total {}", load(&c.l2_errors));
    let _ = writeln!(out, "fedgate_fanouts_total {}", load(&c.fanouts));
    for ep in locator.endpoints() {
        let s = ep.counters().snapshot();
        let id = ep.id();
        let _ = writeln!(out, "fedgate_endpoint_queries_total{{endpoint=\"{id}\"}} {}", s.queries);
        let _ = writeln!(
            out,
            "fedgate_endpoint_requests_total{{endpoint=\"{id}\"}} {}",
            s.requests
        );
        let _ = writeln!(
            out,
            "fedgate_endpoint_timeouts_total{{endpoint=\"{id}\"}} {}",
            s.timeouts
        );
        let _ = writeln!(out, "fedgate_endpoint_errors_total{{endpoint=\"{id}\"}} {}", s.errors);
        let _ = writeln!(out, "fedgate_endpoint_probes_total{{endpoint=\"{id}\"}} {}", s.probes);
        let up = u8::from(ep.status() != EndpointStatus::Offline);
        let _ = writeln!(out, "fedgate_endpoint_up{{endpoint=\"{id}\"}} {up}");
    }
    out
}

/// Parse an exposition body back into `(name with labels, value)` pairs.
pub fn parse(body: &str) -> BTreeMap<String, u64> {
    body.lines()
        .filter(|l| !l.starts_with('#'))
        .filter_map(|l| {
            let (name, value) = l.rsplit_once(' ')?;
            Some((name.to_string(), value.parse().ok()?))
        })
        .collect()
}
