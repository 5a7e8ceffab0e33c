//! Multi-cloud load balancer: a versioned routing table, round-robin
//! dispatch over healthy instances, pull-probe health detection and
//! arrival-rate measurement.

use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::fabric::NodeId;
use crate::telemetry::DEFAULT_REQUEST_TIMEOUT_MS;
use crate::SimTime;

pub const DEFAULT_DETECTION_BUDGET: Duration = Duration::from_millis(300);
/// Consecutive missed probes before an instance is marked unhealthy.
pub const MISSES_TO_FAIL: u32 = 3;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BalancerError {
    #[error("unknown application `{0}`")]
    UnknownApplication(String),
    #[error("unknown instance `{0}`")]
    UnknownInstance(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RouteEntry {
    pub instance: String,
    pub node: NodeId,
    pub provider: String,
    pub healthy: bool,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RoutingTable {
    version: u64,
    entries: BTreeMap<String, Vec<RouteEntry>>,
    cursors: BTreeMap<String, usize>,
}

impl RoutingTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn entries(&self, route: &str) -> Option<&[RouteEntry]> {
        self.entries.get(route).map(Vec::as_slice)
    }

    pub fn routes(&self) -> impl Iterator<Item = (&String, &Vec<RouteEntry>)> {
        self.entries.iter()
    }

    pub fn healthy_count(&self, route: &str) -> usize {
        self.entries
            .get(route)
            .map_or(0, |e| e.iter().filter(|x| x.healthy).count())
    }

    /// Declares a route with no instances yet.
    pub fn ensure_route(&mut self, route: &str) {
        self.entries.entry(route.to_string()).or_default();
    }

    pub fn register(&mut self, route: &str, entry: RouteEntry) -> u64 {
        let list = self.entries.entry(route.to_string()).or_default();
        list.retain(|e| e.instance != entry.instance);
        list.push(entry);
        self.version += 1;
        self.version
    }

    pub fn deregister(&mut self, instance: &str) -> Result<u64, BalancerError> {
        let mut found = false;
        for list in self.entries.values_mut() {
            let before = list.len();
            list.retain(|e| e.instance != instance);
            found |= list.len() != before;
        }
        if !found {
            return Err(BalancerError::UnknownInstance(instance.to_string()));
        }
        self.version += 1;
        Ok(self.version)
    }

    /// Sets an instance's health flag. Every call bumps the version, even
    /// when the flag does not change.
    pub fn mark_health(&mut self, instance: &str, healthy: bool) -> Result<u64, BalancerError> {
        let entry = self
            .entries
            .values_mut()
            .flat_map(|l| l.iter_mut())
            .find(|e| e.instance == instance)
            .ok_or_else(|| BalancerError::UnknownInstance(instance.to_string()))?;
        entry.healthy = healthy;
        self.version += 1;
        Ok(self.version)
    }

    pub fn find(&self, instance: &str) -> Option<&RouteEntry> {
        self.entries
            .values()
            .flatten()
            .find(|e| e.instance == instance)
    }

    /// Next healthy entry in round-robin order.
    pub fn pick(&mut self, route: &str) -> Result<Option<RouteEntry>, BalancerError> {
        let list = self
            .entries
            .get(route)
            .ok_or_else(|| BalancerError::UnknownApplication(route.to_string()))?;
        let healthy: Vec<&RouteEntry> = list.iter().filter(|e| e.healthy).collect();
        if healthy.is_empty() {
            return Ok(None);
        }
        let cursor = self.cursors.entry(route.to_string()).or_insert(0);
        let chosen = healthy[*cursor % healthy.len()].clone();
        *cursor = cursor.wrapping_add(1);
        Ok(Some(chosen))
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RequestStatus {
    Ok,
    Timeout,
    NoBackend,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestOutcome {
    pub request_id: u64,
    pub application: String,
    pub instance: Option<String>,
    pub at: SimTime,
    pub latency_ms: f64,
    pub status: RequestStatus,
    /// Table version the dispatch read.
    pub version: u64,
}

/// Whatever actually executes requests behind the balancer.
pub trait Backend {
    /// Latency of serving a request on `entry`, or `None` when the instance
    /// does not answer at all.
    fn serve(&mut self, entry: &RouteEntry, at: SimTime) -> Option<f64>;
}

/// Transitions found by a probe round.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HealthChange {
    pub instance: String,
    pub healthy: bool,
    pub version: u64,
}

#[derive(Debug, Clone)]
pub struct LoadBalancer {
    pub table: RoutingTable,
    timeout_ms: f64,
    detection_budget: Duration,
    misses: BTreeMap<String, u32>,
    arrivals: BTreeMap<String, Vec<SimTime>>,
}

impl Default for LoadBalancer {
    fn default() -> Self {
        Self::new(DEFAULT_REQUEST_TIMEOUT_MS, DEFAULT_DETECTION_BUDGET)
    }
}

impl LoadBalancer {
    pub fn new(timeout_ms: f64, detection_budget: Duration) -> Self {
        LoadBalancer {
            table: RoutingTable::new(),
            timeout_ms,
            detection_budget,
            misses: BTreeMap::new(),
            arrivals: BTreeMap::new(),
        }
    }

    pub fn timeout_ms(&self) -> f64 {
        self.timeout_ms
    }

    /// Probe period: a failure is confirmed after [`MISSES_TO_FAIL`]
    /// periods, which fits inside the detection budget.
    pub fn probe_period(&self) -> Duration {
        self.detection_budget / MISSES_TO_FAIL
    }

    pub fn detection_budget(&self) -> Duration {
        self.detection_budget
    }

    /// Routes one request round-robin among healthy instances.
    pub fn dispatch(
        &mut self,
        application: &str,
        request_id: u64,
        at: SimTime,
        backend: &mut impl Backend,
    ) -> Result<RequestOutcome, BalancerError> {
        let entry = self.table.pick(application)?;
        self.arrivals
            .entry(application.to_string())
            .or_default()
            .push(at);
        let version = self.table.version();
        let (instance, latency_ms, status) = match entry {
            None => (None, 0.0, RequestStatus::NoBackend),
            Some(e) => {
                let latency = backend.serve(&e, at).unwrap_or(self.timeout_ms);
                let status = if latency >= self.timeout_ms {
                    RequestStatus::Timeout
                } else {
                    RequestStatus::Ok
                };
                (Some(e.instance), latency.min(self.timeout_ms), status)
            }
        };
        Ok(RequestOutcome {
            request_id,
            application: application.to_string(),
            instance,
            at,
            latency_ms,
            status,
            version,
        })
    }

    pub fn mark_health(&mut self, instance: &str, healthy: bool) -> Result<u64, BalancerError> {
        self.misses.remove(instance);
        self.table.mark_health(instance, healthy)
    }

    /// One pull-probe round over every registered instance.
    pub fn probe(&mut self, mut reachable: impl FnMut(NodeId) -> bool) -> Vec<HealthChange> {
        let targets: Vec<(String, NodeId, bool)> = self
            .table
            .routes()
            .flat_map(|(_, l)| l.iter().map(|e| (e.instance.clone(), e.node, e.healthy)))
            .collect();
        let mut changes = Vec::new();
        for (instance, node, healthy) in targets {
            if reachable(node) {
                self.misses.remove(&instance);
                if !healthy {
                    let version = self.table.mark_health(&instance, true).expect("registered");
                    changes.push(HealthChange {
                        instance,
                        healthy: true,
                        version,
                    });
                }
            } else {
                let misses = self.misses.entry(instance.clone()).or_insert(0);
                *misses += 1;
                if *misses >= MISSES_TO_FAIL && healthy {
                    let version = self
                        .table
                        .mark_health(&instance, false)
                        .expect("registered");
                    changes.push(HealthChange {
                        instance,
                        healthy: false,
                        version,
                    });
                }
            }
        }
        changes
    }

    /// Requests dispatched in `[from, to)`, per second.
    pub fn connection_rate(&self, application: &str, from: SimTime, to: SimTime) -> f64 {
        let window = (to - from).as_secs_f64();
        if window <= 0.0 {
            return 0.0;
        }
        let Some(arrivals) = self.arrivals.get(application) else {
            return 0.0;
        };
        let lo = arrivals.partition_point(|t| *t < from);
        let hi = arrivals.partition_point(|t| *t < to);
        (hi - lo) as f64 / window
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    struct Fixed {
        latency: f64,
        down: BTreeSet<String>,
    }

    impl Backend for Fixed {
        fn serve(&mut self, entry: &RouteEntry, _at: SimTime) -> Option<f64> {
            (!self.down.contains(&entry.instance)).then_some(self.latency)
        }
    }

    fn backend(latency: f64) -> Fixed {
        Fixed {
            latency,
            down: BTreeSet::new(),
        }
    }

    fn entry(i: u32) -> RouteEntry {
        RouteEntry {
            instance: format!("app/web/{i}"),
            node: NodeId(i),
            provider: "p".into(),
            healthy: true,
        }
    }

    fn lb_with(n: u32) -> LoadBalancer {
        let mut lb = LoadBalancer::default();
        for i in 1..=n {
            lb.table.register("app", entry(i));
        }
        lb
    }

    #[test]
    fn round_robin_alternates() {
        let mut lb = lb_with(2);
        let picks: Vec<_> = (0..4)
            .map(|r| {
                lb.dispatch("app", r, SimTime::ZERO, &mut backend(1.0))
                    .unwrap()
                    .instance
                    .unwrap()
            })
            .collect();
        assert_eq!(picks, ["app/web/1", "app/web/2", "app/web/1", "app/web/2"]);
    }

    #[test]
    fn saturated_instance_times_out() {
        let mut lb = lb_with(1);
        let out = lb
            .dispatch("app", 0, SimTime::ZERO, &mut backend(6_000.0))
            .unwrap();
        assert_eq!(out.status, RequestStatus::Timeout);
        assert!(out.latency_ms >= lb.timeout_ms());
    }

    #[test]
    fn no_healthy_instance_means_no_backend() {
        let mut lb = lb_with(2);
        lb.mark_health("app/web/1", false).unwrap();
        lb.mark_health("app/web/2", false).unwrap();
        let out = lb
            .dispatch("app", 0, SimTime::ZERO, &mut backend(1.0))
            .unwrap();
        assert_eq!((out.status, out.instance), (RequestStatus::NoBackend, None));
        assert_eq!(
            lb.dispatch("other", 0, SimTime::ZERO, &mut backend(1.0)),
            Err(BalancerError::UnknownApplication("other".into()))
        );
    }

    #[test]
    fn mark_health_versions_and_idempotence() {
        let mut lb = lb_with(2);
        let v0 = lb.table.version();
        let v1 = lb.mark_health("app/web/1", false).unwrap();
        let v2 = lb.mark_health("app/web/1", false).unwrap();
        assert!(v0 < v1 && v1 < v2);
        for r in 0..4 {
            let out = lb
                .dispatch("app", r, SimTime::ZERO, &mut backend(1.0))
                .unwrap();
            assert_eq!(out.instance.as_deref(), Some("app/web/2"));
        }
        lb.mark_health("app/web/1", true).unwrap();
        let seen: BTreeSet<_> = (0..2)
            .map(|r| {
                lb.dispatch("app", r, SimTime::ZERO, &mut backend(1.0))
                    .unwrap()
                    .instance
                    .unwrap()
            })
            .collect();
        assert_eq!(seen.len(), 2);
        assert_eq!(
            lb.mark_health("nope", true),
            Err(BalancerError::UnknownInstance("nope".into()))
        );
    }

    #[test]
    fn probes_detect_failure_within_budget() {
        let mut lb = lb_with(2);
        let period = lb.probe_period();
        assert_eq!(period, Duration::from_millis(100));
        let mut t = SimTime::ZERO;
        let failed_at = SimTime::from_millis(1_050);
        let mut detected = None;
        while detected.is_none() {
            t += period;
            let changes = lb.probe(|n| !(n == NodeId(1) && t >= failed_at));
            if changes.iter().any(|c| !c.healthy) {
                detected = Some(t);
            }
        }
        assert!(detected.unwrap() - failed_at <= DEFAULT_DETECTION_BUDGET);
        // recovers on the next successful probe
        let changes = lb.probe(|_| true);
        assert_eq!(changes.len(), 1);
        assert!(changes[0].healthy);
    }

    #[test]
    fn connection_rate_counts_window() {
        let mut lb = lb_with(1);
        for i in 0..150 {
            lb.dispatch(
                "app",
                i,
                SimTime::from_micros(1_000_000 + i * 6_000),
                &mut backend(1.0),
            )
            .unwrap();
        }
        let r = lb.connection_rate("app", SimTime::from_secs(1), SimTime::from_secs(2));
        assert_eq!(r, 150.0);
        assert_eq!(
            r,
            lb.connection_rate("app", SimTime::from_secs(1), SimTime::from_secs(2))
        );
        assert_eq!(
            lb.connection_rate("app", SimTime::from_secs(5), SimTime::from_secs(6)),
            0.0
        );
        assert_eq!(
            lb.connection_rate("none", SimTime::ZERO, SimTime::from_secs(1)),
            0.0
        );
    }

    proptest! {
        #[test]
        fn round_robin_is_exact(n in 1u32..8, k in 1u64..20) {
            let mut lb = lb_with(n);
            let mut counts = BTreeMap::new();
            for r in 0..(k * n as u64) {
                let out = lb.dispatch("app", r, SimTime::ZERO, &mut backend(1.0)).unwrap();
                *counts.entry(out.instance.unwrap()).or_insert(0u64) += 1;
            }
            prop_assert_eq!(counts.len(), n as usize);
            prop_assert!(counts.values().all(|&c| c == k));
        }

        #[test]
        fn never_routes_to_unhealthy(ops in proptest::collection::vec((0u32..4, any::<bool>()), 1..60)) {
            let mut lb = lb_with(4);
            for (r, (i, healthy)) in ops.into_iter().enumerate() {
                lb.mark_health(&format!("app/web/{}", i + 1), healthy).unwrap();
                let out = lb.dispatch("app", r as u64, SimTime::ZERO, &mut backend(1.0)).unwrap();
                if let Some(inst) = out.instance {
                    prop_assert!(lb.table.find(&inst).unwrap().healthy);
                }
            }
        }
    }
}
