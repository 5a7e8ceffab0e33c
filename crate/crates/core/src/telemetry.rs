//! Per-instance monitoring: a synthetic load model, a buffer of
//! responsiveness samples, interval flushes with at-least-once delivery,
//! and health checks.

use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::fabric::{Fabric, NodeId};
use crate::time::duration_ms_f64;
use crate::SimTime;

pub const SAMPLE_INTERVAL: Duration = Duration::from_secs(1);
pub const FLUSH_INTERVAL: Duration = Duration::from_secs(5);
pub const DEFAULT_SERVICE_TIME_MS: f64 = 100.0;
pub const DEFAULT_REQUEST_TIMEOUT_MS: f64 = 5_000.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricEvent {
    pub instance: String,
    pub application: String,
    pub component: String,
    pub timestamp: SimTime,
    pub response_time_ms: f64,
    pub request_count: u64,
    /// Busy fraction over the sampling interval, in `0..=1`.
    pub cpu_load: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HealthReport {
    pub component: String,
    pub timestamp: SimTime,
    pub reachable: bool,
    /// Present exactly when `reachable`.
    pub latency_ms: Option<u64>,
}

/// Result of offering one request to an instance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Admission {
    pub latency_ms: f64,
    /// The request was refused because the queue was over capacity.
    pub rejected: bool,
}

/// A single-server deterministic queue.
///
/// A request arriving behind `q` requests waits for them and is then served,
/// so a sample taken with `q` requests in the system reports
/// `(q + 1) × service_time`. Arrivals that find more than
/// `timeout / service_time` requests queued are refused.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueModel {
    pub service_time_ms: f64,
    pub timeout_ms: f64,
    busy_until_ms: f64,
}

impl QueueModel {
    pub fn new(service_time_ms: f64, timeout_ms: f64) -> Self {
        assert!(service_time_ms > 0.0, "service time must be positive");
        QueueModel {
            service_time_ms,
            timeout_ms,
            busy_until_ms: 0.0,
        }
    }

    /// Requests currently in the system (waiting or in service).
    pub fn queue_length(&self, at: SimTime) -> u64 {
        let backlog = self.busy_until_ms - at.as_millis_f64();
        if backlog <= 0.0 {
            0
        } else {
            // tolerate float residue from repeated additions
            (backlog / self.service_time_ms - 1e-9).ceil().max(0.0) as u64
        }
    }

    pub fn capacity(&self) -> u64 {
        (self.timeout_ms / self.service_time_ms).floor() as u64
    }

    pub fn response_time_ms(&self, at: SimTime) -> f64 {
        (self.queue_length(at) + 1) as f64 * self.service_time_ms
    }

    /// Enqueues a request whose processing costs `extra_ms` on top of the
    /// base service time.
    pub fn admit(&mut self, at: SimTime, extra_ms: f64) -> Admission {
        let now = at.as_millis_f64();
        if self.queue_length(at) > self.capacity() {
            return Admission {
                latency_ms: self.timeout_ms,
                rejected: true,
            };
        }
        self.busy_until_ms = self.busy_until_ms.max(now) + self.service_time_ms + extra_ms;
        Admission {
            latency_ms: self.busy_until_ms - now,
            rejected: false,
        }
    }

    /// Pushes a queue directly to `queued` waiting requests.
    pub fn preload(&mut self, at: SimTime, queued: u64) {
        self.busy_until_ms = at.as_millis_f64() + queued as f64 * self.service_time_ms;
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InstanceMonitor {
    pub instance: String,
    pub application: String,
    pub component: String,
    pub node: NodeId,
    pub monitorable: bool,
    pub model: QueueModel,
    routed: u64,
    busy_ms: f64,
    last_sample: SimTime,
    buffer: Vec<MetricEvent>,
    unacked: Vec<MetricEvent>,
}

impl InstanceMonitor {
    pub fn buffered(&self) -> usize {
        self.buffer.len()
    }

    pub fn unacked(&self) -> usize {
        self.unacked.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TelemetryError {
    #[error("unknown instance `{0}`")]
    UnknownInstance(String),
}

/// All instance monitors of a run, keyed by instance id.
#[derive(Debug, Default, Clone)]
pub struct Telemetry {
    monitors: BTreeMap<String, InstanceMonitor>,
}

impl Telemetry {
    pub fn new() -> Self {
        Self::default()
    }

    #[allow(clippy::too_many_arguments)]
    pub fn attach(
        &mut self,
        instance: &str,
        application: &str,
        component: &str,
        node: NodeId,
        monitorable: bool,
        model: QueueModel,
        at: SimTime,
    ) {
        self.monitors.insert(
            instance.to_string(),
            InstanceMonitor {
                instance: instance.to_string(),
                application: application.to_string(),
                component: component.to_string(),
                node,
                monitorable,
                model,
                routed: 0,
                busy_ms: 0.0,
                last_sample: at,
                buffer: Vec::new(),
                unacked: Vec::new(),
            },
        );
    }

    pub fn detach(&mut self, instance: &str) -> Option<InstanceMonitor> {
        self.monitors.remove(instance)
    }

    pub fn monitor(&self, instance: &str) -> Option<&InstanceMonitor> {
        self.monitors.get(instance)
    }

    pub fn monitor_mut(&mut self, instance: &str) -> Option<&mut InstanceMonitor> {
        self.monitors.get_mut(instance)
    }

    pub fn instances(&self) -> impl Iterator<Item = &InstanceMonitor> {
        self.monitors.values()
    }

    /// Offers a request to an instance's queue and accounts it for the
    /// next sample.
    pub fn serve(
        &mut self,
        instance: &str,
        at: SimTime,
        extra_ms: f64,
    ) -> Result<Admission, TelemetryError> {
        let m = self
            .monitors
            .get_mut(instance)
            .ok_or_else(|| TelemetryError::UnknownInstance(instance.to_string()))?;
        let admission = m.model.admit(at, extra_ms);
        m.routed += 1;
        if !admission.rejected {
            m.busy_ms += m.model.service_time_ms + extra_ms;
        }
        Ok(admission)
    }

    /// Takes one responsiveness sample. Instances on stopped nodes or on
    /// unmonitorable providers stay silent.
    pub fn sample_instance(
        &mut self,
        instance: &str,
        at: SimTime,
        running: bool,
    ) -> Option<MetricEvent> {
        let m = self.monitors.get_mut(instance)?;
        if !running || !m.monitorable {
            return None;
        }
        let interval = duration_ms_f64(at - m.last_sample);
        let cpu_load = if interval > 0.0 {
            (m.busy_ms / interval).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let event = MetricEvent {
            instance: m.instance.clone(),
            application: m.application.clone(),
            component: m.component.clone(),
            timestamp: at,
            response_time_ms: m.model.response_time_ms(at),
            request_count: m.routed,
            cpu_load,
        };
        m.routed = 0;
        m.busy_ms = 0.0;
        m.last_sample = at;
        m.buffer.push(event.clone());
        Some(event)
    }

    /// Drains the sample buffer.
    pub fn flush_interval(&mut self, instance: &str) -> Vec<MetricEvent> {
        self.monitors
            .get_mut(instance)
            .map(|m| std::mem::take(&mut m.buffer))
            .unwrap_or_default()
    }

    /// Flushes and returns everything awaiting acknowledgement: earlier
    /// undelivered batches followed by the fresh one. The events stay
    /// pending until [`Telemetry::ack`].
    pub fn prepare_delivery(&mut self, instance: &str) -> Vec<MetricEvent> {
        let fresh = self.flush_interval(instance);
        match self.monitors.get_mut(instance) {
            Some(m) => {
                m.unacked.extend(fresh);
                m.unacked.clone()
            }
            None => Vec::new(),
        }
    }

    pub fn ack(&mut self, instance: &str) {
        if let Some(m) = self.monitors.get_mut(instance) {
            m.unacked.clear();
        }
    }
}

/// Reports whether `target` answers a ping.
pub fn health_check(fabric: &Fabric, component: &str, target: NodeId, at: SimTime) -> HealthReport {
    let latency_ms = fabric.probe(target);
    HealthReport {
        component: component.to_string(),
        timestamp: at,
        reachable: latency_ms.is_some(),
        latency_ms,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fabric::{FailureTarget, ProviderProfile, VmOffering, VmType};

    fn telemetry_with(service: f64) -> Telemetry {
        let mut t = Telemetry::new();
        t.attach(
            "app/web/1",
            "app",
            "web",
            NodeId(1),
            true,
            QueueModel::new(service, 5_000.0),
            SimTime::ZERO,
        );
        t
    }

    #[test]
    fn idle_instance_reports_base_service_time() {
        let mut t = telemetry_with(100.0);
        let e = t
            .sample_instance("app/web/1", SimTime::from_secs(1), true)
            .unwrap();
        assert_eq!(e.response_time_ms, 100.0);
        assert_eq!(e.request_count, 0);
        assert_eq!(e.cpu_load, 0.0);
    }

    #[test]
    fn queued_requests_lengthen_response_time() {
        let mut t = telemetry_with(100.0);
        let at = SimTime::from_secs(1);
        t.monitor_mut("app/web/1").unwrap().model.preload(at, 10);
        let e = t.sample_instance("app/web/1", at, true).unwrap();
        assert_eq!(e.response_time_ms, 1100.0);
    }

    #[test]
    fn queue_admission_matches_model() {
        let mut q = QueueModel::new(100.0, 5_000.0);
        let t0 = SimTime::ZERO;
        assert_eq!(q.admit(t0, 0.0).latency_ms, 100.0);
        assert_eq!(q.admit(t0, 0.0).latency_ms, 200.0);
        assert_eq!(q.queue_length(t0), 2);
        assert_eq!(q.queue_length(SimTime::from_millis(150)), 1);
        assert_eq!(q.queue_length(SimTime::from_millis(200)), 0);
        // fill up to capacity, then the next arrival is refused
        let mut q = QueueModel::new(100.0, 5_000.0);
        for _ in 0..=q.capacity() {
            assert!(!q.admit(t0, 0.0).rejected);
        }
        let refused = q.admit(t0, 0.0);
        assert!(refused.rejected);
        assert_eq!(refused.latency_ms, 5_000.0);
    }

    #[test]
    fn failed_instance_is_silent() {
        let mut t = telemetry_with(100.0);
        assert!(t
            .sample_instance("app/web/1", SimTime::from_secs(1), false)
            .is_none());
        assert_eq!(t.monitor("app/web/1").unwrap().buffered(), 0);
    }

    #[test]
    fn unmonitorable_instance_is_silent() {
        let mut t = Telemetry::new();
        t.attach(
            "a/b/1",
            "a",
            "b",
            NodeId(1),
            false,
            QueueModel::new(1.0, 5_000.0),
            SimTime::ZERO,
        );
        assert!(t
            .sample_instance("a/b/1", SimTime::from_secs(1), true)
            .is_none());
    }

    #[test]
    fn flush_drains_buffer() {
        let mut t = telemetry_with(100.0);
        for s in 1..=3 {
            t.sample_instance("app/web/1", SimTime::from_secs(s), true);
        }
        assert_eq!(t.flush_interval("app/web/1").len(), 3);
        assert!(t.flush_interval("app/web/1").is_empty());
        assert!(t.flush_interval("unknown").is_empty());
    }

    #[test]
    fn undelivered_batches_are_retried() {
        let mut t = telemetry_with(100.0);
        t.sample_instance("app/web/1", SimTime::from_secs(1), true);
        let first = t.prepare_delivery("app/web/1");
        assert_eq!(first.len(), 1);
        // not acknowledged: the next delivery carries it again
        t.sample_instance("app/web/1", SimTime::from_secs(2), true);
        let second = t.prepare_delivery("app/web/1");
        assert_eq!(second.len(), 2);
        assert_eq!(second[0], first[0]);
        t.ack("app/web/1");
        assert!(t.prepare_delivery("app/web/1").is_empty());
    }

    #[test]
    fn request_counts_and_load_are_accounted() {
        let mut t = telemetry_with(100.0);
        for ms in [0, 200, 400, 600, 800] {
            t.serve("app/web/1", SimTime::from_millis(ms), 0.0).unwrap();
        }
        let e = t
            .sample_instance("app/web/1", SimTime::from_secs(1), true)
            .unwrap();
        assert_eq!(e.request_count, 5);
        assert!((e.cpu_load - 0.5).abs() < 1e-12);
        assert!(t.serve("nope", SimTime::ZERO, 0.0).is_err());
    }

    #[test]
    fn health_check_tracks_node_state() {
        let p = ProviderProfile::new(
            "p",
            "P",
            "X",
            vec![VmOffering {
                name: "s".into(),
                vcpu: 1,
                ram_gib: 1.0,
                price: 0.1,
            }],
            0,
            12,
        )
        .unwrap();
        let mut f = Fabric::new(vec![p], 0);
        let n = f.provision_running("p", VmType::Small).unwrap();
        let r1 = health_check(&f, "x", n, SimTime::ZERO);
        assert_eq!((r1.reachable, r1.latency_ms), (true, Some(12)));
        let r2 = health_check(&f, "x", n, SimTime::from_secs(1));
        assert_eq!((r2.reachable, r2.latency_ms), (r1.reachable, r1.latency_ms));
        f.inject_failure(FailureTarget::Node(n), SimTime::from_secs(2))
            .unwrap();
        f.run_until(SimTime::from_secs(2));
        let r3 = health_check(&f, "x", n, SimTime::from_secs(2));
        assert_eq!((r3.reachable, r3.latency_ms), (false, None));
    }
}
