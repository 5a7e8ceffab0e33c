//! Scenario files: what to deploy, which load to offer and which failures
//! to inject. Times of workloads and failures count from the moment every
//! initial deployment has finished.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::fabric::{default_registry, parse_registry, ProviderProfile, VmType};
use crate::manifest::{parse_manifest, ApplicationManifest, THREE_TIER_DESCRIPTOR};
use crate::telemetry::{DEFAULT_REQUEST_TIMEOUT_MS, DEFAULT_SERVICE_TIME_MS};
use crate::workload::{DriftIndicator, LoadThresholds};

pub const DEFAULT_REQUEST_INTERVAL_MS: f64 = 100.0;
pub const DEFAULT_SETTLE_S: f64 = 10.0;
pub const DEFAULT_HORIZON_S: f64 = 7_200.0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ScenarioError {
    #[error("scenario schema violation: {0}")]
    Schema(String),
    #[error("undefined provider `{0}`")]
    UndefinedProvider(String),
    #[error("undefined application `{0}`")]
    UndefinedApplication(String),
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("cannot read `{path}`: {message}")]
    Io { path: String, message: String },
    #[error("unknown bundled scenario `{0}`")]
    UnknownBuiltin(String),
}

fn invalid(msg: impl Into<String>) -> ScenarioError {
    ScenarioError::Invalid(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateRange {
    pub low: f64,
    pub high: f64,
}

/// An httperf-style load: connections open following a rate profile and
/// each sends a fixed number of requests at a fixed interval.
///
/// Each phase ramps the connection rate from `low` to `high` over `ramp_s`,
/// holds at `high`, ramps back down over `ramp_s` and rests at `low` for
/// `rest_s`. The hold is sized so the phases open exactly
/// `total_connections` connections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSpec {
    pub application: String,
    #[serde(default)]
    pub start_s: f64,
    pub total_connections: u64,
    pub requests_per_connection: u32,
    #[serde(default = "default_interval")]
    pub request_interval_ms: f64,
    pub rate: RateRange,
    #[serde(default = "one")]
    pub phases: u32,
    #[serde(default)]
    pub ramp_s: f64,
    #[serde(default)]
    pub rest_s: f64,
    #[serde(default = "default_timeout")]
    pub timeout_ms: f64,
    /// Spread connection openings randomly within their slot; otherwise
    /// each opens at the slot midpoint.
    #[serde(default = "yes")]
    pub jitter: bool,
}

fn default_interval() -> f64 {
    DEFAULT_REQUEST_INTERVAL_MS
}

fn one() -> u32 {
    1
}

fn default_timeout() -> f64 {
    DEFAULT_REQUEST_TIMEOUT_MS
}

fn default_service() -> f64 {
    DEFAULT_SERVICE_TIME_MS
}

fn yes() -> bool {
    true
}

fn default_settle() -> f64 {
    DEFAULT_SETTLE_S
}

fn default_horizon() -> f64 {
    DEFAULT_HORIZON_S
}

/// A linear piece of the connection-rate profile.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Segment {
    start: f64,
    duration: f64,
    from: f64,
    to: f64,
}

impl Segment {
    fn count(&self) -> f64 {
        self.duration * (self.from + self.to) / 2.0
    }

    /// Time into the segment at which `c` connections have opened.
    fn invert(&self, c: f64) -> f64 {
        let a = (self.to - self.from) / (2.0 * self.duration);
        let b = self.from;
        let disc = (b * b + 4.0 * a * c).max(0.0);
        // stable root of a·τ² + b·τ − c = 0
        let tau = if a == 0.0 {
            c / b
        } else {
            2.0 * c / (b + disc.sqrt())
        };
        tau.clamp(0.0, self.duration)
    }
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.total_connections == 0 || self.requests_per_connection == 0 || self.phases == 0 {
            return Err(invalid("workload counts must be positive"));
        }
        let finite = [
            self.start_s,
            self.request_interval_ms,
            self.rate.low,
            self.rate.high,
            self.ramp_s,
            self.rest_s,
            self.timeout_ms,
        ];
        if finite.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(invalid(
                "workload times and rates must be finite and non-negative",
            ));
        }
        if self.rate.high <= 0.0 || self.rate.low > self.rate.high {
            return Err(invalid(
                "connection rate range needs 0 <= low <= high and high > 0",
            ));
        }
        if self.timeout_ms <= 0.0
            || (self.requests_per_connection > 1 && self.request_interval_ms <= 0.0)
        {
            return Err(invalid("timeout and request interval must be positive"));
        }
        if self.hold_s() < 0.0 {
            return Err(invalid(format!(
                "{} connections over {} phases do not fill the ramps and rests",
                self.total_connections, self.phases
            )));
        }
        Ok(())
    }

    /// Hold duration that makes each phase open its share of connections.
    pub fn hold_s(&self) -> f64 {
        let per_phase = self.total_connections as f64 / self.phases as f64;
        (per_phase - self.ramp_s * (self.rate.low + self.rate.high) - self.rest_s * self.rate.low)
            / self.rate.high
    }

    pub fn phase_s(&self) -> f64 {
        2.0 * self.ramp_s + self.hold_s() + self.rest_s
    }

    /// `(start, end)` of each phase's hold at the peak rate, in seconds
    /// from the workload start.
    pub fn holds(&self) -> Vec<(f64, f64)> {
        (0..self.phases)
            .map(|p| {
                let start = p as f64 * self.phase_s() + self.ramp_s;
                (start, start + self.hold_s())
            })
            .collect()
    }

    fn segments(&self) -> Vec<Segment> {
        let (low, high) = (self.rate.low, self.rate.high);
        let mut out = Vec::new();
        let mut t = 0.0;
        for _ in 0..self.phases {
            for (duration, from, to) in [
                (self.ramp_s, low, high),
                (self.hold_s(), high, high),
                (self.ramp_s, high, low),
                (self.rest_s, low, low),
            ] {
                if duration > 0.0 {
                    out.push(Segment {
                        start: t,
                        duration,
                        from,
                        to,
                    });
                    t += duration;
                }
            }
        }
        out
    }

    /// Opening time of each connection in seconds from the workload start.
    /// Connection `k` opens when the integrated rate reaches `k + 1/2`.
    pub fn connection_times(&self) -> Vec<f64> {
        self.connection_times_with(|| 0.5)
    }

    /// As [`WorkloadSpec::connection_times`], with connection `k` opening
    /// when the integrated rate reaches `k + offset()`, `offset` in `[0, 1)`.
    pub fn connection_times_with(&self, mut offset: impl FnMut() -> f64) -> Vec<f64> {
        let segments = self.segments();
        let mut out = Vec::with_capacity(self.total_connections as usize);
        let mut i = 0;
        let mut before = 0.0;
        for k in 0..self.total_connections {
            let target = k as f64 + offset();
            while i + 1 < segments.len() && before + segments[i].count() < target {
                before += segments[i].count();
                i += 1;
            }
            let s = &segments[i];
            out.push(s.start + s.invert(target - before));
        }
        out
    }

    pub fn total_requests(&self) -> u64 {
        self.total_connections * self.requests_per_connection as u64
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostModel {
    /// Added to each request's service time by monitoring.
    #[serde(default)]
    pub monitoring_ms: f64,
    /// Added to each request's latency by routing.
    #[serde(default)]
    pub balancer_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Preallocation {
    pub provider: String,
    pub vm: VmType,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApplicationSpec {
    /// Composite descriptor text.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub descriptor: Option<String>,
    /// Path to a descriptor, relative to the scenario file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub descriptor_file: Option<String>,
    #[serde(default = "default_service")]
    pub service_time_ms: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thresholds: Option<LoadThresholds>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FailureSpec {
    pub at_s: f64,
    /// `leader`, `follower`, `instance:<id>`, `node:<id>` or
    /// `provider:<id>`.
    pub target: String,
}

/// A parsed failure target.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Target {
    Leader,
    Follower,
    Instance(String),
    Node(String),
    Provider(String),
}

impl FailureSpec {
    pub fn parse_target(&self) -> Result<Target, ScenarioError> {
        let t = self.target.trim();
        Ok(match t.split_once(':') {
            None if t == "leader" => Target::Leader,
            None if t == "follower" => Target::Follower,
            Some(("instance", id)) if !id.is_empty() => Target::Instance(id.to_string()),
            Some(("node", id)) if !id.is_empty() => Target::Node(id.to_string()),
            Some(("provider", id)) if !id.is_empty() => Target::Provider(id.to_string()),
            _ => return Err(invalid(format!("bad failure target `{t}`"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub description: String,
    /// Provider registry records; the bundled registry when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub providers: Option<serde_json::Value>,
    /// Providers hosting the master group; the two lowest-latency
    /// providers when empty.
    #[serde(default)]
    pub masters: Vec<String>,
    /// `false` dispatches straight to instances: no monitoring, no
    /// workload manager and no cost model.
    #[serde(default = "yes")]
    pub platform: bool,
    #[serde(default = "yes")]
    pub elasticity: bool,
    #[serde(default)]
    pub costs: CostModel,
    #[serde(default)]
    pub preallocate: Vec<Preallocation>,
    #[serde(default)]
    pub applications: Vec<ApplicationSpec>,
    #[serde(default)]
    pub workloads: Vec<WorkloadSpec>,
    #[serde(default)]
    pub failures: Vec<FailureSpec>,
    #[serde(default)]
    pub indicators: Vec<DriftIndicator>,
    /// Quiet time after the last activity before the run stops.
    #[serde(default = "default_settle")]
    pub settle_s: f64,
    #[serde(default = "default_horizon")]
    pub horizon_s: f64,
}

impl Default for Scenario {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields default")
    }
}

/// Descriptor files shipped with the crate.
const BUNDLED_DESCRIPTORS: &[(&str, &str)] = &[("three-tier.composite", THREE_TIER_DESCRIPTOR)];

/// Scenarios shipped with the crate.
pub const BUILTIN_SCENARIOS: &[(&str, &str)] = &[
    (
        "flash-crowd",
        include_str!("../../scenarios/flash-crowd.json"),
    ),
    (
        "flash-crowd-static",
        include_str!("../../scenarios/flash-crowd-static.json"),
    ),
    (
        "kill-leader",
        include_str!("../../scenarios/kill-leader.json"),
    ),
    (
        "kill-follower",
        include_str!("../../scenarios/kill-follower.json"),
    ),
    (
        "kill-lone-leader",
        include_str!("../../scenarios/kill-lone-leader.json"),
    ),
    (
        "kill-instance",
        include_str!("../../scenarios/kill-instance.json"),
    ),
    (
        "overhead-baseline",
        include_str!("../../scenarios/overhead-baseline.json"),
    ),
    (
        "overhead-platform",
        include_str!("../../scenarios/overhead-platform.json"),
    ),
];

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        serde_json::from_str(text).map_err(|e| ScenarioError::Schema(e.to_string()))
    }

    /// Reads a scenario file and inlines descriptor files next to it.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ScenarioError> {
        let path = path.as_ref();
        let io = |p: &Path, e: std::io::Error| ScenarioError::Io {
            path: p.display().to_string(),
            message: e.to_string(),
        };
        let text = std::fs::read_to_string(path).map_err(|e| io(path, e))?;
        let mut s = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for app in &mut s.applications {
            if let Some(file) = app.descriptor_file.take() {
                let p = base.join(&file);
                let text = match std::fs::read_to_string(&p) {
                    Ok(t) => t,
                    Err(e) => match BUNDLED_DESCRIPTORS.iter().find(|(n, _)| *n == file) {
                        Some((_, t)) => t.to_string(),
                        None => return Err(io(&p, e)),
                    },
                };
                app.descriptor = Some(text);
            }
        }
        Ok(s)
    }

    pub fn builtin(name: &str) -> Result<Self, ScenarioError> {
        let (_, text) = BUILTIN_SCENARIOS
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| ScenarioError::UnknownBuiltin(name.to_string()))?;
        let mut s = Self::from_json(text)?;
        for app in &mut s.applications {
            if let Some(file) = app.descriptor_file.take() {
                let (_, t) = BUNDLED_DESCRIPTORS
                    .iter()
                    .find(|(n, _)| *n == file)
                    .ok_or_else(|| invalid(format!("unknown bundled descriptor `{file}`")))?;
                app.descriptor = Some(t.to_string());
            }
        }
        Ok(s)
    }

    pub fn registry(&self) -> Result<Vec<ProviderProfile>, ScenarioError> {
        match &self.providers {
            None => Ok(default_registry()),
            Some(v) => {
                parse_registry(&v.to_string()).map_err(|e| ScenarioError::Schema(e.to_string()))
            }
        }
    }

    pub fn manifests(&self) -> Result<Vec<ApplicationManifest>, ScenarioError> {
        self.applications
            .iter()
            .map(|a| {
                let text = a.descriptor.as_deref().ok_or_else(|| {
                    invalid("application needs `descriptor` (or an unresolved `descriptor_file`)")
                })?;
                parse_manifest(text).map_err(|e| invalid(e.to_string()))
            })
            .collect()
    }

    /// Master providers, defaulting to the two lowest-latency ones.
    pub fn master_providers(&self, registry: &[ProviderProfile]) -> Vec<String> {
        if !self.masters.is_empty() {
            return self.masters.clone();
        }
        let mut by_latency: Vec<(u64, &str)> = registry
            .iter()
            .map(|p| (p.base_latency_ms, p.id.as_str()))
            .collect();
        by_latency.sort();
        by_latency
            .into_iter()
            .take(2)
            .map(|(_, id)| id.to_string())
            .collect()
    }

    /// Request timeout shared by every workload.
    pub fn timeout_ms(&self) -> f64 {
        self.workloads
            .first()
            .map_or(DEFAULT_REQUEST_TIMEOUT_MS, |w| w.timeout_ms)
    }

    /// Checks the scenario against the registry and its own references.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let registry = self.registry()?;
        let known: BTreeSet<&str> = registry.iter().map(|p| p.id.as_str()).collect();
        let provider = |id: &str| {
            if known.contains(id) {
                Ok(())
            } else {
                Err(ScenarioError::UndefinedProvider(id.to_string()))
            }
        };
        for m in &self.masters {
            provider(m)?;
        }
        if self.masters.iter().collect::<BTreeSet<_>>().len() != self.masters.len() {
            return Err(invalid("masters must be on distinct providers"));
        }
        for p in &self.preallocate {
            provider(&p.provider)?;
            let offered = registry
                .iter()
                .any(|r| r.id == p.provider && r.offers(p.vm));
            if !offered {
                return Err(invalid(format!("{} does not offer {}", p.provider, p.vm)));
            }
        }
        let manifests = self.manifests()?;
        let mut names = BTreeSet::new();
        for (m, a) in manifests.iter().zip(&self.applications) {
            if !names.insert(m.name.as_str()) {
                return Err(invalid(format!("application `{}` declared twice", m.name)));
            }
            if !(a.service_time_ms.is_finite() && a.service_time_ms > 0.0) {
                return Err(invalid("service_time_ms must be positive"));
            }
        }
        for w in &self.workloads {
            if !names.contains(w.application.as_str()) {
                return Err(ScenarioError::UndefinedApplication(w.application.clone()));
            }
            w.validate()?;
            if w.timeout_ms != self.timeout_ms() {
                return Err(invalid("all workloads must share one request timeout"));
            }
        }
        for f in &self.failures {
            if !(f.at_s.is_finite() && f.at_s >= 0.0) {
                return Err(invalid("failure times must be non-negative"));
            }
            match f.parse_target()? {
                Target::Provider(p) => provider(&p)?,
                Target::Instance(id) => {
                    let app = id.split('/').next().unwrap_or_default();
                    if !names.contains(app) {
                        return Err(ScenarioError::UndefinedApplication(app.to_string()));
                    }
                }
                _ => {}
            }
        }
        for i in &self.indicators {
            let app = i.subject.split('/').next().unwrap_or_default();
            if !names.contains(app) {
                return Err(ScenarioError::UndefinedApplication(app.to_string()));
            }
        }
        if !(self.settle_s.is_finite()
            && self.settle_s >= 0.0
            && self.horizon_s.is_finite()
            && self.horizon_s > 0.0)
        {
            return Err(invalid(
                "settle_s and horizon_s must be non-negative and finite",
            ));
        }
        let masters = self.master_providers(&registry);
        if masters.is_empty() {
            return Err(invalid("no provider can host a master"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(total: u64, phases: u32, low: f64, high: f64, ramp: f64, rest: f64) -> WorkloadSpec {
        WorkloadSpec {
            application: "a".into(),
            start_s: 0.0,
            total_connections: total,
            requests_per_connection: 10,
            request_interval_ms: 100.0,
            rate: RateRange { low, high },
            phases,
            ramp_s: ramp,
            rest_s: rest,
            timeout_ms: 1000.0,
            jitter: true,
        }
    }

    #[test]
    fn constant_rate_spacing() {
        let s = spec(100, 1, 10.0, 10.0, 0.0, 0.0);
        assert_eq!(s.hold_s(), 10.0);
        let t = s.connection_times();
        assert_eq!(t.len(), 100);
        assert!((t[0] - 0.05).abs() < 1e-12);
        assert!((t[99] - 9.95).abs() < 1e-9);
    }

    #[test]
    fn ramp_inversion_matches_integral() {
        // ramp 0 -> 10 over 2 s opens 10 connections; C(t) = 2.5 t²
        let s = spec(10, 1, 0.0, 10.0, 2.0, 0.0);
        let t = s.connection_times();
        for (k, tk) in t.iter().enumerate().take(9) {
            let expected = ((k as f64 + 0.5) / 2.5).sqrt();
            assert!((tk - expected).abs() < 1e-9, "{k}: {tk} vs {expected}");
        }
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(spec(0, 1, 1.0, 2.0, 0.0, 0.0).validate().is_err());
        assert!(spec(10, 1, 3.0, 2.0, 0.0, 0.0).validate().is_err());
        // the two ramps alone open 10·(10+150) = 1600 connections
        assert!(spec(1000, 1, 10.0, 150.0, 10.0, 0.0).validate().is_err());
        assert!(Scenario::from_json(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn builtins_validate() {
        for (name, _) in BUILTIN_SCENARIOS {
            let s = Scenario::builtin(name).unwrap();
            s.validate().unwrap_or_else(|e| panic!("{name}: {e}"));
        }
    }

    #[test]
    fn undefined_references() {
        let mut s = Scenario::builtin("kill-instance").unwrap();
        s.masters = vec!["nowhere".into()];
        assert_eq!(
            s.validate(),
            Err(ScenarioError::UndefinedProvider("nowhere".into()))
        );
        let mut s = Scenario::builtin("kill-instance").unwrap();
        s.workloads[0].application = "ghost".into();
        assert_eq!(
            s.validate(),
            Err(ScenarioError::UndefinedApplication("ghost".into()))
        );
    }

    proptest! {
        #[test]
        fn connection_times_are_sorted_and_complete(
            total in 50u64..2000, phases in 1u32..4, low in 0.0f64..20.0, extra in 1.0f64..200.0,
            ramp in 0.0f64..3.0, rest in 0.0f64..3.0,
        ) {
            let s = spec(total, phases, low, low + extra, ramp, rest);
            prop_assume!(s.validate().is_ok());
            let t = s.connection_times();
            prop_assert_eq!(t.len() as u64, total);
            prop_assert!(t.windows(2).all(|w| w[0] <= w[1] + 1e-9));
            let end = phases as f64 * s.phase_s();
            prop_assert!(t.iter().all(|x| *x >= 0.0 && *x <= end + 1e-9));
        }
    }
}
