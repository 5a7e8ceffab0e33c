//! Run reports and their file exports.

use std::collections::BTreeMap;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::balancer::{RequestOutcome, RequestStatus};
use crate::controller::{RecoveryReport, ScaleEvent};
use crate::deployer::DeploymentStatus;
use crate::fabric::{BillingSummary, NodeId};
use crate::harness::scenario::WorkloadSpec;
use crate::log::EventLog;
use crate::SimTime;

/// Request counts for one second of simulated time.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SecondStats {
    pub second: u64,
    pub requests: u64,
    pub ok: u64,
    pub timeout: u64,
    pub no_backend: u64,
    pub failures: u64,
    /// Requests that got a response or timed out; the mean covers these.
    pub responded: u64,
    pub mean_response_ms: f64,
    #[serde(skip)]
    latency_sum_ms: f64,
}

impl SecondStats {
    fn add(&mut self, o: &RequestOutcome) {
        self.requests += 1;
        match o.status {
            RequestStatus::Ok => self.ok += 1,
            RequestStatus::Timeout => self.timeout += 1,
            RequestStatus::NoBackend => self.no_backend += 1,
        }
        self.failures = self.timeout + self.no_backend;
        if o.status != RequestStatus::NoBackend {
            self.responded += 1;
            self.latency_sum_ms += o.latency_ms;
            self.mean_response_ms = self.latency_sum_ms / self.responded as f64;
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub total: u64,
    pub ok: u64,
    pub timeout: u64,
    pub no_backend: u64,
    pub failed: u64,
    pub failed_fraction: f64,
    pub mean_response_ms: f64,
}

impl Aggregate {
    /// Reduction of a per-second series.
    pub fn of(series: &[SecondStats]) -> Self {
        let mut a = Aggregate::default();
        let mut responded = 0;
        let mut weighted = 0.0;
        for s in series {
            a.total += s.requests;
            a.ok += s.ok;
            a.timeout += s.timeout;
            a.no_backend += s.no_backend;
            responded += s.responded;
            weighted += s.mean_response_ms * s.responded as f64;
        }
        a.failed = a.timeout + a.no_backend;
        if a.total > 0 {
            a.failed_fraction = a.failed as f64 / a.total as f64;
        }
        if responded > 0 {
            a.mean_response_ms = weighted / responded as f64;
        }
        a
    }
}

/// Dense per-second series over the span of the given requests.
pub fn series_of(requests: &[RequestOutcome]) -> Vec<SecondStats> {
    let mut by_second: BTreeMap<u64, SecondStats> = BTreeMap::new();
    for o in requests {
        let second = o.at.as_micros() / 1_000_000;
        by_second
            .entry(second)
            .or_insert_with(|| SecondStats {
                second,
                ..Default::default()
            })
            .add(o);
    }
    let (Some(first), Some(last)) = (
        by_second.keys().next().copied(),
        by_second.keys().last().copied(),
    ) else {
        return Vec::new();
    };
    (first..=last)
        .map(|second| {
            by_second.remove(&second).unwrap_or(SecondStats {
                second,
                ..Default::default()
            })
        })
        .collect()
}

/// A failure the script injected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectedFailure {
    pub at: SimTime,
    pub target: String,
    pub nodes: Vec<NodeId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skipped: Option<String>,
}

/// An application instance taken out of rotation by the balancer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailoverRecord {
    pub instance: String,
    pub application: String,
    pub failed_at: Option<SimTime>,
    pub detected_at: SimTime,
    pub detection_ms: Option<f64>,
    /// Requests routed to the instance between its failure and the end of
    /// the run that did not succeed.
    pub affected_requests: u64,
    pub replacement: Option<String>,
    pub replaced_at: Option<SimTime>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeploymentSummary {
    pub application: String,
    pub status: DeploymentStatus,
    pub instances: Vec<String>,
}

/// An overload or underload alert raised by the workload manager.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlertRecord {
    pub at: SimTime,
    pub indicator: String,
    pub subject: String,
    pub severity: crate::workload::Severity,
    pub episode_start: SimTime,
    /// Serving instances when the alert fired.
    pub instances: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub scenario: String,
    pub seed: u64,
    pub platform: bool,
    pub elasticity: bool,
    pub workloads: Vec<WorkloadSpec>,
    pub ready_at: Option<SimTime>,
    pub end_time: SimTime,
    pub series: Vec<SecondStats>,
    pub aggregate: Aggregate,
    pub scale_events: Vec<ScaleEvent>,
    pub alerts: Vec<AlertRecord>,
    pub failures: Vec<InjectedFailure>,
    pub failovers: Vec<FailoverRecord>,
    pub recoveries: Vec<RecoveryReport>,
    /// Delay from the offered load first exceeding serving capacity to the
    /// first overload alert; negative when the alert came first.
    pub peak_detection_ms: Option<f64>,
    pub deployments: Vec<DeploymentSummary>,
    pub checkpoints: u64,
    pub billing: BillingSummary,
}

impl RunReport {
    /// Requests and failures within `[from, to)` seconds of simulated time.
    pub fn window(&self, from: u64, to: u64) -> Aggregate {
        let slice: Vec<SecondStats> = self
            .series
            .iter()
            .filter(|s| s.second >= from && s.second < to)
            .cloned()
            .collect();
        Aggregate::of(&slice)
    }
}

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: RunReport,
    pub log: EventLog,
    pub requests: Vec<RequestOutcome>,
}

#[derive(Serialize)]
struct RequestRow<'a> {
    time_ms: f64,
    app: &'a str,
    instance: &'a str,
    latency_ms: f64,
    status: RequestStatus,
}

impl RunOutput {
    /// Writes `report.json`, `series.csv`, `requests.csv` and
    /// `events.ndjson` into `dir`.
    pub fn write_dir(&self, dir: impl AsRef<Path>) -> io::Result<()> {
        crate::api::RunBundle::from_output(self)?.write_dir(dir)
    }
}

pub fn series_csv(series: &[SecondStats]) -> io::Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for s in series {
        w.serialize(s).map_err(io::Error::other)?;
    }
    if series.is_empty() {
        w.write_record([
            "second",
            "requests",
            "ok",
            "timeout",
            "no_backend",
            "failures",
            "responded",
            "mean_response_ms",
        ])
        .map_err(io::Error::other)?;
    }
    w.into_inner().map_err(|e| io::Error::other(e.to_string()))
}

pub fn requests_csv(requests: &[RequestOutcome]) -> io::Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if requests.is_empty() {
        w.write_record(["time_ms", "app", "instance", "latency_ms", "status"])
            .map_err(io::Error::other)?;
    }
    for o in requests {
        w.serialize(RequestRow {
            time_ms: o.at.as_millis_f64(),
            app: &o.application,
            instance: o.instance.as_deref().unwrap_or(""),
            latency_ms: o.latency_ms,
            status: o.status,
        })
        .map_err(io::Error::other)?;
    }
    w.into_inner().map_err(|e| io::Error::other(e.to_string()))
}

/// Reads back the report of a run directory.
pub fn load_report(dir: impl AsRef<Path>) -> io::Result<RunReport> {
    let text = std::fs::read_to_string(dir.as_ref().join("report.json"))?;
    serde_json::from_str(&text).map_err(io::Error::other)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn outcome(at_ms: u64, status: RequestStatus, latency: f64) -> RequestOutcome {
        RequestOutcome {
            request_id: at_ms,
            application: "a".into(),
            instance: Some("a/w/1".into()),
            at: SimTime::from_millis(at_ms),
            latency_ms: latency,
            status,
            version: 1,
        }
    }

    #[test]
    fn empty_series() {
        assert!(series_of(&[]).is_empty());
        assert_eq!(Aggregate::of(&[]), Aggregate::default());
        let csv = String::from_utf8(series_csv(&[]).unwrap()).unwrap();
        assert!(csv.starts_with("second,requests"));
    }

    #[test]
    fn series_is_dense_and_closed() {
        let reqs = vec![
            outcome(100, RequestStatus::Ok, 10.0),
            outcome(2_500, RequestStatus::Timeout, 3_000.0),
            outcome(2_600, RequestStatus::NoBackend, 0.0),
        ];
        let s = series_of(&reqs);
        assert_eq!(
            s.iter().map(|x| x.second).collect::<Vec<_>>(),
            vec![0, 1, 2]
        );
        assert_eq!(s[1].requests, 0);
        assert_eq!(s[2].failures, 2);
        assert_eq!(s[2].mean_response_ms, 3_000.0);
        let a = Aggregate::of(&s);
        assert_eq!((a.total, a.failed), (3, 2));
        assert!((a.mean_response_ms - 1_505.0).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn aggregate_equals_reduction(raw in proptest::collection::vec((0u64..20_000, 0u8..3, 0.0f64..5_000.0), 0..300)) {
            let mut reqs: Vec<RequestOutcome> = raw.iter().map(|(t, s, l)| {
                let status = [RequestStatus::Ok, RequestStatus::Timeout, RequestStatus::NoBackend][*s as usize];
                outcome(*t, status, if status == RequestStatus::NoBackend { 0.0 } else { *l })
            }).collect();
            reqs.sort_by_key(|o| o.at);
            let series = series_of(&reqs);
            let a = Aggregate::of(&series);
            prop_assert_eq!(a.total, reqs.len() as u64);
            for s in &series {
                prop_assert_eq!(s.requests, s.ok + s.timeout + s.no_backend);
            }
            prop_assert_eq!(a.total, a.ok + a.timeout + a.no_backend);
            let responded: Vec<f64> = reqs.iter().filter(|o| o.status != RequestStatus::NoBackend).map(|o| o.latency_ms).collect();
            if !responded.is_empty() {
                let mean = responded.iter().sum::<f64>() / responded.len() as f64;
                prop_assert!((a.mean_response_ms - mean).abs() <= 1e-9 * mean.max(1.0));
            }
        }
    }
}
