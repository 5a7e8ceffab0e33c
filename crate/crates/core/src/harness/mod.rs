//! Scenario runner and evaluation reports: flash-crowd load, failure
//! scripts, availability, recovery times and platform overhead.

pub mod report;
pub mod scenario;
pub mod sim;

use serde::{Deserialize, Serialize};

pub use report::{
    load_report, requests_csv, series_csv, series_of, Aggregate, AlertRecord, DeploymentSummary,
    FailoverRecord, InjectedFailure, RunOutput, RunReport, SecondStats,
};
pub use scenario::{
    ApplicationSpec, CostModel, FailureSpec, Preallocation, RateRange, Scenario, ScenarioError,
    Target, WorkloadSpec, BUILTIN_SCENARIOS,
};
pub use sim::{run_scenario, RunError, Simulation};

use crate::controller::{RecoveryKind, RecoveryReport};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum HarnessError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("runs are not comparable: {0}")]
    Mismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AvailabilityReport {
    pub mtbf_hours: f64,
    pub mttr_hours: f64,
    pub availability: f64,
}

/// Steady-state availability `MTBF / (MTBF + MTTR)`.
pub fn availability(mtbf_hours: f64, mttr_hours: f64) -> Result<AvailabilityReport, HarnessError> {
    if !(mtbf_hours.is_finite() && mtbf_hours > 0.0) {
        return Err(HarnessError::InvalidInput(format!(
            "MTBF must be positive, got {mtbf_hours}"
        )));
    }
    if !(mttr_hours.is_finite() && mttr_hours >= 0.0) {
        return Err(HarnessError::InvalidInput(format!(
            "MTTR must be non-negative, got {mttr_hours}"
        )));
    }
    Ok(AvailabilityReport {
        mtbf_hours,
        mttr_hours,
        availability: mtbf_hours / (mtbf_hours + mttr_hours),
    })
}

/// Rounds to `digits` significant digits.
pub fn round_significant(x: f64, digits: u32) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    let scale = 10f64.powi(digits as i32 - 1 - x.abs().log10().floor() as i32);
    (x * scale).round() / scale
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverheadReport {
    pub baseline_ms: f64,
    pub platform_ms: f64,
    pub overhead: f64,
    /// `overhead` in percent, one decimal.
    pub overhead_percent: f64,
}

/// `(platform − baseline) / baseline`.
pub fn relative_overhead(baseline: f64, platform: f64) -> Result<OverheadReport, HarnessError> {
    if !(baseline.is_finite() && baseline > 0.0 && platform.is_finite()) {
        return Err(HarnessError::InvalidInput(
            "baseline time must be positive".into(),
        ));
    }
    let overhead = (platform - baseline) / baseline;
    Ok(OverheadReport {
        baseline_ms: baseline,
        platform_ms: platform,
        overhead,
        overhead_percent: (overhead * 1_000.0).round() / 10.0,
    })
}

/// Compares the mean execution time of two runs of the same workload.
pub fn overhead_report(
    baseline: &RunReport,
    platform: &RunReport,
) -> Result<OverheadReport, HarnessError> {
    if baseline.workloads != platform.workloads {
        return Err(HarnessError::Mismatch("workload specs differ".into()));
    }
    if baseline.seed != platform.seed {
        return Err(HarnessError::Mismatch(format!(
            "seeds differ ({} vs {})",
            baseline.seed, platform.seed
        )));
    }
    if baseline.aggregate.total == 0 {
        return Err(HarnessError::InvalidInput(
            "baseline run served no requests".into(),
        ));
    }
    relative_overhead(
        baseline.aggregate.mean_response_ms,
        platform.aggregate.mean_response_ms,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoverySummary {
    pub recoveries: Vec<RecoveryReport>,
    pub completed: usize,
    pub unavailable: bool,
    pub mean_election_ms: Option<f64>,
    pub mean_redeploy_ms: Option<f64>,
    pub mean_total_ms: Option<f64>,
    pub mean_leader_total_ms: Option<f64>,
    pub mean_follower_total_ms: Option<f64>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl RecoverySummary {
    pub fn of(recoveries: Vec<RecoveryReport>) -> Self {
        let total_of = |kind: RecoveryKind| {
            mean(
                recoveries
                    .iter()
                    .filter(|r| r.kind == kind)
                    .filter_map(|r| r.total_ms),
            )
        };
        RecoverySummary {
            completed: recoveries
                .iter()
                .filter(|r| r.completed_at.is_some())
                .count(),
            unavailable: recoveries.iter().any(|r| r.unavailable),
            mean_election_ms: mean(recoveries.iter().filter_map(|r| r.election_ms)),
            mean_redeploy_ms: mean(recoveries.iter().filter_map(|r| r.redeploy_ms)),
            mean_total_ms: mean(recoveries.iter().filter_map(|r| r.total_ms)),
            mean_leader_total_ms: total_of(RecoveryKind::Leader),
            mean_follower_total_ms: total_of(RecoveryKind::Follower),
            recoveries,
        }
    }
}

/// Runs a master-failure scenario and summarizes the recoveries.
pub fn measure_recovery(
    scenario: &Scenario,
    seed: u64,
) -> Result<(RecoverySummary, RunOutput), RunError> {
    let out = run_scenario(scenario, seed)?;
    Ok((RecoverySummary::of(out.report.recoveries.clone()), out))
}
