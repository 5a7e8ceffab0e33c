//! Request and response bodies shared by the HTTP service and its client.

use std::io;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::deployer::{choose_placement, validate_constraints, DeployError, DeploymentPlan};
use crate::fabric::{default_registry, parse_registry, FabricError};
use crate::harness::{requests_csv, series_csv, RecoverySummary, RunOutput, RunReport, Scenario};
use crate::manifest::{parse_manifest, ApplicationManifest, ManifestError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRequest {
    pub scenario: Scenario,
    pub seed: u64,
}

/// A finished run with its exports rendered as text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunBundle {
    pub report: RunReport,
    pub series_csv: String,
    pub requests_csv: String,
    pub events_ndjson: String,
}

impl RunBundle {
    pub fn from_output(out: &RunOutput) -> io::Result<Self> {
        let text = |b: Vec<u8>| String::from_utf8(b).map_err(io::Error::other);
        Ok(RunBundle {
            report: out.report.clone(),
            series_csv: text(series_csv(&out.report.series)?)?,
            requests_csv: text(requests_csv(&out.requests)?)?,
            events_ndjson: out.log.to_ndjson(),
        })
    }

    /// Writes `report.json`, `series.csv`, `requests.csv` and
    /// `events.ndjson` into `dir`.
    pub fn write_dir(&self, dir: impl AsRef<Path>) -> io::Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut report = serde_json::to_vec_pretty(&self.report).map_err(io::Error::other)?;
        report.push(b'\n');
        std::fs::write(dir.join("report.json"), report)?;
        std::fs::write(dir.join("series.csv"), &self.series_csv)?;
        std::fs::write(dir.join("requests.csv"), &self.requests_csv)?;
        std::fs::write(dir.join("events.ndjson"), &self.events_ndjson)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AvailabilityRequest {
    pub mtbf_hours: f64,
    pub mttr_hours: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryResponse {
    pub summary: RecoverySummary,
    pub report: RunReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverheadRequest {
    pub baseline: RunReport,
    pub platform: RunReport,
}

/// A descriptor to parse, validate and place against the bundled
/// providers, or against `providers` when given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanRequest {
    pub descriptor: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub providers: Option<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanResponse {
    pub manifest: ApplicationManifest,
    pub plan: DeploymentPlan,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PlanError {
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Registry(#[from] FabricError),
    #[error(transparent)]
    Deploy(#[from] DeployError),
}

/// Parses and validates a descriptor and computes its placement.
pub fn plan(req: &PlanRequest) -> Result<PlanResponse, PlanError> {
    let manifest = parse_manifest(&req.descriptor)?;
    manifest.validate()?;
    let registry = match &req.providers {
        Some(v) => parse_registry(&v.to_string())?,
        None => default_registry(),
    };
    let candidates = validate_constraints(&manifest, &registry)?;
    let plan = choose_placement(
        &manifest,
        &candidates,
        &registry,
        &mut ChaCha8Rng::seed_from_u64(req.seed),
    )?;
    Ok(PlanResponse { manifest, plan })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioList {
    pub scenarios: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiError {
    pub error: String,
}
