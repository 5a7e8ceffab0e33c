//! HTTP/JSON service exposing the cirrus control plane: scenario runs,
//! recovery measurements, availability and overhead reports, and
//! deployment planning.

use std::future::Future;
use std::io;
use std::net::SocketAddr;

use axum::extract::rejection::JsonRejection;
use axum::extract::Path;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use cirrus_core::api::{
    plan, ApiError, AvailabilityRequest, OverheadRequest, PlanRequest, PlanResponse,
    RecoveryResponse, RunBundle, RunRequest, ScenarioList,
};
use cirrus_core::harness::{
    availability, measure_recovery, overhead_report, run_scenario, AvailabilityReport,
    OverheadReport, Scenario, ScenarioError, BUILTIN_SCENARIOS,
};
use serde_json::{json, Value};
use tokio::net::TcpListener;
use tokio::task::JoinHandle;

/// An error rendered as `{"error": ...}` with a status code.
#[derive(Debug)]
pub struct AppError {
    status: StatusCode,
    message: String,
}

impl AppError {
    fn bad_request(e: impl ToString) -> Self {
        AppError {
            status: StatusCode::BAD_REQUEST,
            message: e.to_string(),
        }
    }

    fn unprocessable(e: impl ToString) -> Self {
        AppError {
            status: StatusCode::UNPROCESSABLE_ENTITY,
            message: e.to_string(),
        }
    }

    fn internal(e: impl ToString) -> Self {
        AppError {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            message: e.to_string(),
        }
    }
}

impl From<JsonRejection> for AppError {
    fn from(e: JsonRejection) -> Self {
        AppError {
            status: e.status(),
            message: e.body_text(),
        }
    }
}

impl IntoResponse for AppError {
    fn into_response(self) -> Response {
        if self.status.is_server_error() {
            tracing::error!(status = %self.status, "{}", self.message);
        }
        (
            self.status,
            Json(ApiError {
                error: self.message,
            }),
        )
            .into_response()
    }
}

type ApiResult<T> = Result<Json<T>, AppError>;

/// Runs CPU-bound simulation work off the async workers.
async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> T + Send + 'static,
) -> Result<T, AppError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(AppError::internal)
}

fn checked(scenario: &Scenario) -> Result<(), AppError> {
    scenario.validate().map_err(|e| match e {
        ScenarioError::Io { .. } => AppError::bad_request(e),
        _ => AppError::unprocessable(e),
    })
}

async fn health() -> Json<Value> {
    Json(json!({"status": "ok", "version": env!("CARGO_PKG_VERSION")}))
}

async fn list_scenarios() -> Json<ScenarioList> {
    Json(ScenarioList {
        scenarios: BUILTIN_SCENARIOS
            .iter()
            .map(|(n, _)| n.to_string())
            .collect(),
    })
}

async fn get_scenario(Path(name): Path<String>) -> ApiResult<Scenario> {
    Scenario::builtin(&name).map(Json).map_err(|e| match e {
        ScenarioError::UnknownBuiltin(_) => AppError {
            status: StatusCode::NOT_FOUND,
            message: e.to_string(),
        },
        _ => AppError::internal(e),
    })
}

async fn post_run(body: Result<Json<RunRequest>, JsonRejection>) -> ApiResult<RunBundle> {
    let Json(req) = body?;
    checked(&req.scenario)?;
    tracing::info!(scenario = %req.scenario.name, seed = req.seed, "run");
    let bundle = blocking(move || {
        let out = run_scenario(&req.scenario, req.seed).map_err(AppError::unprocessable)?;
        RunBundle::from_output(&out).map_err(AppError::internal)
    })
    .await??;
    Ok(Json(bundle))
}

async fn post_recovery(
    body: Result<Json<RunRequest>, JsonRejection>,
) -> ApiResult<RecoveryResponse> {
    let Json(req) = body?;
    checked(&req.scenario)?;
    tracing::info!(scenario = %req.scenario.name, seed = req.seed, "recovery");
    let (summary, out) = blocking(move || measure_recovery(&req.scenario, req.seed))
        .await?
        .map_err(AppError::unprocessable)?;
    Ok(Json(RecoveryResponse {
        summary,
        report: out.report,
    }))
}

async fn post_availability(
    body: Result<Json<AvailabilityRequest>, JsonRejection>,
) -> ApiResult<AvailabilityReport> {
    let Json(req) = body?;
    availability(req.mtbf_hours, req.mttr_hours)
        .map(Json)
        .map_err(AppError::unprocessable)
}

async fn post_overhead(
    body: Result<Json<OverheadRequest>, JsonRejection>,
) -> ApiResult<OverheadReport> {
    let Json(req) = body?;
    overhead_report(&req.baseline, &req.platform)
        .map(Json)
        .map_err(AppError::unprocessable)
}

async fn post_plan(body: Result<Json<PlanRequest>, JsonRejection>) -> ApiResult<PlanResponse> {
    let Json(req) = body?;
    plan(&req).map(Json).map_err(AppError::unprocessable)
}

pub fn router() -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/scenarios", get(list_scenarios))
        .route("/scenarios/:name", get(get_scenario))
        .route("/runs", post(post_run))
        .route("/recovery", post(post_recovery))
        .route("/availability", post(post_availability))
        .route("/overhead", post(post_overhead))
        .route("/plan", post(post_plan))
}

/// Serves on `listener` until `shutdown` resolves.
pub async fn serve(
    listener: TcpListener,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> io::Result<()> {
    axum::serve(listener, router())
        .with_graceful_shutdown(shutdown)
        .await
}

/// Binds `addr` and serves in a background task. Returns the bound
/// address, which differs from `addr` when its port is 0.
pub async fn spawn(addr: SocketAddr) -> io::Result<(SocketAddr, JoinHandle<io::Result<()>>)> {
    let listener = TcpListener::bind(addr).await?;
    let bound = listener.local_addr()?;
    let handle = tokio::spawn(async move { axum::serve(listener, router()).await });
    Ok((bound, handle))
}

#[cfg(test)]
mod tests {
    use super::*;
    use axum::body::Body;
    use axum::http::Request;
    use http_body_util::BodyExt;
    use tower::ServiceExt;

    async fn call(method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
        let builder = Request::builder().method(method).uri(uri);
        let req = match body {
            Some(b) => builder
                .header("content-type", "application/json")
                .body(Body::from(b.to_string())),
            None => builder.body(Body::empty()),
        }
        .unwrap();
        let resp = router().oneshot(req).await.unwrap();
        let status = resp.status();
        let bytes = resp.into_body().collect().await.unwrap().to_bytes();
        (
            status,
            serde_json::from_slice(&bytes).unwrap_or(Value::Null),
        )
    }

    #[tokio::test]
    async fn health_and_listing() {
        let (s, v) = call("GET", "/health", None).await;
        assert_eq!((s, v["status"].as_str()), (StatusCode::OK, Some("ok")));
        let (s, v) = call("GET", "/scenarios", None).await;
        assert_eq!(s, StatusCode::OK);
        assert_eq!(
            v["scenarios"].as_array().unwrap().len(),
            BUILTIN_SCENARIOS.len()
        );
        let (s, v) = call("GET", "/scenarios/kill-leader", None).await;
        assert_eq!(
            (s, v["name"].as_str()),
            (StatusCode::OK, Some("kill-leader"))
        );
        let (s, v) = call("GET", "/scenarios/nope", None).await;
        assert_eq!(s, StatusCode::NOT_FOUND);
        assert!(v["error"].as_str().unwrap().contains("nope"));
    }

    #[tokio::test]
    async fn availability_endpoint() {
        let (s, v) = call(
            "POST",
            "/availability",
            Some(json!({"mtbf_hours": 8760.0, "mttr_hours": 7.5})),
        )
        .await;
        assert_eq!(s, StatusCode::OK);
        assert!((v["availability"].as_f64().unwrap() - 8760.0 / 8767.5).abs() < 1e-15);
        let (s, _) = call(
            "POST",
            "/availability",
            Some(json!({"mtbf_hours": 0.0, "mttr_hours": 1.0})),
        )
        .await;
        assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    }

    #[tokio::test]
    async fn malformed_bodies_get_json_errors() {
        let (s, v) = call("POST", "/availability", Some(json!({"mtbf_hours": "x"}))).await;
        assert!(s.is_client_error());
        assert!(v["error"].is_string());
        let (s, v) = call(
            "POST",
            "/runs",
            Some(json!({"scenario": {"bogus": 1}, "seed": 1})),
        )
        .await;
        assert!(s.is_client_error());
        assert!(v["error"].is_string());
    }

    #[tokio::test]
    async fn invalid_scenario_is_rejected() {
        let scenario = json!({"workloads": [{"application": "ghost", "total_connections": 1,
            "requests_per_connection": 1, "rate": {"low": 1, "high": 1}}]});
        let (s, v) = call(
            "POST",
            "/runs",
            Some(json!({"scenario": scenario, "seed": 1})),
        )
        .await;
        assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
        assert!(v["error"].as_str().unwrap().contains("ghost"));
    }

    #[tokio::test]
    async fn run_matches_the_library() {
        let scenario = Scenario::builtin("overhead-baseline").unwrap();
        let (s, v) = call(
            "POST",
            "/runs",
            Some(json!({"scenario": scenario, "seed": 5})),
        )
        .await;
        assert_eq!(s, StatusCode::OK);
        let bundle: RunBundle = serde_json::from_value(v).unwrap();
        let direct = run_scenario(&scenario, 5).unwrap();
        assert_eq!(bundle.events_ndjson, direct.log.to_ndjson());
        assert_eq!(bundle.report.aggregate, direct.report.aggregate);
    }

    #[tokio::test]
    async fn recovery_and_plan() {
        let scenario = Scenario::builtin("kill-follower").unwrap();
        let (s, v) = call(
            "POST",
            "/recovery",
            Some(json!({"scenario": scenario, "seed": 1})),
        )
        .await;
        assert_eq!(s, StatusCode::OK);
        assert_eq!(v["summary"]["completed"], 1);
        let descriptor = cirrus_core::manifest::THREE_TIER_DESCRIPTOR;
        let (s, v) = call("POST", "/plan", Some(json!({"descriptor": descriptor}))).await;
        assert_eq!(s, StatusCode::OK);
        assert_eq!(v["manifest"]["name"], "DistributedApplication");
        let (s, _) = call("POST", "/plan", Some(json!({"descriptor": "<composite/>"}))).await;
        assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    }

    #[tokio::test]
    async fn overhead_endpoint() {
        let base = run_scenario(&Scenario::builtin("overhead-baseline").unwrap(), 1)
            .unwrap()
            .report;
        let (s, v) = call(
            "POST",
            "/overhead",
            Some(json!({"baseline": base, "platform": base})),
        )
        .await;
        assert_eq!(s, StatusCode::OK);
        assert_eq!(v["overhead"], 0.0);
        let mut other = base.clone();
        other.seed = 9;
        let (s, _) = call(
            "POST",
            "/overhead",
            Some(json!({"baseline": base, "platform": other})),
        )
        .await;
        assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    }
}
