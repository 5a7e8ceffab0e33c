//! Thin async client for the cirrus HTTP service.

use cirrus_core::api::{
    ApiError, AvailabilityRequest, OverheadRequest, PlanRequest, PlanResponse, RecoveryResponse,
    RunBundle, RunRequest, ScenarioList,
};
use cirrus_core::harness::{AvailabilityReport, OverheadReport, RunReport, Scenario};
use serde::de::DeserializeOwned;
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("invalid server URL `{0}`")]
    Url(String),
    #[error("request failed: {0}")]
    Transport(#[from] reqwest::Error),
    #[error("server answered {status}: {message}")]
    Api { status: u16, message: String },
}

#[derive(Debug, Clone)]
pub struct Client {
    base: reqwest::Url,
    http: reqwest::Client,
}

impl Client {
    /// `base` is the service root, e.g. `http://127.0.0.1:8080`.
    pub fn new(base: &str) -> Result<Self, ClientError> {
        let mut base = reqwest::Url::parse(base).map_err(|_| ClientError::Url(base.to_string()))?;
        if !matches!(base.scheme(), "http" | "https") || base.cannot_be_a_base() {
            return Err(ClientError::Url(base.to_string()));
        }
        if !base.path().ends_with('/') {
            let path = format!("{}/", base.path());
            base.set_path(&path);
        }
        Ok(Client {
            base,
            http: reqwest::Client::new(),
        })
    }

    pub fn base_url(&self) -> &str {
        self.base.as_str()
    }

    fn url(&self, path: &str) -> Result<reqwest::Url, ClientError> {
        self.base
            .join(path)
            .map_err(|_| ClientError::Url(format!("{}{path}", self.base)))
    }

    async fn decode<T: DeserializeOwned>(resp: reqwest::Response) -> Result<T, ClientError> {
        let status = resp.status();
        if status.is_success() {
            return Ok(resp.json().await?);
        }
        let text = resp.text().await?;
        let message = serde_json::from_str::<ApiError>(&text)
            .map(|e| e.error)
            .unwrap_or(text);
        Err(ClientError::Api {
            status: status.as_u16(),
            message,
        })
    }

    async fn get<T: DeserializeOwned>(&self, path: &str) -> Result<T, ClientError> {
        Self::decode(self.http.get(self.url(path)?).send().await?).await
    }

    async fn post<B: Serialize, T: DeserializeOwned>(
        &self,
        path: &str,
        body: &B,
    ) -> Result<T, ClientError> {
        Self::decode(self.http.post(self.url(path)?).json(body).send().await?).await
    }

    pub async fn health(&self) -> Result<serde_json::Value, ClientError> {
        self.get("health").await
    }

    pub async fn scenarios(&self) -> Result<Vec<String>, ClientError> {
        Ok(self.get::<ScenarioList>("scenarios").await?.scenarios)
    }

    pub async fn scenario(&self, name: &str) -> Result<Scenario, ClientError> {
        self.get(&format!("scenarios/{name}")).await
    }

    pub async fn run(&self, scenario: &Scenario, seed: u64) -> Result<RunBundle, ClientError> {
        self.post(
            "runs",
            &RunRequest {
                scenario: scenario.clone(),
                seed,
            },
        )
        .await
    }

    pub async fn recovery(
        &self,
        scenario: &Scenario,
        seed: u64,
    ) -> Result<RecoveryResponse, ClientError> {
        self.post(
            "recovery",
            &RunRequest {
                scenario: scenario.clone(),
                seed,
            },
        )
        .await
    }

    pub async fn availability(
        &self,
        mtbf_hours: f64,
        mttr_hours: f64,
    ) -> Result<AvailabilityReport, ClientError> {
        self.post(
            "availability",
            &AvailabilityRequest {
                mtbf_hours,
                mttr_hours,
            },
        )
        .await
    }

    pub async fn overhead(
        &self,
        baseline: &RunReport,
        platform: &RunReport,
    ) -> Result<OverheadReport, ClientError> {
        self.post(
            "overhead",
            &OverheadRequest {
                baseline: baseline.clone(),
                platform: platform.clone(),
            },
        )
        .await
    }

    pub async fn plan(&self, request: &PlanRequest) -> Result<PlanResponse, ClientError> {
        self.post("plan", request).await
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn base_urls() {
        assert_eq!(
            Client::new("http://h:1")
                .unwrap()
                .url("runs")
                .unwrap()
                .as_str(),
            "http://h:1/runs"
        );
        assert_eq!(
            Client::new("http://h:1/api")
                .unwrap()
                .url("runs")
                .unwrap()
                .as_str(),
            "http://h:1/api/runs"
        );
        assert!(matches!(Client::new("not a url"), Err(ClientError::Url(_))));
        assert!(matches!(Client::new("ftp://h"), Err(ClientError::Url(_))));
    }
}
