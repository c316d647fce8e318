//! Typed client for the review service API.

use chartflow_core::review::{ApiError, ApiErrorKind, SubmitOutcome, VerdictRequest, TOKEN_HEADER};
use chartflow_core::synthesis::{HqaInstance, InstructionProposal, RetentionStats, ReviewVerdict};
use reqwest::{RequestBuilder, StatusCode};
use serde::de::DeserializeOwned;

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("{status}: {}", .error.message)]
    Api { status: u16, error: ApiError },

    #[error("request failed: {0}")]
    Http(#[from] reqwest::Error),
}

impl ClientError {
    pub fn kind(&self) -> Option<ApiErrorKind> {
        match self {
            ClientError::Api { error, .. } => Some(error.kind),
            ClientError::Http(_) => None,
        }
    }
}

pub type Result<T> = std::result::Result<T, ClientError>;

#[derive(Clone, Debug)]
pub struct ReviewClient {
    base: String,
    token: Option<String>,
    http: reqwest::Client,
}

impl ReviewClient {
    /// `base` is the service root, e.g. `http://127.0.0.1:8080`.
    pub fn new(base: impl Into<String>, token: Option<String>) -> Self {
        ReviewClient {
            base: base.into().trim_end_matches('/').to_string(),
            token,
            http: reqwest::Client::new(),
        }
    }

    fn url(&self, path: &str) -> String {
        format!("{}/api/{path}", self.base)
    }

    fn auth(&self, req: RequestBuilder) -> RequestBuilder {
        match &self.token {
            Some(t) => req.header(TOKEN_HEADER, t),
            None => req,
        }
    }

    async fn send(&self, req: RequestBuilder) -> Result<reqwest::Response> {
        let resp = self.auth(req).send().await?;
        let status = resp.status();
        if status.is_success() {
            return Ok(resp);
        }
        let text = resp.text().await.unwrap_or_default();
        let error = serde_json::from_str(&text).unwrap_or(ApiError {
            kind: ApiErrorKind::Internal,
            message: if text.is_empty() { status.to_string() } else { text },
        });
        Err(ClientError::Api {
            status: status.as_u16(),
            error,
        })
    }

    async fn get<T: DeserializeOwned>(&self, path: &str) -> Result<T> {
        Ok(self.send(self.http.get(self.url(path))).await?.json().await?)
    }

    /// Leases the next pending instance to `reviewer`; `None` when the
    /// queue is empty or everything is leased to others.
    pub async fn next(&self, reviewer: &str) -> Result<Option<HqaInstance>> {
        let resp = self
            .send(self.http.get(self.url("queue/next")).query(&[("reviewer", reviewer)]))
            .await?;
        if resp.status() == StatusCode::NO_CONTENT {
            return Ok(None);
        }
        Ok(Some(resp.json().await?))
    }

    pub async fn submit(&self, instance_id: &str, verdict: ReviewVerdict) -> Result<SubmitOutcome> {
        let body = VerdictRequest {
            instance_id: instance_id.to_string(),
            verdict,
        };
        Ok(self
            .send(self.http.post(self.url("verdict")).json(&body))
            .await?
            .json()
            .await?)
    }

    pub async fn stats(&self) -> Result<RetentionStats> {
        self.get("stats").await
    }

    pub async fn proposals(&self) -> Result<Vec<InstructionProposal>> {
        self.get("proposals").await
    }

    pub async fn instance(&self, id: &str) -> Result<HqaInstance> {
        self.get(&format!("instances/{id}")).await
    }
}
