use std::sync::OnceLock;
use std::time::Duration;

use serde_json::{json, Value};

use super::{Backend, BackendKind, ModelRequest};
use crate::error::{Error, Result};

/// Chat-completion style HTTP backend.
///
/// Sends `{model, messages: [system, user], temperature, max_tokens}` and
/// reads `choices[0].message.content`. 429 and 5xx responses and transport
/// errors are retryable.
pub struct RemoteBackend {
    url: String,
    model: String,
    token: Option<String>,
    timeout: Duration,
    // built lazily so construction is safe inside an async runtime
    client: OnceLock<reqwest::blocking::Client>,
}

impl RemoteBackend {
    pub fn new(url: impl Into<String>, model: impl Into<String>, token: Option<String>, timeout: Duration) -> Self {
        RemoteBackend {
            url: url.into(),
            model: model.into(),
            token,
            timeout,
            client: OnceLock::new(),
        }
    }

    fn client(&self) -> Result<&reqwest::blocking::Client> {
        if let Some(c) = self.client.get() {
            return Ok(c);
        }
        let built = reqwest::blocking::Client::builder()
            .timeout(self.timeout)
            .build()
            .map_err(|e| Error::BackendUnavailable(format!("http client: {e}")))?;
        Ok(self.client.get_or_init(|| built))
    }
}

impl Backend for RemoteBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Remote
    }

    fn complete(&self, req: &ModelRequest) -> Result<String> {
        let body = json!({
            "model": self.model,
            "messages": [
                {"role": "system", "content": req.system_prompt()},
                {"role": "user", "content": req.user_prompt()},
            ],
            "temperature": req.temperature(),
            "max_tokens": req.max_tokens(),
        });
        let mut call = self.client()?.post(&self.url).json(&body);
        if let Some(token) = &self.token {
            call = call.bearer_auth(token);
        }
        let resp = call
            .send()
            .map_err(|e| Error::Transient(format!("request to {}: {e}", self.url)))?;
        let status = resp.status();
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(Error::Transient(format!("{} returned {status}", self.url)));
        }
        if !status.is_success() {
            let text = resp.text().unwrap_or_default();
            return Err(Error::BackendUnavailable(format!(
                "{} returned {status}: {text}",
                self.url
            )));
        }
        let value: Value = resp
            .json()
            .map_err(|e| Error::BackendUnavailable(format!("malformed completion body: {e}")))?;
        value
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| Error::BackendUnavailable("completion body has no choices[0].message.content".into()))
    }
}
