//! Uniform access to language-model completions.
//!
//! Every agent-role call and every optimizer call goes through [`Gateway`],
//! which owns the response cache, the retry policy and (optionally) a
//! fixture recorder. The backend behind it is either a remote
//! chat-completion endpoint or a scripted fixture replayer.

mod fixtures;
mod remote;

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::domain::AgentRole;
use crate::error::{Error, Result};
use crate::io;

pub use fixtures::{FixtureRecord, FixtureStore, ScriptedBackend};
pub use remote::RemoteBackend;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelTarget {
    Agent { role: AgentRole },
    Optimizer,
}

impl ModelTarget {
    pub fn agent(role: AgentRole) -> Self {
        ModelTarget::Agent { role }
    }

    /// `agent:<role>` or `optimizer`; used in cache keys and fixture rules.
    pub fn label(&self) -> String {
        match self {
            ModelTarget::Agent { role } => format!("agent:{role}"),
            ModelTarget::Optimizer => "optimizer".to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModelRequest {
    target: ModelTarget,
    system_prompt: String,
    user_prompt: String,
    temperature: f64,
    max_tokens: u32,
    cache_key: String,
}

impl ModelRequest {
    pub fn new(
        target: ModelTarget,
        system_prompt: impl Into<String>,
        user_prompt: impl Into<String>,
        temperature: f64,
        max_tokens: u32,
    ) -> Self {
        let system_prompt = system_prompt.into();
        let user_prompt = user_prompt.into();
        let cache_key = cache_key(&target, &system_prompt, &user_prompt, temperature);
        ModelRequest {
            target,
            system_prompt,
            user_prompt,
            temperature,
            max_tokens,
            cache_key,
        }
    }

    pub fn target(&self) -> ModelTarget {
        self.target
    }

    pub fn system_prompt(&self) -> &str {
        &self.system_prompt
    }

    pub fn user_prompt(&self) -> &str {
        &self.user_prompt
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn max_tokens(&self) -> u32 {
        self.max_tokens
    }

    pub fn cache_key(&self) -> &str {
        &self.cache_key
    }
}

/// SHA-256 over the target label, both prompts and the temperature.
pub fn cache_key(target: &ModelTarget, system: &str, user: &str, temperature: f64) -> String {
    let mut buf = Vec::with_capacity(system.len() + user.len() + 64);
    for part in [target.label().as_str(), system, user, &format!("{temperature:?}")] {
        buf.extend_from_slice(&(part.len() as u64).to_le_bytes());
        buf.extend_from_slice(part.as_bytes());
    }
    io::sha256_hex(&buf)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Remote,
    Scripted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelResponse {
    pub text: String,
    pub from_cache: bool,
    pub backend: BackendKind,
}

pub trait Backend: Send + Sync {
    fn kind(&self) -> BackendKind;

    /// Returns the completion text. Retryable failures are reported as
    /// [`Error::Transient`].
    fn complete(&self, req: &ModelRequest) -> Result<String>;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 3,
            base_delay: Duration::from_millis(500),
        }
    }
}

/// Sampling settings applied by [`Gateway::request`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingSettings {
    pub agent_temperature: f64,
    pub optimizer_temperature: f64,
    pub max_tokens: u32,
}

impl Default for SamplingSettings {
    fn default() -> Self {
        SamplingSettings {
            agent_temperature: 0.0,
            optimizer_temperature: 0.7,
            max_tokens: 1024,
        }
    }
}

struct FixtureRecorder {
    path: PathBuf,
    lock: Mutex<()>,
}

pub struct Gateway {
    backend: Arc<dyn Backend>,
    cache: Option<RwLock<HashMap<String, String>>>,
    recorder: Option<FixtureRecorder>,
    retry: RetryPolicy,
    sampling: SamplingSettings,
    backend_calls: AtomicU64,
}

impl Gateway {
    pub fn new(backend: Arc<dyn Backend>) -> Self {
        Gateway {
            backend,
            cache: Some(RwLock::new(HashMap::new())),
            recorder: None,
            retry: RetryPolicy::default(),
            sampling: SamplingSettings::default(),
            backend_calls: AtomicU64::new(0),
        }
    }

    pub fn scripted(backend: ScriptedBackend) -> Self {
        Gateway::new(Arc::new(backend))
    }

    pub fn with_cache(mut self, enabled: bool) -> Self {
        self.cache = enabled.then(|| RwLock::new(HashMap::new()));
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_sampling(mut self, sampling: SamplingSettings) -> Self {
        self.sampling = sampling;
        self
    }

    /// Enables recording mode: every fresh backend response is appended to
    /// the fixture store at `path`.
    pub fn with_recorder(mut self, path: impl Into<PathBuf>) -> Self {
        self.recorder = Some(FixtureRecorder {
            path: path.into(),
            lock: Mutex::new(()),
        });
        self
    }

    pub fn backend_kind(&self) -> BackendKind {
        self.backend.kind()
    }

    pub fn sampling(&self) -> SamplingSettings {
        self.sampling
    }

    /// Number of calls that reached the backend (cache hits excluded).
    pub fn backend_calls(&self) -> u64 {
        self.backend_calls.load(Ordering::Relaxed)
    }

    /// Builds a request with the configured temperature for `target`.
    pub fn request(&self, target: ModelTarget, system: &str, user: &str) -> ModelRequest {
        let temperature = match target {
            ModelTarget::Agent { .. } => self.sampling.agent_temperature,
            ModelTarget::Optimizer => self.sampling.optimizer_temperature,
        };
        ModelRequest::new(target, system, user, temperature, self.sampling.max_tokens)
    }

    pub fn complete(&self, req: &ModelRequest) -> Result<ModelResponse> {
        let kind = self.backend.kind();
        if let Some(cache) = &self.cache {
            let hit = cache.read().unwrap().get(req.cache_key()).cloned();
            if let Some(text) = hit {
                return Ok(ModelResponse {
                    text,
                    from_cache: true,
                    backend: kind,
                });
            }
        }

        let text = self.call_with_retry(req)?;
        if text.trim().is_empty() {
            return Err(Error::EmptyResponse);
        }
        let resp = ModelResponse {
            text,
            from_cache: false,
            backend: kind,
        };
        if self.recorder.is_some() {
            self.record_fixture(req, &resp)?;
        }
        match &self.cache {
            Some(cache) => {
                // first writer wins so every later hit sees the first response
                let mut guard = cache.write().unwrap();
                let stored = guard
                    .entry(req.cache_key().to_string())
                    .or_insert_with(|| resp.text.clone())
                    .clone();
                Ok(ModelResponse { text: stored, ..resp })
            }
            None => Ok(resp),
        }
    }

    /// Appends `(cache_key, text)` to the fixture store.
    pub fn record_fixture(&self, req: &ModelRequest, resp: &ModelResponse) -> Result<()> {
        let rec = self
            .recorder
            .as_ref()
            .ok_or_else(|| Error::Config("recording mode is not enabled".into()))?;
        let _guard = rec.lock.lock().unwrap();
        append_fixture(&rec.path, req.cache_key(), &resp.text)
    }

    fn call_with_retry(&self, req: &ModelRequest) -> Result<String> {
        let mut attempt = 0u32;
        loop {
            self.backend_calls.fetch_add(1, Ordering::Relaxed);
            match self.backend.complete(req) {
                Err(Error::Transient(msg)) => {
                    if attempt >= self.retry.max_retries {
                        return Err(Error::BackendUnavailable(format!(
                            "{msg} (after {} attempts)",
                            attempt + 1
                        )));
                    }
                    let delay = self.retry.base_delay * 2u32.saturating_pow(attempt);
                    tracing::warn!(attempt, ?delay, "transient backend failure: {msg}");
                    std::thread::sleep(delay);
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

fn append_fixture(path: &Path, cache_key: &str, text: &str) -> Result<()> {
    let record = FixtureRecord::keyed(cache_key, text);
    let mut line = serde_json::to_string(&record)?;
    line.push('\n');
    io::append_bytes(path, line.as_bytes()).map_err(|e| match e {
        Error::Io { path, source } => Error::StoreWriteFailed { path, source },
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(user: &str) -> ModelRequest {
        ModelRequest::new(ModelTarget::Optimizer, "sys", user, 0.0, 64)
    }

    #[test]
    fn cache_key_is_pure_and_sensitive() {
        assert_eq!(req("a").cache_key(), req("a").cache_key());
        assert_ne!(req("a").cache_key(), req("b").cache_key());
        let agent = ModelRequest::new(ModelTarget::agent(AgentRole::Policy), "sys", "a", 0.0, 64);
        assert_ne!(agent.cache_key(), req("a").cache_key());
        let warm = ModelRequest::new(ModelTarget::Optimizer, "sys", "a", 0.7, 64);
        assert_ne!(warm.cache_key(), req("a").cache_key());
        // max_tokens is not part of the key
        let long = ModelRequest::new(ModelTarget::Optimizer, "sys", "a", 0.0, 4096);
        assert_eq!(long.cache_key(), req("a").cache_key());
        // field boundaries are unambiguous
        let shifted = ModelRequest::new(ModelTarget::Optimizer, "sysa", "", 0.0, 64);
        assert_ne!(shifted.cache_key(), req("a").cache_key());
    }

    #[test]
    fn scripted_replay_and_cache() {
        let r = req("q");
        let mut store = FixtureStore::default();
        store.insert(r.cache_key(), "Answer: 42");
        let gw = Gateway::scripted(ScriptedBackend::new(store, true));
        let first = gw.complete(&r).unwrap();
        assert_eq!(first.text, "Answer: 42");
        assert_eq!(first.backend, BackendKind::Scripted);
        assert!(!first.from_cache);
        let second = gw.complete(&r).unwrap();
        assert!(second.from_cache);
        assert_eq!(second.text, first.text);
        assert_eq!(gw.backend_calls(), 1);
    }

    #[test]
    fn strict_miss() {
        let gw = Gateway::scripted(ScriptedBackend::new(FixtureStore::default(), true));
        assert!(matches!(gw.complete(&req("q")), Err(Error::FixtureMiss(_))));
    }

    #[test]
    fn empty_response_is_an_error() {
        let gw = Gateway::scripted(ScriptedBackend::from_fn(|_| Some("   ".into())));
        assert!(matches!(gw.complete(&req("q")), Err(Error::EmptyResponse)));
    }

    struct Flaky {
        failures_left: Mutex<u32>,
    }

    impl Backend for Flaky {
        fn kind(&self) -> BackendKind {
            BackendKind::Remote
        }
        fn complete(&self, _req: &ModelRequest) -> Result<String> {
            let mut left = self.failures_left.lock().unwrap();
            if *left > 0 {
                *left -= 1;
                Err(Error::Transient("503".into()))
            } else {
                Ok("ok".into())
            }
        }
    }

    #[test]
    fn retries_then_gives_up() {
        let fast = RetryPolicy {
            max_retries: 2,
            base_delay: Duration::from_millis(1),
        };
        let gw = Gateway::new(Arc::new(Flaky {
            failures_left: Mutex::new(2),
        }))
        .with_retry(fast);
        assert_eq!(gw.complete(&req("q")).unwrap().text, "ok");
        assert_eq!(gw.backend_calls(), 3);

        let gw = Gateway::new(Arc::new(Flaky {
            failures_left: Mutex::new(3),
        }))
        .with_retry(fast);
        assert!(matches!(gw.complete(&req("q")), Err(Error::BackendUnavailable(_))));
    }

    #[test]
    fn record_then_replay() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fixtures.jsonl");
        let live = Gateway::scripted(ScriptedBackend::from_fn(|r| Some(format!("echo {}", r.user_prompt()))))
            .with_recorder(&path);
        live.complete(&req("one")).unwrap();
        live.complete(&req("two")).unwrap();
        live.complete(&req("two")).unwrap(); // cache hit, not re-recorded
        let store = FixtureStore::load(&path).unwrap();
        assert_eq!(store.len(), 2);

        let replay = Gateway::scripted(ScriptedBackend::new(store, true));
        assert_eq!(replay.complete(&req("two")).unwrap().text, "echo two");
    }

    #[test]
    fn record_to_unwritable_store() {
        let gw = Gateway::scripted(ScriptedBackend::from_fn(|_| Some("x".into())))
            .with_recorder("/nonexistent-dir/for/fixtures.jsonl");
        let r = req("q");
        let resp = ModelResponse {
            text: "x".into(),
            from_cache: false,
            backend: BackendKind::Scripted,
        };
        assert!(matches!(
            gw.record_fixture(&r, &resp),
            Err(Error::StoreWriteFailed { .. })
        ));
        assert!(matches!(gw.complete(&r), Err(Error::StoreWriteFailed { .. })));
    }
}
