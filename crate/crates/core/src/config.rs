//! Run configuration file (TOML).
//!
//! ```toml
//! [gateway]
//! backend = "scripted"
//! fixtures = "fixtures.jsonl"
//!
//! [engine]
//! interpreter = ["python3"]
//! program_timeout_ms = 10000
//!
//! [optimizer]
//! beam_width = 4
//! iterations = 3
//! ```
//!
//! Relative paths resolve against the directory holding the file. The API
//! token is only ever read from the environment.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::domain::OptimizerConfig;
use crate::engine::{AgentEngine, EngineConfig, ProcessExecutor};
use crate::error::{Error, Result};
use crate::feedback::DEFAULT_RUBRIC;
use crate::gateway::{FixtureStore, Gateway, RemoteBackend, RetryPolicy, SamplingSettings, ScriptedBackend};
use crate::io::sha256_hex;
use crate::synthesis::SynthesisConfig;

pub const TOKEN_ENV_DEFAULT: &str = "CHARTFLOW_API_TOKEN";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendChoice {
    #[default]
    Scripted,
    Remote,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatewaySection {
    pub backend: BackendChoice,
    /// Fixture store read by the scripted backend.
    pub fixtures: Option<PathBuf>,
    /// Scripted lookups by exact cache key only.
    pub strict: bool,
    pub cache: bool,
    /// Chat-completions endpoint of the remote backend.
    pub url: Option<String>,
    pub model: String,
    /// Name of the environment variable holding the bearer token.
    pub api_token_env: String,
    pub timeout_secs: u64,
    pub max_retries: u32,
    pub backoff_ms: u64,
    pub agent_temperature: f64,
    pub optimizer_temperature: f64,
    pub max_tokens: u32,
}

impl Default for GatewaySection {
    fn default() -> Self {
        let sampling = SamplingSettings::default();
        let retry = RetryPolicy::default();
        GatewaySection {
            backend: BackendChoice::Scripted,
            fixtures: None,
            strict: true,
            cache: true,
            url: None,
            model: "gpt-4o".into(),
            api_token_env: TOKEN_ENV_DEFAULT.into(),
            timeout_secs: 60,
            max_retries: retry.max_retries,
            backoff_ms: retry.base_delay.as_millis() as u64,
            agent_temperature: sampling.agent_temperature,
            optimizer_temperature: sampling.optimizer_temperature,
            max_tokens: sampling.max_tokens,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineSection {
    /// Command prefix running a program file, e.g. `["unshare", "-rn", "python3"]`.
    pub interpreter: Vec<String>,
    pub program_timeout_ms: u64,
    pub scratch_dir: Option<PathBuf>,
    pub max_plan_steps: usize,
    pub parse_retry_limit: u32,
}

impl Default for EngineSection {
    fn default() -> Self {
        let e = EngineConfig::default();
        EngineSection {
            interpreter: vec!["python3".into()],
            program_timeout_ms: 10_000,
            scratch_dir: None,
            max_plan_steps: e.max_plan_steps,
            parse_retry_limit: e.parse_retry_limit,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeedbackSection {
    pub rubric: Option<String>,
    pub rubric_file: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub gateway: GatewaySection,
    pub engine: EngineSection,
    pub optimizer: OptimizerConfig,
    pub feedback: FeedbackSection,
    pub synthesis: SynthesisConfig,
}

fn resolve(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p.as_mut() {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        resolve(base_dir, &mut cfg.gateway.fixtures);
        resolve(base_dir, &mut cfg.engine.scratch_dir);
        resolve(base_dir, &mut cfg.feedback.rubric_file);
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        RunConfig::from_toml(&text, base)
    }

    /// Hash of the effective configuration, for run manifests.
    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).unwrap_or_default().as_bytes())
    }

    pub fn rubric(&self) -> Result<String> {
        if let Some(path) = &self.feedback.rubric_file {
            return std::fs::read_to_string(path).map_err(|e| Error::io(path, e));
        }
        Ok(self
            .feedback
            .rubric
            .clone()
            .unwrap_or_else(|| DEFAULT_RUBRIC.to_string()))
    }

    /// Gateway for the configured backend. With `record_to` set, every
    /// backend response is appended to that fixture store.
    pub fn build_gateway(&self, record_to: Option<&Path>) -> Result<Gateway> {
        let g = &self.gateway;
        let gateway = match g.backend {
            BackendChoice::Scripted => {
                let path = g
                    .fixtures
                    .as_ref()
                    .ok_or_else(|| Error::Config("scripted backend needs gateway.fixtures".into()))?;
                Gateway::scripted(ScriptedBackend::new(FixtureStore::load(path)?, g.strict))
            }
            BackendChoice::Remote => {
                let url = g
                    .url
                    .clone()
                    .ok_or_else(|| Error::Config("remote backend needs gateway.url".into()))?;
                let token = std::env::var(&g.api_token_env).ok().filter(|t| !t.is_empty());
                Gateway::new(Arc::new(RemoteBackend::new(
                    url,
                    g.model.clone(),
                    token,
                    Duration::from_secs(g.timeout_secs),
                )))
            }
        };
        let mut gateway = gateway
            .with_cache(g.cache)
            .with_retry(RetryPolicy {
                max_retries: g.max_retries,
                base_delay: Duration::from_millis(g.backoff_ms),
            })
            .with_sampling(SamplingSettings {
                agent_temperature: g.agent_temperature,
                optimizer_temperature: g.optimizer_temperature,
                max_tokens: g.max_tokens,
            });
        if let Some(path) = record_to {
            gateway = gateway.with_recorder(path);
        }
        Ok(gateway)
    }

    pub fn build_engine(&self, gateway: Arc<Gateway>) -> Result<AgentEngine> {
        let e = &self.engine;
        if e.interpreter.is_empty() {
            return Err(Error::Config("engine.interpreter is empty".into()));
        }
        let scratch = e
            .scratch_dir
            .clone()
            .unwrap_or_else(|| std::env::temp_dir().join("chartflow-scratch"));
        std::fs::create_dir_all(&scratch).map_err(|err| Error::io(&scratch, err))?;
        let executor = ProcessExecutor::new(
            e.interpreter.clone(),
            Duration::from_millis(e.program_timeout_ms),
            scratch,
        );
        Ok(AgentEngine::new(
            gateway,
            Arc::new(executor),
            EngineConfig {
                max_plan_steps: e.max_plan_steps,
                parse_retry_limit: e.parse_retry_limit,
            },
        ))
    }
}
