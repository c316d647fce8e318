use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Backend, BackendKind, ModelRequest};
use crate::error::{Error, Result};
use crate::io;

/// One fixture line. Recorded fixtures carry a `cache_key`; hand-written
/// ones may instead match on `target` and a `user_prompt` prefix, which is
/// only consulted in permissive mode.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_key: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prefix: Option<String>,
    pub text: String,
}

impl FixtureRecord {
    pub fn keyed(cache_key: &str, text: &str) -> Self {
        FixtureRecord {
            cache_key: Some(cache_key.to_string()),
            target: None,
            prefix: None,
            text: text.to_string(),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct FixtureStore {
    by_key: HashMap<String, String>,
    rules: Vec<FixtureRecord>,
}

impl FixtureStore {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::from_records(io::read_jsonl(path)?))
    }

    /// Loads `path`, or returns an empty store if it does not exist.
    pub fn load_or_empty(path: &Path) -> Result<Self> {
        if path.exists() {
            Self::load(path)
        } else {
            Ok(Self::default())
        }
    }

    pub fn from_records(records: Vec<FixtureRecord>) -> Self {
        let mut store = FixtureStore::default();
        for r in records {
            match &r.cache_key {
                Some(k) => {
                    store.by_key.entry(k.clone()).or_insert(r.text);
                }
                None => store.rules.push(r),
            }
        }
        store
    }

    pub fn insert(&mut self, cache_key: &str, text: &str) {
        self.by_key
            .entry(cache_key.to_string())
            .or_insert_with(|| text.to_string());
    }

    pub fn len(&self) -> usize {
        self.by_key.len() + self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn lookup(&self, req: &ModelRequest, strict: bool) -> Option<&str> {
        if let Some(text) = self.by_key.get(req.cache_key()) {
            return Some(text);
        }
        if strict {
            return None;
        }
        let label = req.target().label();
        self.rules
            .iter()
            .find(|r| {
                r.target.as_deref().is_none_or(|t| t == label)
                    && req.user_prompt().starts_with(r.prefix.as_deref().unwrap_or(""))
            })
            .map(|r| r.text.as_str())
    }
}

type Responder = Box<dyn Fn(&ModelRequest) -> Option<String> + Send + Sync>;

enum Source {
    Store { store: FixtureStore, strict: bool },
    Func(Responder),
}

/// Deterministic backend: replays fixtures, or answers through a pure
/// function of the request.
pub struct ScriptedBackend {
    source: Source,
}

impl ScriptedBackend {
    pub fn new(store: FixtureStore, strict: bool) -> Self {
        ScriptedBackend {
            source: Source::Store { store, strict },
        }
    }

    pub fn from_fn(f: impl Fn(&ModelRequest) -> Option<String> + Send + Sync + 'static) -> Self {
        ScriptedBackend {
            source: Source::Func(Box::new(f)),
        }
    }
}

impl Backend for ScriptedBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Scripted
    }

    fn complete(&self, req: &ModelRequest) -> Result<String> {
        let found = match &self.source {
            Source::Store { store, strict } => store.lookup(req, *strict).map(str::to_string),
            Source::Func(f) => f(req),
        };
        found.ok_or_else(|| Error::FixtureMiss(req.cache_key().to_string()))
    }
}
