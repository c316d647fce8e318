//! Reviewer queue over an instance store directory.
//!
//! Layout: `instances.jsonl` and `pool.jsonl` are snapshots, `events.jsonl`
//! is the append-only commit log replayed on open, and `advisory.jsonl`
//! keeps verdicts that arrived after an instance was decided. Leases live
//! in memory only, so a restart drops them.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gateway::Gateway;
use crate::io;
use crate::synthesis::{
    apply_verdict, retention_stats, HqaInstance, InstanceStatus, InstructionProposal, ProposalPool, RetentionStats,
    ReviewVerdict,
};

pub const DEFAULT_LEASE_TTL_SECS: i64 = 15 * 60;

pub const INSTANCES_FILE: &str = "instances.jsonl";
pub const POOL_FILE: &str = "pool.jsonl";
pub const EVENTS_FILE: &str = "events.jsonl";
pub const ADVISORY_FILE: &str = "advisory.jsonl";

/// Header carrying the shared reviewer token.
pub const TOKEN_HEADER: &str = "x-review-token";
/// Environment variable holding the shared reviewer token.
pub const TOKEN_ENV: &str = "CHARTFLOW_REVIEW_TOKEN";

/// Body of `POST /api/verdict`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerdictRequest {
    pub instance_id: String,
    pub verdict: ReviewVerdict,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApiErrorKind {
    LeaseConflict,
    AlreadyReviewed,
    UnknownInstance,
    Validation,
    StoreUnavailable,
    BackendUnavailable,
    Unauthorized,
    Internal,
}

impl ApiErrorKind {
    pub fn of(err: &Error) -> Self {
        match err {
            Error::LeaseConflict { .. } => ApiErrorKind::LeaseConflict,
            Error::AlreadyReviewed(_) => ApiErrorKind::AlreadyReviewed,
            Error::UnknownInstance(_) => ApiErrorKind::UnknownInstance,
            Error::Validation(_) => ApiErrorKind::Validation,
            Error::StoreUnavailable(_) | Error::Io { .. } | Error::Record { .. } => ApiErrorKind::StoreUnavailable,
            Error::BackendUnavailable(_) | Error::Transient(_) | Error::FixtureMiss(_) => {
                ApiErrorKind::BackendUnavailable
            }
            _ => ApiErrorKind::Internal,
        }
    }
}

/// Error body returned by the review service.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiError {
    pub kind: ApiErrorKind,
    pub message: String,
}

impl From<&Error> for ApiError {
    fn from(err: &Error) -> Self {
        ApiError {
            kind: ApiErrorKind::of(err),
            message: err.to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum ReviewEvent {
    Committed {
        instance: Box<HqaInstance>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        added: Option<InstructionProposal>,
    },
    /// Verdict received after the instance was already decided.
    Advisory {
        instance_id: String,
        verdict: ReviewVerdict,
    },
}

/// Committed events in order. A final line without its newline is the
/// remnant of an interrupted append and is ignored.
fn read_events(path: &Path) -> Result<Vec<ReviewEvent>> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::StoreUnavailable(format!("{}: {e}", path.display())))?;
    let complete = match text.rfind('\n') {
        Some(i) => &text[..=i],
        None => "",
    };
    complete
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::StoreUnavailable(format!("{} line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct Lease {
    reviewer: String,
    expires: DateTime<Utc>,
}

/// Read-only view of the store.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub instances: Vec<HqaInstance>,
    pub pool: ProposalPool,
    pub stats: RetentionStats,
}

impl Snapshot {
    pub fn instance(&self, id: &str) -> Option<&HqaInstance> {
        self.instances.iter().find(|i| i.id == id)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubmitOutcome {
    pub instance: HqaInstance,
    pub stats: RetentionStats,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub added_proposal: Option<InstructionProposal>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

#[derive(Debug)]
pub struct ReviewStore {
    dir: PathBuf,
    instances: Vec<HqaInstance>,
    pool: ProposalPool,
    leases: HashMap<String, Lease>,
    lease_ttl: Duration,
    retry_limit: u32,
}

fn unavailable(e: Error) -> Error {
    match e {
        Error::StoreUnavailable(_) => e,
        other => Error::StoreUnavailable(other.to_string()),
    }
}

impl ReviewStore {
    /// Opens a store directory, replays committed events and compacts them
    /// into fresh snapshots.
    pub fn open(dir: &Path) -> Result<Self> {
        let mut store = Self::load(dir)?;
        store.compact()?;
        Ok(store)
    }

    /// Current state of a store directory. Writes nothing, so it is safe
    /// while a service owns the store.
    pub fn read_snapshot(dir: &Path) -> Result<Snapshot> {
        Ok(Self::load(dir)?.snapshot())
    }

    fn load(dir: &Path) -> Result<Self> {
        let instances_path = dir.join(INSTANCES_FILE);
        if !instances_path.exists() {
            return Err(Error::StoreUnavailable(format!(
                "{} not found",
                instances_path.display()
            )));
        }
        let instances: Vec<HqaInstance> = io::read_jsonl(&instances_path).map_err(unavailable)?;
        let pool_path = dir.join(POOL_FILE);
        let pool = if pool_path.exists() {
            ProposalPool::load(&pool_path).map_err(unavailable)?
        } else {
            ProposalPool::default()
        };
        let mut store = ReviewStore {
            dir: dir.to_path_buf(),
            instances,
            pool,
            leases: HashMap::new(),
            lease_ttl: Duration::seconds(DEFAULT_LEASE_TTL_SECS),
            retry_limit: 3,
        };
        let events_path = dir.join(EVENTS_FILE);
        if events_path.exists() {
            for ev in read_events(&events_path)? {
                store.replay(ev)?;
            }
        }
        Ok(store)
    }

    /// Writes a new store from freshly generated instances and a pool.
    pub fn create(dir: &Path, instances: &[HqaInstance], pool: &ProposalPool) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        io::write_jsonl(&dir.join(INSTANCES_FILE), instances)?;
        pool.save(&dir.join(POOL_FILE))?;
        io::write_atomic(&dir.join(EVENTS_FILE), b"")?;
        ReviewStore::open(dir)
    }

    pub fn with_lease_ttl(mut self, ttl: Duration) -> Self {
        self.lease_ttl = ttl;
        self
    }

    pub fn with_retry_limit(mut self, retry_limit: u32) -> Self {
        self.retry_limit = retry_limit;
        self
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn replay(&mut self, ev: ReviewEvent) -> Result<()> {
        if let ReviewEvent::Committed { instance, added } = ev {
            let slot = self
                .instances
                .iter_mut()
                .find(|i| i.id == instance.id)
                .ok_or_else(|| Error::StoreUnavailable(format!("event for unknown instance {}", instance.id)))?;
            *slot = *instance;
            if let Some(p) = added {
                self.pool.add(p)?;
            }
        }
        Ok(())
    }

    /// Folds the event log into the snapshots. Replaying an event twice is
    /// harmless, so a crash between the two steps loses nothing.
    pub fn compact(&mut self) -> Result<()> {
        let map = |e: Error| Error::StoreUnavailable(e.to_string());
        io::write_jsonl(&self.dir.join(INSTANCES_FILE), &self.instances).map_err(map)?;
        self.pool.save(&self.dir.join(POOL_FILE)).map_err(map)?;
        io::write_atomic(&self.dir.join(EVENTS_FILE), b"").map_err(map)?;
        Ok(())
    }

    pub fn stats(&self) -> RetentionStats {
        retention_stats(&self.instances)
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot {
            instances: self.instances.clone(),
            pool: self.pool.clone(),
            stats: self.stats(),
        }
    }

    pub fn instances(&self) -> &[HqaInstance] {
        &self.instances
    }

    pub fn pool(&self) -> &ProposalPool {
        &self.pool
    }

    fn lease_holder(&self, id: &str, now: DateTime<Utc>) -> Option<&str> {
        self.leases
            .get(id)
            .filter(|l| l.expires > now)
            .map(|l| l.reviewer.as_str())
    }

    /// Oldest pending instance that is free or already leased to
    /// `reviewer`; leases it for the TTL.
    pub fn next_pending(&mut self, reviewer: &str, now: DateTime<Utc>) -> Option<HqaInstance> {
        let found = self
            .instances
            .iter()
            .filter(|i| i.status == InstanceStatus::Pending)
            .find(|i| self.lease_holder(&i.id, now).is_none_or(|h| h == reviewer))?
            .clone();
        self.leases.insert(
            found.id.clone(),
            Lease {
                reviewer: reviewer.to_string(),
                expires: now + self.lease_ttl,
            },
        );
        Some(found)
    }

    /// Commits the first verdict on an instance. Repeating the committed
    /// verdict returns the committed state; a different later verdict is
    /// logged as advisory and rejected with `AlreadyReviewed`.
    pub fn submit_verdict(
        &mut self,
        gateway: &Gateway,
        instance_id: &str,
        verdict: ReviewVerdict,
        now: DateTime<Utc>,
    ) -> Result<SubmitOutcome> {
        let current = self
            .instances
            .iter()
            .find(|i| i.id == instance_id)
            .cloned()
            .ok_or_else(|| Error::UnknownInstance(instance_id.to_string()))?;
        verdict.validate()?;
        if current.status != InstanceStatus::Pending {
            if current.verdicts.first().is_some_and(|v| v.same_decision(&verdict)) {
                return Ok(SubmitOutcome {
                    instance: current,
                    stats: self.stats(),
                    added_proposal: None,
                    warning: None,
                });
            }
            io::append_jsonl(
                &self.dir.join(ADVISORY_FILE),
                &ReviewEvent::Advisory {
                    instance_id: instance_id.to_string(),
                    verdict,
                },
            )
            .map_err(unavailable)?;
            return Err(Error::AlreadyReviewed(instance_id.to_string()));
        }
        if let Some(holder) = self.lease_holder(instance_id, now) {
            if holder != verdict.reviewer {
                return Err(Error::LeaseConflict {
                    instance: instance_id.to_string(),
                    holder: holder.to_string(),
                });
            }
        }
        let effect = apply_verdict(gateway, &current, &verdict, &self.pool, self.retry_limit)?;
        let event = ReviewEvent::Committed {
            instance: Box::new(effect.instance.clone()),
            added: effect.added.clone(),
        };
        self.append(&event)?;
        self.replay(event)?;
        self.leases.remove(instance_id);
        Ok(SubmitOutcome {
            instance: effect.instance,
            stats: self.stats(),
            added_proposal: effect.added,
            warning: effect.warning,
        })
    }

    fn append(&self, ev: &ReviewEvent) -> Result<()> {
        io::append_jsonl(&self.dir.join(EVENTS_FILE), ev).map_err(|e| Error::StoreUnavailable(e.to_string()))
    }
}
