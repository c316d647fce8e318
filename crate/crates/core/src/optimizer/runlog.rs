use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::domain::{AgentRole, ErrorCategory, OptimizerConfig, PromptSet, SampleOutcome};
use crate::error::{Error, Result};
use crate::io;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalPhase {
    /// Parent on its feedback minibatch.
    Minibatch,
    /// Candidate on the shared ranking subset.
    Rank,
    /// Final beam member on the full training set.
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub sample_id: String,
    pub accuracy: bool,
    pub score: u8,
    pub category: ErrorCategory,
    pub reward: f64,
}

impl From<&SampleOutcome> for SampleScore {
    fn from(o: &SampleOutcome) -> Self {
        SampleScore {
            sample_id: o.sample_id.clone(),
            accuracy: o.accuracy,
            score: o.assessment.score,
            category: o.assessment.category,
            reward: o.reward,
        }
    }
}

/// Append-only run log line. Carries no wall-clock data so identical runs
/// produce identical bytes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum RunEvent {
    Start {
        p0: String,
        train_size: usize,
        eval_subset: Vec<String>,
        config: OptimizerConfig,
    },
    Evaluation {
        iteration: u32,
        prompt_id: String,
        phase: EvalPhase,
        reward: f64,
        mean_accuracy: f64,
        samples: Vec<SampleScore>,
    },
    Feedback {
        iteration: u32,
        prompt_id: String,
        error_samples: Vec<String>,
    },
    Suggestion {
        iteration: u32,
        prompt_id: String,
        text: String,
    },
    Edit {
        iteration: u32,
        parent_id: String,
        child_id: String,
        changed_roles: Vec<AgentRole>,
    },
    ExpansionFailed {
        iteration: u32,
        prompt_id: String,
        error: String,
    },
    CandidateFailed {
        iteration: u32,
        prompt_id: String,
        error: String,
    },
    Selection {
        iteration: u32,
        beam: Vec<RankedId>,
        pool_size: usize,
    },
    Final {
        prompt_id: String,
        reward: Option<f64>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedId {
    pub id: String,
    pub reward: f64,
}

/// Run log: kept in memory, mirrored to `run_log.jsonl` when a run
/// directory is set.
#[derive(Debug, Default)]
pub struct RunLog {
    path: Option<PathBuf>,
    bytes: Vec<u8>,
}

impl RunLog {
    pub fn in_memory() -> Self {
        RunLog::default()
    }

    /// Starts a fresh log file.
    pub fn create(path: &Path) -> Result<Self> {
        io::write_atomic(path, b"")?;
        Ok(RunLog {
            path: Some(path.to_path_buf()),
            bytes: Vec::new(),
        })
    }

    /// Reopens an existing log, dropping anything past `len` bytes (events
    /// of an iteration that never reached its checkpoint).
    pub fn resume(path: &Path, len: u64) -> Result<Self> {
        let mut bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if (bytes.len() as u64) < len {
            return Err(Error::Validation(format!(
                "run log {} is shorter than its checkpoint says",
                path.display()
            )));
        }
        bytes.truncate(len as usize);
        let file = OpenOptions::new()
            .write(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        file.set_len(len).map_err(|e| Error::io(path, e))?;
        Ok(RunLog {
            path: Some(path.to_path_buf()),
            bytes,
        })
    }

    pub fn append(&mut self, events: &[RunEvent]) -> Result<()> {
        let chunk = io::to_jsonl(events)?;
        if let Some(path) = &self.path {
            io::append_bytes(path, chunk.as_bytes())?;
        }
        self.bytes.extend_from_slice(chunk.as_bytes());
        Ok(())
    }

    pub fn len(&self) -> u64 {
        self.bytes.len() as u64
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn events(&self) -> Result<Vec<RunEvent>> {
        std::str::from_utf8(&self.bytes)
            .map_err(|e| Error::Validation(e.to_string()))?
            .lines()
            .map(|l| serde_json::from_str(l).map_err(Error::from))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeamEntry {
    pub prompts: PromptSet,
    /// `None` only for an initial prompt set that has not been ranked.
    pub reward: Option<f64>,
    pub mean_accuracy: Option<f64>,
    pub eval_count: usize,
    /// Creation order within the run; the initial set is 0.
    pub generation: u64,
}

/// Seed plus the next iteration to run; minibatch draws are derived from
/// both, so this is all that is needed to resume sampling.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub next_iteration: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeamState {
    pub iteration: u32,
    pub beam: Vec<BeamEntry>,
    pub candidates: Vec<PromptSet>,
    pub rng_state: RngState,
    pub eval_subset: Vec<String>,
    pub next_generation: u64,
    pub log_len: u64,
}

impl BeamState {
    pub fn load(path: &Path) -> Result<Self> {
        io::read_json(path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_json(path, self)
    }
}

pub fn checkpoint_path(run_dir: &Path, iteration: u32) -> PathBuf {
    run_dir.join("checkpoints").join(format!("iter-{iteration:04}.json"))
}
