use std::path::PathBuf;

use crate::domain::ChartType;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("model backend unavailable: {0}")]
    BackendUnavailable(String),

    /// Retryable remote failure; surfaces as `BackendUnavailable` once retries run out.
    #[error("transient backend failure: {0}")]
    Transient(String),

    #[error("no fixture recorded for cache key {0}")]
    FixtureMiss(String),

    #[error("model returned an empty response")]
    EmptyResponse,

    #[error("failed to write fixture store {path}: {source}")]
    StoreWriteFailed {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("could not parse a tool plan after {attempts} attempts: {detail}")]
    PlanParseError { attempts: u32, detail: String },

    #[error("program exceeded the {timeout_ms} ms limit")]
    ExecutorTimeout { timeout_ms: u64 },

    #[error("program exited with {code:?}: {stderr}")]
    ExecutorFailure { code: Option<i32>, stderr: String },

    #[error("decline rate is undefined when the factoid accuracy is zero")]
    UndefinedDecline,

    #[error("could not parse a trajectory score after {attempts} attempts")]
    ScoreParseError { attempts: u32 },

    #[error("alpha must lie strictly inside (0, 1), got {0}")]
    InvalidAlpha(f64),

    #[error("cannot aggregate rewards over an empty outcome list")]
    EmptyOutcomes,

    #[error("could not parse a suggestion after {attempts} attempts")]
    SuggestionParseError { attempts: u32 },

    #[error("obtained {obtained} of {requested} valid prompt edits")]
    EditParseError { requested: usize, obtained: usize },

    #[error("run interrupted; last checkpoint is intact")]
    Interrupted,

    #[error("chart type {chart_type} has {found} seed proposals, at least 4 are required")]
    InsufficientSeeds { chart_type: ChartType, found: usize },

    #[error("expected exactly 3 instruction proposals, parsed {parsed}")]
    ProposalParseError { parsed: usize },

    #[error("could not parse hypothetical QA output: {0}")]
    HqaParseError(String),

    #[error("instance {slot} violates {rule}: {detail}")]
    ConstraintViolation { slot: usize, rule: String, detail: String },

    #[error("instance {0} has already been reviewed")]
    AlreadyReviewed(String),

    #[error("instance {instance} is leased to {holder}")]
    LeaseConflict { instance: String, holder: String },

    #[error("unknown instance {0}")]
    UnknownInstance(String),

    #[error("instance store unavailable: {0}")]
    StoreUnavailable(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed record in {path} line {line}: {source}")]
    Record {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
