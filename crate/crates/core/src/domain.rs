//! Shared value types and their invariants.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentRole {
    Policy,
    DataRetrieval,
    VisualRetrieval,
    Program,
    Solution,
}

impl AgentRole {
    pub const ALL: [AgentRole; 5] = [
        AgentRole::Policy,
        AgentRole::DataRetrieval,
        AgentRole::VisualRetrieval,
        AgentRole::Program,
        AgentRole::Solution,
    ];

    /// Roles the policy may place in a plan.
    pub const ACTIONS: [AgentRole; 4] = [
        AgentRole::DataRetrieval,
        AgentRole::VisualRetrieval,
        AgentRole::Program,
        AgentRole::Solution,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AgentRole::Policy => "policy",
            AgentRole::DataRetrieval => "data_retrieval",
            AgentRole::VisualRetrieval => "visual_retrieval",
            AgentRole::Program => "program",
            AgentRole::Solution => "solution",
        }
    }
}

impl fmt::Display for AgentRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AgentRole {
    type Err = Error;

    /// Accepts `data_retrieval`, `Data Retrieval`, `data-retrieval` and similar spellings.
    fn from_str(s: &str) -> Result<Self> {
        let norm: String = s
            .trim()
            .chars()
            .map(|c| match c {
                ' ' | '-' => '_',
                c => c.to_ascii_lowercase(),
            })
            .collect();
        let norm = norm.trim_end_matches("_model");
        AgentRole::ALL
            .into_iter()
            .find(|r| r.as_str() == norm)
            .ok_or_else(|| Error::Validation(format!("unknown agent role {s:?}")))
    }
}

/// The chain-of-tool prompts: one prompt text per agent role.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSet {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent_id: Option<String>,
    pub prompts: BTreeMap<AgentRole, String>,
    #[serde(default)]
    pub created_at_iteration: u32,
}

impl PromptSet {
    pub fn new(id: impl Into<String>, prompts: BTreeMap<AgentRole, String>) -> Result<Self> {
        let set = PromptSet {
            id: id.into(),
            parent_id: None,
            prompts,
            created_at_iteration: 0,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn get(&self, role: AgentRole) -> &str {
        self.prompts.get(&role).map(String::as_str).unwrap_or("")
    }

    pub fn validate(&self) -> Result<()> {
        if self.id.trim().is_empty() {
            return Err(Error::Validation("prompt set id is empty".into()));
        }
        for role in AgentRole::ALL {
            match self.prompts.get(&role) {
                Some(text) if !text.trim().is_empty() => {}
                Some(_) => {
                    return Err(Error::Validation(format!(
                        "prompt set {}: {role} prompt is empty",
                        self.id
                    )))
                }
                None => {
                    return Err(Error::Validation(format!(
                        "prompt set {}: missing {role} prompt",
                        self.id
                    )))
                }
            }
        }
        Ok(())
    }

    /// Roles whose text differs from `other`.
    pub fn changed_roles(&self, other: &PromptSet) -> Vec<AgentRole> {
        AgentRole::ALL
            .into_iter()
            .filter(|r| self.get(*r) != other.get(*r))
            .collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let set: PromptSet = io::read_json(path)?;
        set.validate()?;
        Ok(set)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_json(path, self)
    }
}

/// Checks ids are unique, parents exist and `parent_id` links contain no cycle.
pub fn check_lineage(sets: &[PromptSet]) -> Result<()> {
    let mut by_id: HashMap<&str, &PromptSet> = HashMap::new();
    for s in sets {
        if by_id.insert(s.id.as_str(), s).is_some() {
            return Err(Error::Validation(format!("duplicate prompt set id {}", s.id)));
        }
    }
    for s in sets {
        let mut seen = HashSet::new();
        let mut cur = s;
        while let Some(parent) = cur.parent_id.as_deref() {
            if !seen.insert(cur.id.as_str()) {
                return Err(Error::Validation(format!("lineage cycle through {}", cur.id)));
            }
            cur = by_id
                .get(parent)
                .copied()
                .ok_or_else(|| Error::Validation(format!("{} refers to unknown parent {parent}", cur.id)))?;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChartType {
    Bar,
    Line,
    Pie,
    Other,
}

impl fmt::Display for ChartType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ChartType::Bar => "bar",
            ChartType::Line => "line",
            ChartType::Pie => "pie",
            ChartType::Other => "other",
        })
    }
}

pub type DataRecord = serde_json::Map<String, serde_json::Value>;

/// Structured chart annotation: title plus data records, optionally with a
/// pre-extracted table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChartContext {
    #[serde(rename = "type")]
    pub chart_type: ChartType,
    pub title: String,
    pub records: Vec<DataRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub table_text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
}

impl ChartContext {
    pub fn validate(&self) -> Result<()> {
        if self.title.trim().is_empty() {
            return Err(Error::Validation("chart metadata has no title".into()));
        }
        if self.records.is_empty() {
            return Err(Error::Validation(format!("chart {:?} has no data records", self.title)));
        }
        if matches!(&self.table_text, Some(t) if t.trim().is_empty()) {
            return Err(Error::Validation(format!(
                "chart {:?} has an empty table_text",
                self.title
            )));
        }
        Ok(())
    }

    /// Attribute names across all records, in first-seen order.
    pub fn field_names(&self) -> Vec<String> {
        let mut names: Vec<String> = Vec::new();
        for rec in &self.records {
            for key in rec.keys() {
                if !names.iter().any(|n| n == key) {
                    names.push(key.clone());
                }
            }
        }
        names
    }

    /// General description of the chart, e.g. `a bar chart titled "Sales"`.
    pub fn chart_description(&self) -> String {
        format!("a {} chart titled {:?}", self.chart_type, self.title)
    }

    /// Dictionary-style listing of the record attributes.
    pub fn field_description(&self) -> String {
        let fields: Vec<String> = self
            .field_names()
            .into_iter()
            .map(|name| format!("\"{name}\": <{name}>"))
            .collect();
        format!("{{{}}}", fields.join(", "))
    }

    /// Header row plus one row per record, cells joined by `" | "`.
    pub fn render_table(&self) -> String {
        let fields = self.field_names();
        let mut lines = vec![fields.join(" | ")];
        for rec in &self.records {
            let row: Vec<String> = fields
                .iter()
                .map(|f| rec.get(f).map(cell_text).unwrap_or_default())
                .collect();
            lines.push(row.join(" | "));
        }
        lines.join("\n")
    }

    /// Compact metadata document (title and records) for prompts.
    pub fn metadata_json(&self) -> String {
        serde_json::json!({ "title": self.title, "models": self.records }).to_string()
    }
}

fn cell_text(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub question: String,
    #[serde(rename = "answer")]
    pub gold_answer: String,
    pub chart: ChartContext,
    #[serde(default)]
    pub split: Split,
}

impl Sample {
    pub fn validate(&self) -> Result<()> {
        if self.question.trim().is_empty() {
            return Err(Error::Validation(format!("sample {}: empty question", self.id)));
        }
        if self.gold_answer.trim().is_empty() {
            return Err(Error::Validation(format!("sample {}: empty answer", self.id)));
        }
        self.chart.validate()
    }
}

/// Loads a line-delimited dataset, checking every sample and id uniqueness.
pub fn load_dataset(path: &Path) -> Result<Vec<Sample>> {
    let samples: Vec<Sample> = io::read_jsonl(path)?;
    validate_dataset(&samples)?;
    Ok(samples)
}

pub fn validate_dataset(samples: &[Sample]) -> Result<()> {
    let mut ids = HashSet::new();
    for s in samples {
        s.validate()?;
        if !ids.insert(s.id.as_str()) {
            return Err(Error::Validation(format!("duplicate sample id {}", s.id)));
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanStep {
    pub role: AgentRole,
    pub query: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolPlan {
    pub steps: Vec<PlanStep>,
}

impl ToolPlan {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps.is_empty() {
            return Err(Error::Validation("tool plan is empty".into()));
        }
        if self.steps.iter().any(|s| s.role == AgentRole::Policy) {
            return Err(Error::Validation("policy cannot be a plan step".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepStatus {
    Ok,
    ExecutionError,
    Timeout,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolStep {
    pub role: AgentRole,
    pub input_context: String,
    pub output: String,
    pub status: StepStatus,
    pub elapsed_ms: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolTrajectory {
    pub sample_id: String,
    pub plan: ToolPlan,
    pub steps: Vec<ToolStep>,
    pub prediction: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
    /// Set when the chain stopped early (plan failure or a failed step).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

impl ToolTrajectory {
    pub fn is_truncated(&self) -> bool {
        self.failure.is_some()
            || self.steps.len() < self.plan.len()
            || self.steps.iter().any(|s| s.status != StepStatus::Ok)
    }

    /// Steps must be a prefix of the plan, matching role by role.
    pub fn check_alignment(&self) -> Result<()> {
        if self.steps.len() > self.plan.len() {
            return Err(Error::Validation(format!(
                "trajectory {} has more steps than its plan",
                self.sample_id
            )));
        }
        for (i, (step, planned)) in self.steps.iter().zip(&self.plan.steps).enumerate() {
            if step.role != planned.role {
                return Err(Error::Validation(format!(
                    "trajectory {} step {i} ran {} but the plan says {}",
                    self.sample_id, step.role, planned.role
                )));
            }
        }
        if self.steps.len() < self.plan.len() && !self.is_truncated() {
            return Err(Error::Validation(format!(
                "trajectory {} stopped early without a failure",
                self.sample_id
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorCategory {
    None,
    Incomplete,
    Invalid,
}

impl FromStr for ErrorCategory {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "none" => Ok(ErrorCategory::None),
            "incomplete" => Ok(ErrorCategory::Incomplete),
            "invalid" => Ok(ErrorCategory::Invalid),
            other => Err(Error::Validation(format!("unknown error category {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectoryAssessment {
    pub score: u8,
    pub rationale: String,
    pub category: ErrorCategory,
    pub coordinated: bool,
}

impl TrajectoryAssessment {
    /// Applies the threshold: coordinated iff `score >= beta`. A passing chain
    /// always has category `none`; a failing one never does (an unlabelled
    /// failure is recorded as `incomplete`).
    pub fn from_score(score: u8, beta: u8, rationale: String, category: ErrorCategory) -> Self {
        let coordinated = score >= beta;
        let category = match (coordinated, category) {
            (true, _) => ErrorCategory::None,
            (false, ErrorCategory::None) => ErrorCategory::Incomplete,
            (false, c) => c,
        };
        TrajectoryAssessment {
            score,
            rationale,
            category,
            coordinated,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleOutcome {
    pub sample_id: String,
    pub trajectory: ToolTrajectory,
    pub accuracy: bool,
    pub assessment: TrajectoryAssessment,
    pub reward: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeedbackRecord {
    pub sample: Sample,
    pub outcome: SampleOutcome,
}

/// Errors of one prompt set on one minibatch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeedbackSet {
    pub iteration: u32,
    pub prompt_id: String,
    pub records: Vec<FeedbackRecord>,
}

impl FeedbackSet {
    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// What the suggestion prompt is told about each error.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackMode {
    /// Prediction errors and tool-invocation errors with trajectories and assessments.
    #[default]
    Multifaceted,
    /// Final-prediction errors only.
    PredictionOnly,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditMode {
    /// One optimizer call per candidate.
    #[default]
    PerCall,
    /// One call asking for all K variants.
    Batched,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub alpha: f64,
    pub beta: u8,
    pub beam_width: usize,
    pub iterations: u32,
    pub edit_count: usize,
    pub minibatch_size: usize,
    pub eval_subset_size: usize,
    pub rng_seed: u64,
    pub parse_retry_limit: u32,
    pub include_parents_in_beam: bool,
    /// Rank candidates by accuracy alone instead of the collaborative reward.
    pub accuracy_only_reward: bool,
    pub feedback_mode: FeedbackMode,
    pub edit_mode: EditMode,
    /// Select the final prompt by reward over the full training set.
    pub final_full_eval: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            alpha: 0.5,
            beta: 7,
            beam_width: 4,
            iterations: 3,
            edit_count: 4,
            minibatch_size: 16,
            eval_subset_size: 32,
            rng_seed: 0,
            parse_retry_limit: 3,
            include_parents_in_beam: false,
            accuracy_only_reward: false,
            feedback_mode: FeedbackMode::Multifaceted,
            edit_mode: EditMode::PerCall,
            final_full_eval: false,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self, dataset_len: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidAlpha(self.alpha));
        }
        if !(1..=10).contains(&self.beta) {
            return bad(format!("beta must be in [1, 10], got {}", self.beta));
        }
        if self.beam_width == 0 || self.edit_count == 0 {
            return bad("beam_width and edit_count must be positive".into());
        }
        if self.minibatch_size == 0 || self.eval_subset_size == 0 {
            return bad("minibatch_size and eval_subset_size must be positive".into());
        }
        if self.parse_retry_limit == 0 {
            return bad("parse_retry_limit must be positive".into());
        }
        if self.minibatch_size > dataset_len {
            return bad(format!(
                "minibatch_size {} exceeds dataset size {dataset_len}",
                self.minibatch_size
            ));
        }
        if self.eval_subset_size > dataset_len {
            return bad(format!(
                "eval_subset_size {} exceeds dataset size {dataset_len}",
                self.eval_subset_size
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AnswerType {
    #[serde(rename = "INT")]
    Int,
    #[serde(rename = "DEC")]
    Dec,
    #[serde(rename = "BOOL")]
    Bool,
    #[serde(rename = "TEXT")]
    Text,
}

impl AnswerType {
    pub const ALL: [AnswerType; 4] = [AnswerType::Int, AnswerType::Dec, AnswerType::Bool, AnswerType::Text];

    pub fn as_str(self) -> &'static str {
        match self {
            AnswerType::Int => "INT",
            AnswerType::Dec => "DEC",
            AnswerType::Bool => "BOOL",
            AnswerType::Text => "TEXT",
        }
    }
}

impl fmt::Display for AnswerType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TypeAccuracy {
    pub count: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub accuracy: f64,
    pub per_type: BTreeMap<AnswerType, TypeAccuracy>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variance: Option<f64>,
    #[serde(default)]
    pub failures: Vec<String>,
}
