//! Multifaceted error feedback and the collaborative reward.

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::domain::{
    ErrorCategory, FeedbackMode, FeedbackRecord, FeedbackSet, Sample, SampleOutcome, StepStatus, ToolTrajectory,
    TrajectoryAssessment,
};
use crate::error::{Error, Result};
use crate::gateway::{Gateway, ModelTarget};

/// Default scoring rubric for tool chains.
pub const DEFAULT_RUBRIC: &str = "\
You review the tool chain of a chart question-answering agent. The chain was planned by a policy model \
and executed by data retrieval, visual retrieval, program and solution models.

Score the chain from 1 to 10:
- 9-10: every step faithfully uses the results of the preceding tool, and the tools query exactly the chart \
details the question asks about.
- 7-8: the chain is sound; minor redundancy or imprecise sub-task wording that does not affect the result.
- 4-6: a step ignores or misreads an earlier result, or a required chart detail is never queried \
(category: incomplete), or a tool returns output unusable by the next step (category: invalid).
- 1-3: the chain cannot answer the question: missing tools, wrong data queried, or failing execution.

Use category `incomplete` when the tool logic is insufficient to answer the question, `invalid` when tool \
execution results are ineffective, and `none` when the chain is sound.";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum RewardMode {
    Collaborative {
        alpha: f64,
    },
    /// Execution accuracy alone.
    AccuracyOnly,
}

impl RewardMode {
    pub fn new(alpha: f64, accuracy_only: bool) -> Result<Self> {
        if accuracy_only {
            return Ok(RewardMode::AccuracyOnly);
        }
        check_alpha(alpha)?;
        Ok(RewardMode::Collaborative { alpha })
    }

    pub fn reward(self, f_acc: bool, f_coo: bool) -> f64 {
        match self {
            RewardMode::Collaborative { alpha } => reward_value(f_acc, f_coo, alpha),
            RewardMode::AccuracyOnly => f64::from(u8::from(f_acc)),
        }
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidAlpha(alpha))
    }
}

fn reward_value(f_acc: bool, f_coo: bool, alpha: f64) -> f64 {
    let acc = f64::from(u8::from(f_acc));
    let coo = f64::from(u8::from(f_coo));
    acc * coo + alpha * (coo - acc)
}

/// `acc * coo + alpha * (coo - acc)`: 1 for a correct, cooperating chain;
/// `-alpha` for a correct answer reached without cooperation.
pub fn collaborative_reward(f_acc: bool, f_coo: bool, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    Ok(reward_value(f_acc, f_coo, alpha))
}

/// Mean per-sample reward.
pub fn prompt_reward(outcomes: &[SampleOutcome]) -> Result<f64> {
    if outcomes.is_empty() {
        return Err(Error::EmptyOutcomes);
    }
    Ok(outcomes.iter().map(|o| o.reward).sum::<f64>() / outcomes.len() as f64)
}

pub fn mean_accuracy(outcomes: &[SampleOutcome]) -> f64 {
    if outcomes.is_empty() {
        return 0.0;
    }
    outcomes.iter().filter(|o| o.accuracy).count() as f64 / outcomes.len() as f64
}

/// Keeps outcomes with a prediction error or a tool-invocation error, in
/// minibatch order.
pub fn collect_feedback(batch: &[Sample], outcomes: &[SampleOutcome], iteration: u32, prompt_id: &str) -> FeedbackSet {
    collect_feedback_with(FeedbackMode::Multifaceted, batch, outcomes, iteration, prompt_id)
}

/// Like [`collect_feedback`]; in prediction-only mode only wrong final
/// answers are kept.
pub fn collect_feedback_with(
    mode: FeedbackMode,
    batch: &[Sample],
    outcomes: &[SampleOutcome],
    iteration: u32,
    prompt_id: &str,
) -> FeedbackSet {
    let records = outcomes
        .iter()
        .filter(|o| match mode {
            FeedbackMode::Multifaceted => !o.accuracy || !o.assessment.coordinated,
            FeedbackMode::PredictionOnly => !o.accuracy,
        })
        .filter_map(|o| {
            let sample = batch.iter().find(|s| s.id == o.sample_id)?;
            Some(FeedbackRecord {
                sample: sample.clone(),
                outcome: o.clone(),
            })
        })
        .collect();
    FeedbackSet {
        iteration,
        prompt_id: prompt_id.to_string(),
        records,
    }
}

/// Assessment for a chain that stopped early; no model call is needed.
pub fn failed_chain_assessment(traj: &ToolTrajectory, beta: u8) -> TrajectoryAssessment {
    let why = traj
        .failure
        .clone()
        .unwrap_or_else(|| "tool chain terminated early".to_string());
    TrajectoryAssessment::from_score(1, beta, format!("execution failed: {why}"), ErrorCategory::Invalid)
}

/// Asks the optimizer model to score a trajectory against the rubric.
pub fn assess_trajectory(
    gateway: &Gateway,
    rubric: &str,
    sample: &Sample,
    traj: &ToolTrajectory,
    beta: u8,
    retry_limit: u32,
) -> Result<TrajectoryAssessment> {
    if !(1..=10).contains(&beta) {
        return Err(Error::Config(format!("beta must be in [1, 10], got {beta}")));
    }
    if traj.is_truncated() {
        return Ok(failed_chain_assessment(traj, beta));
    }
    let base = assessment_prompt(sample, traj);
    let attempts = retry_limit.max(1);
    for attempt in 1..=attempts {
        let user = if attempt == 1 {
            base.clone()
        } else {
            format!("{base}\n\nAttempt {attempt}: start the reply with `Score: <integer 1-10>`.")
        };
        let req = gateway.request(ModelTarget::Optimizer, rubric, &user);
        let reply = gateway.complete(&req)?.text;
        if let Some((score, category, rationale)) = parse_assessment(&reply) {
            return Ok(TrajectoryAssessment::from_score(score, beta, rationale, category));
        }
    }
    Err(Error::ScoreParseError { attempts })
}

fn assessment_prompt(sample: &Sample, traj: &ToolTrajectory) -> String {
    let queries: Vec<String> = traj
        .plan
        .steps
        .iter()
        .enumerate()
        .map(|(i, s)| format!("{}. {}: {}", i + 1, s.role, s.query))
        .collect();
    let results: Vec<String> = traj
        .steps
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let status = match s.status {
                StepStatus::Ok => "ok",
                StepStatus::ExecutionError => "execution error",
                StepStatus::Timeout => "timeout",
            };
            format!("[{}] {} ({status}):\n{}", i + 1, s.role, s.output)
        })
        .collect();
    format!(
        "Question: {}\nChart: {}\n\nKey queries:\n{}\n\nIntermediate results:\n{}\n\nFinal prediction: {}\n\n\
         Rate the tool chain using the rubric. Reply exactly as:\n\
         Score: <1-10>\nCategory: <none|incomplete|invalid>\nRationale: <one paragraph>",
        sample.question,
        sample.chart.chart_description(),
        queries.join("\n"),
        results.join("\n\n"),
        traj.prediction
    )
}

fn score_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)score\s*[:=]\s*(-?\d+)").unwrap())
}

fn category_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)category\s*[:=]\s*\**\s*([a-z]+)").unwrap())
}

fn rationale_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?is)rationale\s*[:=]\s*(.*)").unwrap())
}

/// Extracts `(score, category, rationale)`. Scores outside 1..=10 are
/// clamped. A missing category is reported as `none` and resolved against
/// the threshold by the caller.
pub fn parse_assessment(reply: &str) -> Option<(u8, ErrorCategory, String)> {
    let raw: i64 = score_re().captures(reply)?[1].parse().ok()?;
    let score = raw.clamp(1, 10) as u8;
    if i64::from(score) != raw {
        tracing::warn!(raw, score, "trajectory score out of range, clamped");
    }
    let category = category_re()
        .captures(reply)
        .and_then(|c| c[1].parse().ok())
        .unwrap_or(ErrorCategory::None);
    let rationale = rationale_re()
        .captures(reply)
        .map(|c| c[1].trim().to_string())
        .unwrap_or_else(|| reply.trim().to_string());
    Some((score, category, rationale))
}
