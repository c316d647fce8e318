//! Hypothetical-QA synthesis: instruction proposal pool, proposal and
//! instance generation, and folding reviewer verdicts back into the pool.

mod generate;

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::domain::{AnswerType, ChartContext, ChartType};
use crate::error::{Error, Result};
use crate::io;

pub use generate::{
    apply_verdict, generate_hqa, generate_proposals, parse_hqa_reply, parse_proposals, run_round, ChartFailure,
    Demonstration, HqaBatch, QaPair, SynthesisChart, SynthesisConfig, VerdictEffect, Violation, PROPOSAL_SYSTEM,
    REWRITER_SYSTEM,
};

/// Seed proposals required per chart type.
pub const MIN_SEEDS_PER_TYPE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Seed,
    Generated,
    Revised,
}

/// General counterfactual operation: how to pick elements plus the change
/// assumed on them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstructionProposal {
    pub id: String,
    pub chart_type: ChartType,
    pub text: String,
    pub provenance: Provenance,
    #[serde(default)]
    pub feedback_log: Vec<String>,
}

impl InstructionProposal {
    pub fn validate(&self) -> Result<()> {
        if self.id.trim().is_empty() {
            return Err(Error::Validation("proposal id is empty".into()));
        }
        if self.text.trim().is_empty() {
            return Err(Error::Validation(format!("proposal {} has empty text", self.id)));
        }
        if self.provenance == Provenance::Revised && self.feedback_log.is_empty() {
            return Err(Error::Validation(format!(
                "revised proposal {} carries no feedback",
                self.id
            )));
        }
        Ok(())
    }
}

/// Append-only proposal pool indexed by chart type.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ProposalPool {
    proposals: Vec<InstructionProposal>,
}

impl ProposalPool {
    pub fn proposals(&self) -> &[InstructionProposal] {
        &self.proposals
    }

    pub fn len(&self) -> usize {
        self.proposals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.proposals.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&InstructionProposal> {
        self.proposals.iter().find(|p| p.id == id)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.get(id).is_some()
    }

    /// Proposals of one chart type, in pool order.
    pub fn of_type(&self, chart_type: ChartType) -> Vec<&InstructionProposal> {
        self.proposals.iter().filter(|p| p.chart_type == chart_type).collect()
    }

    /// Proposal counts per chart type.
    pub fn index(&self) -> BTreeMap<ChartType, usize> {
        let mut out = BTreeMap::new();
        for p in &self.proposals {
            *out.entry(p.chart_type).or_default() += 1;
        }
        out
    }

    /// Adds `proposal` unless its id is already pooled. Returns whether the
    /// pool grew.
    pub fn add(&mut self, proposal: InstructionProposal) -> Result<bool> {
        proposal.validate()?;
        if self.contains(&proposal.id) {
            return Ok(false);
        }
        self.proposals.push(proposal);
        Ok(true)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let proposals: Vec<InstructionProposal> = io::read_jsonl(path)?;
        let mut pool = ProposalPool::default();
        for p in proposals {
            if !pool.add(p.clone())? {
                return Err(Error::Validation(format!("duplicate proposal id {}", p.id)));
            }
        }
        Ok(pool)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_jsonl(path, &self.proposals)
    }
}

/// Builds the initial pool. Every chart type present among the seeds needs
/// at least [`MIN_SEEDS_PER_TYPE`] of them.
pub fn init_pool(seeds: Vec<InstructionProposal>) -> Result<ProposalPool> {
    let mut pool = ProposalPool::default();
    for seed in seeds {
        let id = seed.id.clone();
        if !pool.add(seed)? {
            return Err(Error::Validation(format!("duplicate proposal id {id}")));
        }
    }
    for (chart_type, found) in pool.index() {
        if found < MIN_SEEDS_PER_TYPE {
            return Err(Error::InsufficientSeeds { chart_type, found });
        }
    }
    Ok(pool)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstanceStatus {
    Pending,
    Accepted,
    Rejected,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewAspects {
    pub question_reasonable: bool,
    pub answer_accurate: bool,
    pub complexity_adequate: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReviewVerdict {
    pub reviewer: String,
    pub accept: bool,
    pub aspects: ReviewAspects,
    #[serde(default)]
    pub comment: String,
    pub timestamp: DateTime<Utc>,
}

impl ReviewVerdict {
    pub fn validate(&self) -> Result<()> {
        if self.reviewer.trim().is_empty() {
            return Err(Error::Validation("verdict has no reviewer".into()));
        }
        if self.accept && !(self.aspects.question_reasonable && self.aspects.answer_accurate) {
            return Err(Error::Validation(
                "an accepted instance needs a reasonable question and an accurate answer".into(),
            ));
        }
        Ok(())
    }

    /// Same reviewer and payload; the timestamp is ignored.
    pub fn same_decision(&self, other: &ReviewVerdict) -> bool {
        self.reviewer == other.reviewer
            && self.accept == other.accept
            && self.aspects == other.aspects
            && self.comment == other.comment
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HqaInstance {
    pub id: String,
    pub chart: ChartContext,
    pub original_question: String,
    pub original_answer: String,
    pub assumption: String,
    pub hypothetical_question: String,
    pub answer: String,
    pub answer_type: AnswerType,
    pub proposal_id: String,
    pub proposal_text: String,
    pub status: InstanceStatus,
    #[serde(default)]
    pub verdicts: Vec<ReviewVerdict>,
}

impl HqaInstance {
    pub fn chart_type(&self) -> ChartType {
        self.chart.chart_type
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RetentionStats {
    pub total: usize,
    pub accepted: usize,
    pub rejected: usize,
    pub pending: usize,
    /// Percentage with one decimal; absent until something is reviewed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retention_rate: Option<f64>,
}

pub fn retention_from_counts(accepted: usize, rejected: usize, pending: usize) -> RetentionStats {
    let reviewed = accepted + rejected;
    RetentionStats {
        total: reviewed + pending,
        accepted,
        rejected,
        pending,
        retention_rate: (reviewed > 0).then(|| (accepted as f64 * 1000.0 / reviewed as f64).round() / 10.0),
    }
}

pub fn retention_stats(instances: &[HqaInstance]) -> RetentionStats {
    let count = |s| instances.iter().filter(|i| i.status == s).count();
    retention_from_counts(
        count(InstanceStatus::Accepted),
        count(InstanceStatus::Rejected),
        count(InstanceStatus::Pending),
    )
}

/// Length and answer-type statistics of a synthesized set. Lengths count
/// Unicode scalar values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthStats {
    pub instances: usize,
    pub charts: usize,
    pub avg_question_chars: f64,
    pub avg_assumption_chars: f64,
    pub avg_answer_chars: f64,
    pub answer_types: BTreeMap<AnswerType, usize>,
    pub retention: RetentionStats,
}

pub fn synth_stats(instances: &[HqaInstance]) -> SynthStats {
    let avg = |f: &dyn Fn(&HqaInstance) -> usize| {
        if instances.is_empty() {
            0.0
        } else {
            let total: usize = instances.iter().map(f).sum();
            (total as f64 / instances.len() as f64 * 100.0).round() / 100.0
        }
    };
    let mut answer_types: BTreeMap<AnswerType, usize> = AnswerType::ALL.iter().map(|t| (*t, 0)).collect();
    for i in instances {
        *answer_types.entry(i.answer_type).or_default() += 1;
    }
    let charts: HashSet<String> = instances.iter().map(|i| i.chart.metadata_json()).collect();
    SynthStats {
        instances: instances.len(),
        charts: charts.len(),
        avg_question_chars: avg(&|i| i.hypothetical_question.chars().count()),
        avg_assumption_chars: avg(&|i| i.assumption.chars().count()),
        avg_answer_chars: avg(&|i| i.answer.chars().count()),
        answer_types,
        retention: retention_stats(instances),
    }
}

pub fn render_synth_stats(s: &SynthStats) -> String {
    let mut out = format!(
        "instances          {}\ncharts             {}\navg question chars {:.2}\navg assumption     {:.2}\navg answer chars   {:.2}\n",
        s.instances, s.charts, s.avg_question_chars, s.avg_assumption_chars, s.avg_answer_chars
    );
    for (t, n) in &s.answer_types {
        out.push_str(&format!("{:<18} {n}\n", t.as_str()));
    }
    let r = &s.retention;
    out.push_str(&format!(
        "accepted {} / rejected {} / pending {}\nretention          {}\n",
        r.accepted,
        r.rejected,
        r.pending,
        r.retention_rate
            .map(|v| format!("{v:.1}%"))
            .unwrap_or_else(|| "n/a".into())
    ));
    out
}
