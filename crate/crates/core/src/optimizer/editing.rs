//! Suggestion generation and K-way prompt editing through the optimizer model.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::domain::{AgentRole, EditMode, FeedbackMode, FeedbackSet, PromptSet, StepStatus};
use crate::error::{Error, Result};
use crate::gateway::{Gateway, ModelTarget};
use crate::io::sha256_hex;

/// Returned without a model call when the minibatch produced no errors.
pub const CONSERVATIVE_SUGGESTION: &str = "no errors observed; propose conservative clarity edits";

pub const OPTIMIZER_SYSTEM: &str = "You are an expert prompt engineer. You improve the chain-of-tool prompts \
of a chart question-answering agent made of a policy (planner), data retrieval, visual retrieval, program \
and solution model.";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Suggestion(pub String);

impl Suggestion {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

const DIGEST_CHARS: usize = 300;

fn clip(s: &str) -> String {
    match s.char_indices().nth(DIGEST_CHARS) {
        Some((i, _)) => format!("{}…", &s[..i]),
        None => s.to_string(),
    }
}

fn suggestion_prompt(feedback: &FeedbackSet, mode: FeedbackMode) -> String {
    let mut out = String::from("The agent made the following errors on a minibatch of training questions.\n");
    for (i, rec) in feedback.records.iter().enumerate() {
        let o = &rec.outcome;
        out.push_str(&format!(
            "\n### Error {}\nQuestion: {}\nGold answer: {}\nPrediction: {}\n",
            i + 1,
            rec.sample.question,
            rec.sample.gold_answer,
            if o.trajectory.prediction.is_empty() {
                "(none)"
            } else {
                &o.trajectory.prediction
            }
        ));
        if mode == FeedbackMode::Multifaceted {
            out.push_str("Tool trajectory:\n");
            for (j, step) in o.trajectory.steps.iter().enumerate() {
                let query = o.trajectory.plan.steps.get(j).map(|p| p.query.as_str()).unwrap_or("");
                let status = match step.status {
                    StepStatus::Ok => "ok",
                    StepStatus::ExecutionError => "execution error",
                    StepStatus::Timeout => "timeout",
                };
                out.push_str(&format!(
                    "  {}. {} [{query}] ({status}): {}\n",
                    j + 1,
                    step.role,
                    clip(&step.output)
                ));
            }
            if let Some(f) = &o.trajectory.failure {
                out.push_str(&format!("  chain stopped: {}\n", clip(f)));
            }
            out.push_str(&format!(
                "Assessment: score {}/10, category {:?}. {}\n",
                o.assessment.score,
                o.assessment.category,
                clip(&o.assessment.rationale)
            ));
        }
    }
    out.push_str(
        "\nSummarize why the agent produces these errors, extract the domain knowledge it lacks, and give \
         fine-grained suggestions for refining the prompts of the individual tools. Reply as:\n\
         Suggestion: <text>",
    );
    out
}

fn parse_suggestion(reply: &str) -> Option<String> {
    let lower = reply.to_ascii_lowercase();
    let pos = lower.find("suggestion:")?;
    let text = reply[pos + "suggestion:".len()..].trim();
    (!text.is_empty()).then(|| text.to_string())
}

/// Turns aggregated error feedback into a refinement suggestion.
pub fn generate_suggestion(
    gateway: &Gateway,
    feedback: &FeedbackSet,
    mode: FeedbackMode,
    retry_limit: u32,
) -> Result<Suggestion> {
    if feedback.is_empty() {
        return Ok(Suggestion(CONSERVATIVE_SUGGESTION.to_string()));
    }
    let base = suggestion_prompt(feedback, mode);
    let attempts = retry_limit.max(1);
    for attempt in 1..=attempts {
        let user = if attempt == 1 {
            base.clone()
        } else {
            format!("{base}\n\nAttempt {attempt}: begin the reply with `Suggestion:`.")
        };
        let req = gateway.request(ModelTarget::Optimizer, OPTIMIZER_SYSTEM, &user);
        if let Some(text) = parse_suggestion(&gateway.complete(&req)?.text) {
            return Ok(Suggestion(text));
        }
    }
    Err(Error::SuggestionParseError { attempts })
}

fn render_prompts(p: &PromptSet) -> String {
    AgentRole::ALL
        .iter()
        .map(|r| format!("[{r}]\n{}", p.get(*r)))
        .collect::<Vec<_>>()
        .join("\n\n")
}

fn edit_prompt(suggestion: &Suggestion, current: &PromptSet) -> String {
    format!(
        "Current chain-of-tool prompts:\n\n{}\n\nSuggestion:\n{}\n\n\
         Rewrite the prompts following the suggestion. You may change any subset of roles. Write each \
         changed prompt under its header ([policy], [data_retrieval], [visual_retrieval], [program], \
         [solution]); roles you leave out keep their current text.",
        render_prompts(current),
        suggestion.as_str()
    )
}

fn header_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\s*\[([A-Za-z_ \-]+)\]\s*$").unwrap())
}

fn variant_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)^\s*=+\s*candidate\s+\d+\s*=+\s*$").unwrap())
}

/// Parses `[role]` sections. Text before the first header is ignored; an
/// unknown header, an empty section or no section at all is malformed.
pub fn parse_edit(reply: &str) -> Option<BTreeMap<AgentRole, String>> {
    let mut sections: BTreeMap<AgentRole, String> = BTreeMap::new();
    let mut current: Option<(AgentRole, Vec<&str>)> = None;
    let close = |cur: Option<(AgentRole, Vec<&str>)>, sections: &mut BTreeMap<AgentRole, String>| -> bool {
        if let Some((role, lines)) = cur {
            let body = lines.join("\n").trim().to_string();
            if body.is_empty() {
                return false;
            }
            sections.insert(role, body);
        }
        true
    };
    for line in reply.lines() {
        if let Some(caps) = header_re().captures(line) {
            let role: AgentRole = caps[1].parse().ok()?;
            if !close(current.take(), &mut sections) {
                return None;
            }
            current = Some((role, Vec::new()));
        } else if let Some((_, lines)) = current.as_mut() {
            lines.push(line);
        }
    }
    if !close(current.take(), &mut sections) || sections.is_empty() {
        return None;
    }
    Some(sections)
}

fn split_variants(reply: &str) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    let mut cur: Option<Vec<&str>> = None;
    for line in reply.lines() {
        if variant_re().is_match(line) {
            if let Some(lines) = cur.take() {
                out.push(lines.join("\n"));
            }
            cur = Some(Vec::new());
        } else if let Some(lines) = cur.as_mut() {
            lines.push(line);
        }
    }
    if let Some(lines) = cur {
        out.push(lines.join("\n"));
    }
    out
}

fn child_of(current: &PromptSet, edits: BTreeMap<AgentRole, String>, iteration: u32, slot: usize) -> PromptSet {
    let mut prompts = current.prompts.clone();
    prompts.extend(edits);
    let mut material = format!("{}\u{1f}{iteration}\u{1f}{slot}", current.id);
    for (role, text) in &prompts {
        material.push_str(&format!("\u{1f}{role}\u{1f}{text}"));
    }
    PromptSet {
        id: format!("c{iteration}-{}", &sha256_hex(material.as_bytes())[..12]),
        parent_id: Some(current.id.clone()),
        prompts,
        created_at_iteration: iteration,
    }
}

/// Produces exactly `k` edited children of `current`. Malformed replies are
/// re-requested up to `retry_limit` times per slot (per call in batched
/// mode).
pub fn edit_prompts(
    gateway: &Gateway,
    suggestion: &Suggestion,
    current: &PromptSet,
    k: usize,
    iteration: u32,
    mode: EditMode,
    retry_limit: u32,
) -> Result<Vec<PromptSet>> {
    let base = edit_prompt(suggestion, current);
    let attempts = retry_limit.max(1);
    let mut children = Vec::with_capacity(k);
    match mode {
        EditMode::PerCall => {
            for slot in 0..k {
                let mut parsed = None;
                for attempt in 1..=attempts {
                    let mut user = format!("{base}\nThis is candidate {} of {k}.", slot + 1);
                    if attempt > 1 {
                        user.push_str(&format!(
                            "\n\nAttempt {attempt}: the previous reply had no valid `[role]` sections."
                        ));
                    }
                    let req = gateway.request(ModelTarget::Optimizer, OPTIMIZER_SYSTEM, &user);
                    if let Some(edits) = parse_edit(&gateway.complete(&req)?.text) {
                        parsed = Some(edits);
                        break;
                    }
                }
                match parsed {
                    Some(edits) => children.push(child_of(current, edits, iteration, slot)),
                    None => {
                        return Err(Error::EditParseError {
                            requested: k,
                            obtained: children.len(),
                        })
                    }
                }
            }
        }
        EditMode::Batched => {
            for attempt in 1..=attempts {
                let mut user =
                    format!("{base}\nProduce {k} different candidates. Start each with a line `=== candidate N ===`.");
                if attempt > 1 {
                    user.push_str(&format!(
                        "\n\nAttempt {attempt}: {} more valid candidates are needed.",
                        k - children.len()
                    ));
                }
                let req = gateway.request(ModelTarget::Optimizer, OPTIMIZER_SYSTEM, &user);
                let reply = gateway.complete(&req)?.text;
                for variant in split_variants(&reply) {
                    if children.len() == k {
                        break;
                    }
                    if let Some(edits) = parse_edit(&variant) {
                        let slot = children.len();
                        children.push(child_of(current, edits, iteration, slot));
                    }
                }
                if children.len() == k {
                    break;
                }
            }
            if children.len() < k {
                return Err(Error::EditParseError {
                    requested: k,
                    obtained: children.len(),
                });
            }
        }
    }
    Ok(children)
}
