use std::collections::HashSet;
use std::sync::OnceLock;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{HqaInstance, InstanceStatus, InstructionProposal, ProposalPool, Provenance, ReviewVerdict};
use crate::domain::ChartContext;
use crate::error::{Error, Result};
use crate::gateway::{Gateway, ModelTarget};
use crate::io::sha256_hex;
use crate::metrics::{classify_answer_type, normalize_text, parse_number};

pub const PROPOSAL_SYSTEM: &str = "You are a creative prompt creator.";
pub const REWRITER_SYSTEM: &str = "You are a Question Rewriter.";

const CONTEXT_PROPOSALS: usize = 4;
const NEW_PROPOSALS: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaPair {
    pub question: String,
    pub answer: String,
}

/// Worked rewrite shown to the model as the format to follow.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demonstration {
    pub question: String,
    pub rewrites: [String; 2],
}

impl Default for Demonstration {
    fn default() -> Self {
        Demonstration {
            question: "What is the value of Japan in 2019?".into(),
            rewrites: [
                "If the value of every country in 2019 increased by 10%, what is the value of Japan in 2019?".into(),
                "Assuming the value of Japan in 2019 were equal to the highest value in the chart, what is the value \
                 of Japan in 2019?"
                    .into(),
            ],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthesisConfig {
    pub rng_seed: u64,
    pub retry_limit: u32,
    pub rounds: u32,
    pub demonstration: Demonstration,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        SynthesisConfig {
            rng_seed: 0,
            retry_limit: 3,
            rounds: 1,
            demonstration: Demonstration::default(),
        }
    }
}

/// A chart with its factoid QA pairs, the input of a synthesis round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthesisChart {
    pub id: String,
    pub chart: ChartContext,
    pub qa: Vec<QaPair>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chart_id: Option<String>,
    pub slot: usize,
    pub rule: String,
    pub detail: String,
}

impl Violation {
    pub fn to_error(&self) -> Error {
        Error::ConstraintViolation {
            slot: self.slot,
            rule: self.rule.clone(),
            detail: self.detail.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChartFailure {
    pub chart_id: String,
    pub error: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HqaBatch {
    pub instances: Vec<HqaInstance>,
    pub violations: Vec<Violation>,
    #[serde(default)]
    pub failures: Vec<ChartFailure>,
}

fn numbered_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\s*\d+\s*[.)]\s*(\S.*?)\s*$").unwrap())
}

fn hex_color_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"#(?:[0-9A-Fa-f]{6}|[0-9A-Fa-f]{3})\b").unwrap())
}

fn proposal_prompt(chart: &ChartContext, context: &[&InstructionProposal]) -> String {
    format!(
        "Given {}.\n\
         A series of data points contains a list of the following attributes (dictionary-style):\n\
         {}\n\
         According to the chart description provided above, Your goal is to generate new instructions to guide \
         the user in asking hypothetical questions based on information in the chart.\n\
         Your can draw inspiration from the #Given Instructions# to create a brand new instruction.\n\
         The new instruction must meet the following conditions:\n\
         1. It should only contains two parts: how to specify the elements and the assumed change to be applied \
         on the elements.\n\
         2. The new instruction must be reasonable and must be understood and responded by humans.\n\
         3. Follow the sentence patterns in the examples.\n\
         4. Please replace specific concepts with general concepts.\n\
         5. Use attributes in charts to refer to specific elements.\n\
         #Given Instructions#:\n\
         1. {}\n\
         2. {}\n\
         3. {}\n\
         4. {}\n\
         Now please directly generate 3 new instructions without writing any other explanations:",
        chart.chart_description(),
        chart.field_description(),
        context[0].text,
        context[1].text,
        context[2].text,
        context[3].text,
    )
}

/// Numbered lines of a reply, numbering stripped.
pub fn parse_proposals(reply: &str) -> Vec<String> {
    reply
        .lines()
        .filter_map(|l| numbered_re().captures(l).map(|c| c[1].to_string()))
        .collect()
}

/// Samples four pooled proposals of the chart's type as context and asks
/// for three new ones. The results are not pooled.
pub fn generate_proposals<R: Rng>(
    gateway: &Gateway,
    pool: &ProposalPool,
    chart: &ChartContext,
    rng: &mut R,
    retry_limit: u32,
) -> Result<Vec<InstructionProposal>> {
    let chart_type = chart.chart_type;
    let candidates = pool.of_type(chart_type);
    if candidates.len() < CONTEXT_PROPOSALS {
        return Err(Error::InsufficientSeeds {
            chart_type,
            found: candidates.len(),
        });
    }
    let context: Vec<&InstructionProposal> = index::sample(rng, candidates.len(), CONTEXT_PROPOSALS)
        .into_iter()
        .map(|i| candidates[i])
        .collect();
    let base = proposal_prompt(chart, &context);
    let attempts = retry_limit.max(1);
    let mut parsed = 0;
    for attempt in 1..=attempts {
        let user = if attempt == 1 {
            base.clone()
        } else {
            format!("{base}\n(Attempt {attempt}: reply with exactly 3 numbered lines.)")
        };
        let req = gateway.request(ModelTarget::Optimizer, PROPOSAL_SYSTEM, &user);
        let lines = parse_proposals(&gateway.complete(&req)?.text);
        parsed = lines.len();
        if parsed == NEW_PROPOSALS {
            return Ok(lines
                .into_iter()
                .map(|text| InstructionProposal {
                    id: format!(
                        "g-{}",
                        &sha256_hex(format!("{chart_type}\u{1f}{text}").as_bytes())[..12]
                    ),
                    chart_type,
                    text,
                    provenance: Provenance::Generated,
                    feedback_log: Vec::new(),
                })
                .collect());
        }
    }
    Err(Error::ProposalParseError { parsed })
}

fn hqa_prompt(
    proposals: &[InstructionProposal],
    originals: &[QaPair],
    chart: &ChartContext,
    demo: &Demonstration,
) -> String {
    let desc = chart.chart_description();
    let fields = chart.field_description();
    let block = |label: &str, qa: &QaPair| {
        format!(
            "{label}:\nQuestion: {}\nAnswer: {}\nHQ Rewrites:\nQuestion_1: \nAnswer_1: \nQuestion_2: \nAnswer_2: ",
            qa.question, qa.answer
        )
    };
    format!(
        "You are provided with metadata from {desc}. The chart's title and series of data points (models) are given \
         in the metadata, with each model comprising attributes outlined in {fields}.\n\
         Your role is to creatively rewrite original questions into Hypothetical Questions (HQ) based on the chart's \
         information. Each original question should be rephrased into two different hypothetical questions.\n\
         Ensure:\n\
         1. Adhere to the ideas in #Feasible Rewrite Proposals#.\n\
         2. HQ should also adhere to the format in #Demonstration# and use specific details from the chart. It also \
         needs to be as clear as possible.\n\
         3. Keep the original question as part of rewritten HQ.\n\
         4. The answer to the HQ should differ from the original answer.\n\
         5. Provide the name of the color in words, not any code like #FF0000.\n\
         6. When the answer is a percentage value, it needs to be answered as a percentage.\n\
         7. If the calculation process includes percentage values, you need to pay attention to the percent \
         operation.\n\
         \n\
         #Feasible Rewrite Proposals#\n\
         1. {}\n\
         2. {}\n\
         3. {}\n\
         \n\
         #Demonstration#:\n\
         Original question: {}\n\
         Hypothetical question examples:\n\
         1. {}\n\
         2. {}\n\
         \n\
         #Chart Metadata#:\n\
         {}\n\
         \n\
         **Please directly complete HQs and produce the following text information. Note that the answers should \
         not include any explanation or units.**:\n\
         {}\n\
         {}",
        proposals[0].text,
        proposals[1].text,
        proposals[2].text,
        demo.question,
        demo.rewrites[0],
        demo.rewrites[1],
        chart.metadata_json(),
        block("First Original Question", &originals[0]),
        block("Second Original Question", &originals[1]),
    )
}

const HQA_LABELS: [&str; 4] = ["question_1", "answer_1", "question_2", "answer_2"];

fn label_of(line: &str) -> Option<(&'static str, &str)> {
    let (head, rest) = line.split_once(':')?;
    let key = head
        .trim()
        .trim_matches('*')
        .trim()
        .to_ascii_lowercase()
        .replace(' ', "_");
    HQA_LABELS.iter().find(|l| **l == key).map(|l| (*l, rest.trim()))
}

fn parse_block(block: &str) -> Option<[QaPair; 2]> {
    let lines: Vec<&str> = block.lines().collect();
    let mut values: [Option<String>; 4] = Default::default();
    for (i, line) in lines.iter().enumerate() {
        let Some((label, rest)) = label_of(line) else { continue };
        let slot = HQA_LABELS.iter().position(|l| *l == label)?;
        if values[slot].is_some() {
            continue;
        }
        let value = if rest.is_empty() {
            // value on the following line
            lines[i + 1..]
                .iter()
                .map(|l| l.trim())
                .find(|l| !l.is_empty())
                .filter(|l| label_of(l).is_none())
                .unwrap_or("")
        } else {
            rest
        };
        values[slot] = Some(value.to_string());
    }
    let [q1, a1, q2, a2] = values;
    Some([
        QaPair {
            question: q1?,
            answer: a1?,
        },
        QaPair {
            question: q2?,
            answer: a2?,
        },
    ])
}

/// Splits a rewriter reply into two rewrites per original question.
pub fn parse_hqa_reply(reply: &str) -> Result<[[QaPair; 2]; 2]> {
    let lower = reply.to_ascii_lowercase();
    let split = lower
        .find("second original question")
        .ok_or_else(|| Error::HqaParseError("no `Second Original Question` section".into()))?;
    let first = parse_block(&reply[..split])
        .ok_or_else(|| Error::HqaParseError("first section lacks Question_1/Answer_1/Question_2/Answer_2".into()))?;
    let second = parse_block(&reply[split..])
        .ok_or_else(|| Error::HqaParseError("second section lacks Question_1/Answer_1/Question_2/Answer_2".into()))?;
    Ok([first, second])
}

fn same_answer(a: &str, b: &str) -> bool {
    match (parse_number(a), parse_number(b)) {
        (Some(x), Some(y)) => (x - y).abs() < 1e-9,
        _ => normalize_text(a) == normalize_text(b),
    }
}

fn check_instance(original: &QaPair, rewrite: &QaPair) -> Option<(&'static str, String)> {
    if rewrite.question.trim().is_empty() || rewrite.answer.trim().is_empty() {
        return Some(("complete", "empty hypothetical question or answer".into()));
    }
    if !normalize_text(&rewrite.question).contains(&normalize_text(&original.question)) {
        return Some((
            "keeps_original_question",
            format!("{:?} does not contain {:?}", rewrite.question, original.question),
        ));
    }
    if same_answer(&rewrite.answer, &original.answer) {
        return Some((
            "answer_differs",
            format!("answer {:?} equals the original", rewrite.answer),
        ));
    }
    for text in [&rewrite.question, &rewrite.answer] {
        if let Some(m) = hex_color_re().find(text) {
            return Some(("color_in_words", format!("hex color code {}", m.as_str())));
        }
    }
    None
}

/// The hypothetical question with the original question cut out.
fn assumption_of(hq: &str, original: &str) -> String {
    let lower = hq.to_ascii_lowercase();
    let trimmed = original.trim();
    for needle in [trimmed, trimmed.trim_end_matches('?')] {
        let needle = needle.to_ascii_lowercase();
        if needle.is_empty() {
            continue;
        }
        if let Some(pos) = lower.find(&needle) {
            let joined = format!("{} {}", &hq[..pos], &hq[pos + needle.len()..]);
            let cleaned = joined
                .split_whitespace()
                .collect::<Vec<_>>()
                .join(" ")
                .trim_matches(|c: char| c.is_whitespace() || matches!(c, ',' | ';' | '?'))
                .to_string();
            if !cleaned.is_empty() {
                return cleaned;
            }
        }
    }
    hq.trim().to_string()
}

fn words(s: &str) -> HashSet<String> {
    s.split(|c: char| !c.is_alphanumeric())
        .filter(|w| w.chars().count() >= 3)
        .map(str::to_lowercase)
        .collect()
}

/// Proposal sharing the most words with the assumption; ties prefer
/// `slot % 3`, then the lower index.
fn attribute(proposals: &[InstructionProposal], assumption: &str, slot: usize) -> usize {
    let target = words(assumption);
    let preferred = slot % proposals.len();
    let mut best = preferred;
    let mut best_score = words(&proposals[preferred].text).intersection(&target).count();
    for (i, p) in proposals.iter().enumerate() {
        let score = words(&p.text).intersection(&target).count();
        if score > best_score {
            best = i;
            best_score = score;
        }
    }
    best
}

/// One rewriter call turning two factoid QAs into up to four pending
/// hypothetical instances. Rewrites that break a template rule are dropped
/// and reported.
pub fn generate_hqa(
    gateway: &Gateway,
    proposals: &[InstructionProposal],
    originals: &[QaPair],
    chart: &ChartContext,
    demo: &Demonstration,
    retry_limit: u32,
) -> Result<HqaBatch> {
    if proposals.len() != NEW_PROPOSALS {
        return Err(Error::Validation(format!(
            "the rewriter needs 3 proposals, got {}",
            proposals.len()
        )));
    }
    if originals.len() != 2 {
        return Err(Error::Validation(format!(
            "the rewriter needs 2 original QA pairs, got {}",
            originals.len()
        )));
    }
    chart.validate()?;
    let base = hqa_prompt(proposals, originals, chart, demo);
    let attempts = retry_limit.max(1);
    let mut last_err = None;
    let mut parsed = None;
    for attempt in 1..=attempts {
        let user = if attempt == 1 {
            base.clone()
        } else {
            format!("{base}\n(Attempt {attempt}: fill in every Question_N and Answer_N line.)")
        };
        let req = gateway.request(ModelTarget::Optimizer, REWRITER_SYSTEM, &user);
        match parse_hqa_reply(&gateway.complete(&req)?.text) {
            Ok(p) => {
                parsed = Some(p);
                break;
            }
            Err(e) => last_err = Some(e),
        }
    }
    let Some(rewrites) = parsed else {
        return Err(last_err.unwrap_or_else(|| Error::HqaParseError("no reply".into())));
    };

    let mut batch = HqaBatch::default();
    for (oi, pair) in rewrites.iter().enumerate() {
        let original = &originals[oi];
        for (ri, rewrite) in pair.iter().enumerate() {
            let slot = oi * 2 + ri;
            if let Some((rule, detail)) = check_instance(original, rewrite) {
                tracing::warn!(slot, rule, %detail, "dropping hypothetical instance");
                batch.violations.push(Violation {
                    chart_id: None,
                    slot,
                    rule: rule.into(),
                    detail,
                });
                continue;
            }
            let assumption = assumption_of(&rewrite.question, &original.question);
            let source = &proposals[attribute(proposals, &assumption, slot)];
            let material = format!(
                "{}\u{1f}{}\u{1f}{}\u{1f}{}",
                chart.metadata_json(),
                original.question,
                rewrite.question,
                rewrite.answer
            );
            batch.instances.push(HqaInstance {
                id: format!("h-{}", &sha256_hex(material.as_bytes())[..12]),
                chart: chart.clone(),
                original_question: original.question.clone(),
                original_answer: original.answer.clone(),
                assumption,
                hypothetical_question: rewrite.question.trim().to_string(),
                answer: rewrite.answer.trim().to_string(),
                answer_type: classify_answer_type(&rewrite.answer),
                proposal_id: source.id.clone(),
                proposal_text: source.text.clone(),
                status: InstanceStatus::Pending,
                verdicts: Vec::new(),
            });
        }
    }
    Ok(batch)
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerdictEffect {
    pub instance: HqaInstance,
    /// Proposal appended to the pool, if any.
    pub added: Option<InstructionProposal>,
    pub warning: Option<String>,
}

fn revision_prompt(instance: &HqaInstance, comment: &str) -> String {
    format!(
        "The following instruction for asking hypothetical questions about {} charts produced a question that a \
         human reviewer rejected.\nInstruction: {}\nRejected question: {}\nReviewer feedback: {}\n\n\
         Reflect on the feedback and rewrite the instruction so that questions generated from it avoid the problem. \
         Keep its two parts: how to specify the elements and the assumed change to be applied on the elements. \
         Reply as:\nRevised instruction: <text>",
        instance.chart_type(),
        instance.proposal_text,
        instance.hypothetical_question,
        comment
    )
}

fn parse_revision(reply: &str) -> Option<String> {
    let lower = reply.to_ascii_lowercase();
    let pos = lower.find("revised instruction:")?;
    let text = reply[pos + "revised instruction:".len()..].trim();
    (!text.is_empty()).then(|| text.to_string())
}

/// Applies a reviewer verdict. Acceptance pools the source proposal as is;
/// rejection asks the optimizer model once for a revised proposal carrying
/// the reviewer's comment. A failed revision leaves the pool unchanged.
pub fn apply_verdict(
    gateway: &Gateway,
    instance: &HqaInstance,
    verdict: &ReviewVerdict,
    pool: &ProposalPool,
    retry_limit: u32,
) -> Result<VerdictEffect> {
    if instance.status != InstanceStatus::Pending {
        return Err(Error::AlreadyReviewed(instance.id.clone()));
    }
    verdict.validate()?;
    let mut updated = instance.clone();
    updated.verdicts.push(verdict.clone());
    let source = pool
        .get(&instance.proposal_id)
        .cloned()
        .unwrap_or_else(|| InstructionProposal {
            id: instance.proposal_id.clone(),
            chart_type: instance.chart_type(),
            text: instance.proposal_text.clone(),
            provenance: Provenance::Generated,
            feedback_log: Vec::new(),
        });

    if verdict.accept {
        updated.status = InstanceStatus::Accepted;
        let added = (!pool.contains(&source.id)).then_some(source);
        return Ok(VerdictEffect {
            instance: updated,
            added,
            warning: None,
        });
    }

    updated.status = InstanceStatus::Rejected;
    let comment = if verdict.comment.trim().is_empty() {
        let a = &verdict.aspects;
        format!(
            "rejected (question reasonable: {}, answer accurate: {}, complexity adequate: {})",
            a.question_reasonable, a.answer_accurate, a.complexity_adequate
        )
    } else {
        verdict.comment.trim().to_string()
    };
    let base = revision_prompt(instance, &comment);
    let mut revised = None;
    let mut warning = None;
    for attempt in 1..=retry_limit.max(1) {
        let user = if attempt == 1 {
            base.clone()
        } else {
            format!("{base}\n(Attempt {attempt}: begin the reply with `Revised instruction:`.)")
        };
        let req = gateway.request(ModelTarget::Optimizer, PROPOSAL_SYSTEM, &user);
        match gateway.complete(&req) {
            Ok(resp) => {
                if let Some(text) = parse_revision(&resp.text) {
                    revised = Some(text);
                    break;
                }
                warning = Some("revision reply had no `Revised instruction:` line".to_string());
            }
            Err(e) => {
                warning = Some(format!("revision call failed: {e}"));
                break;
            }
        }
    }
    let added = revised.map(|text| {
        let mut feedback_log = source.feedback_log.clone();
        feedback_log.push(comment.clone());
        let material = format!("{}\u{1f}{}\u{1f}{text}", source.id, comment);
        InstructionProposal {
            id: format!("r-{}", &sha256_hex(material.as_bytes())[..12]),
            chart_type: source.chart_type,
            text,
            provenance: Provenance::Revised,
            feedback_log,
        }
    });
    let warning = if added.is_some() { None } else { warning };
    if let Some(w) = &warning {
        tracing::warn!(instance = %instance.id, "{w}; pool unchanged");
    }
    Ok(VerdictEffect {
        instance: updated,
        added,
        warning,
    })
}

fn round_rng(seed: u64, round: u32, chart: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((u64::from(round) << 32) | chart as u64);
    rng
}

/// One synthesis round over all charts. Charts run in parallel; each uses
/// its own seeded stream so the batch is reproducible. Per-chart failures
/// are reported, not fatal.
pub fn run_round(
    gateway: &Gateway,
    pool: &ProposalPool,
    charts: &[SynthesisChart],
    cfg: &SynthesisConfig,
    round: u32,
) -> HqaBatch {
    let results: Vec<(usize, Result<HqaBatch>)> = charts
        .par_iter()
        .enumerate()
        .map(|(ci, c)| (ci, synthesize_chart(gateway, pool, c, cfg, round, ci)))
        .collect();
    let mut batch = HqaBatch::default();
    for (ci, result) in results {
        let chart_id = &charts[ci].id;
        match result {
            Ok(b) => {
                batch.instances.extend(b.instances);
                batch.violations.extend(b.violations.into_iter().map(|mut v| {
                    v.chart_id = Some(chart_id.clone());
                    v
                }));
            }
            Err(e) => batch.failures.push(ChartFailure {
                chart_id: chart_id.clone(),
                error: e.to_string(),
            }),
        }
    }
    batch
}

fn synthesize_chart(
    gateway: &Gateway,
    pool: &ProposalPool,
    chart: &SynthesisChart,
    cfg: &SynthesisConfig,
    round: u32,
    ci: usize,
) -> Result<HqaBatch> {
    let n = chart.qa.len();
    if n < 2 {
        return Err(Error::Validation(format!(
            "chart {} needs at least 2 QA pairs",
            chart.id
        )));
    }
    let mut rng = round_rng(cfg.rng_seed, round, ci);
    let proposals = generate_proposals(gateway, pool, &chart.chart, &mut rng, cfg.retry_limit)?;
    let first = (2 * round as usize) % n;
    let second = (first + 1) % n;
    let originals = [chart.qa[first].clone(), chart.qa[second].clone()];
    generate_hqa(
        gateway,
        &proposals,
        &originals,
        &chart.chart,
        &cfg.demonstration,
        cfg.retry_limit,
    )
}
