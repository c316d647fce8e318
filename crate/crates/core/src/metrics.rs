//! Relaxed accuracy, answer-type classification, per-type variance and
//! decline rate.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use rayon::prelude::*;
use regex::Regex;

use crate::domain::{AnswerType, EvalReport, PromptSet, Sample, TypeAccuracy};
use crate::engine::AgentEngine;
use crate::error::{Error, Result};

/// Relative numeric tolerance, inclusive.
pub const RELAXED_TOLERANCE: f64 = 0.05;
const FLOAT_GUARD: f64 = 1e-9;

const CURRENCY: &[char] = &['$', '€', '£', '¥', '₹'];

fn number_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^[+-]?(\d+\.?\d*|\.\d+)$").unwrap())
}

fn integer_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^[+-]?\d+$").unwrap())
}

/// Strips whitespace, thousands separators, a trailing `%` and currency
/// symbols. Returns the canonical numeric spelling if what remains is a
/// plain decimal number.
fn numeric_form(s: &str) -> Option<String> {
    let mut t: String = s
        .chars()
        .filter(|c| !c.is_whitespace() && *c != ',' && !CURRENCY.contains(c))
        .collect();
    if t.ends_with('%') {
        t.pop();
    }
    number_re().is_match(&t).then_some(t)
}

pub fn parse_number(s: &str) -> Option<f64> {
    numeric_form(s)
        .and_then(|t| t.parse::<f64>().ok())
        .filter(|v| v.is_finite())
}

/// Case-folded, whitespace-collapsed, trailing punctuation removed.
pub fn normalize_text(s: &str) -> String {
    let collapsed = s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
    collapsed
        .trim_end_matches(|c: char| c.is_ascii_punctuation() && c != '%')
        .trim_end()
        .to_string()
}

/// Exact match with 5% relative tolerance on numbers.
pub fn relaxed_match(prediction: &str, gold: &str) -> bool {
    if let (Some(p), Some(g)) = (parse_number(prediction), parse_number(gold)) {
        if g == 0.0 {
            return p == 0.0;
        }
        return (p - g).abs() / g.abs() <= RELAXED_TOLERANCE + FLOAT_GUARD;
    }
    normalize_text(prediction) == normalize_text(gold)
}

/// Precedence BOOL > INT > DEC > TEXT.
pub fn classify_answer_type(gold: &str) -> AnswerType {
    let lower = gold.trim().to_lowercase();
    if matches!(lower.as_str(), "yes" | "no" | "true" | "false") {
        return AnswerType::Bool;
    }
    match numeric_form(gold) {
        Some(n) if integer_re().is_match(&n) => AnswerType::Int,
        Some(_) if parse_number(gold).is_some() => AnswerType::Dec,
        _ => AnswerType::Text,
    }
}

/// Population variance (divides by n).
pub fn population_variance(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n
}

/// `|acc_qa - acc_hqa| / acc_qa * 100`, rounded to two decimals.
pub fn decline_rate(acc_qa: f64, acc_hqa: f64) -> Result<f64> {
    if acc_qa == 0.0 {
        return Err(Error::UndefinedDecline);
    }
    let raw = (acc_qa - acc_hqa).abs() / acc_qa * 100.0;
    Ok((raw * 100.0).round() / 100.0)
}

/// Builds a report from `(gold, matched)` pairs in dataset order.
pub fn report_from_scores<'a>(scored: impl IntoIterator<Item = (&'a str, &'a str, bool)>) -> EvalReport {
    let mut n = 0usize;
    let mut hits = 0usize;
    let mut buckets: BTreeMap<AnswerType, (usize, usize)> = BTreeMap::new();
    let mut failures = Vec::new();
    for (id, gold, matched) in scored {
        n += 1;
        let b = buckets.entry(classify_answer_type(gold)).or_default();
        b.0 += 1;
        if matched {
            hits += 1;
            b.1 += 1;
        } else {
            failures.push(id.to_string());
        }
    }
    let per_type: BTreeMap<AnswerType, TypeAccuracy> = buckets
        .into_iter()
        .map(|(t, (count, ok))| {
            let accuracy = 100.0 * ok as f64 / count as f64;
            (t, TypeAccuracy { count, accuracy })
        })
        .collect();
    let variance = (per_type.len() == AnswerType::ALL.len()).then(|| {
        let accs: Vec<f64> = per_type.values().map(|t| t.accuracy).collect();
        population_variance(&accs)
    });
    EvalReport {
        n,
        accuracy: if n == 0 { 0.0 } else { 100.0 * hits as f64 / n as f64 },
        per_type,
        variance,
        failures,
    }
}

/// Runs the agent over `dataset` and scores each prediction with
/// [`relaxed_match`]. Samples run in parallel; aggregation follows dataset
/// order.
pub fn evaluate(engine: &AgentEngine, dataset: &[Sample], prompts: &PromptSet) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::Config("evaluation dataset is empty".into()));
    }
    prompts.validate()?;
    let matches: Vec<bool> = dataset
        .par_iter()
        .map(|s| {
            let traj = engine.run(s, prompts)?;
            Ok(relaxed_match(&traj.prediction, &s.gold_answer))
        })
        .collect::<Result<_>>()?;
    Ok(report_from_scores(
        dataset
            .iter()
            .zip(matches)
            .map(|(s, m)| (s.id.as_str(), s.gold_answer.as_str(), m)),
    ))
}

/// Fixed-width text rendering of a report.
pub fn render_report(report: &EvalReport) -> String {
    let mut out = format!("{:<6} {:>6} {:>9}\n", "type", "count", "accuracy");
    for (t, ta) in &report.per_type {
        out.push_str(&format!("{:<6} {:>6} {:>9.2}\n", t.as_str(), ta.count, ta.accuracy));
    }
    out.push_str(&format!("{:<6} {:>6} {:>9.2}\n", "all", report.n, report.accuracy));
    match report.variance {
        Some(v) => out.push_str(&format!("variance {v:.2}\n")),
        None => out.push_str("variance n/a (not all answer types present)\n"),
    }
    out
}
