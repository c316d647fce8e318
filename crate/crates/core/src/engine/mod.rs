//! The planning-then-action agent.
//!
//! The policy model turns a question into a [`ToolPlan`]; the action models
//! then run strictly in order, each seeing the outputs of the steps before
//! it. The program step executes generated code through a
//! [`ProgramExecutor`] and the solution step produces the final answer.

mod executor;

use std::sync::{Arc, OnceLock};
use std::time::Instant;

use regex::Regex;

use crate::domain::{
    AgentRole, ChartContext, PlanStep, PromptSet, Sample, StepStatus, ToolPlan, ToolStep, ToolTrajectory,
};
use crate::error::{Error, Result};
use crate::gateway::{Gateway, ModelTarget};

pub use executor::{extract_code, ProcessExecutor, ProgramExecutor};

#[derive(Clone, Debug, PartialEq)]
pub struct EngineConfig {
    pub max_plan_steps: usize,
    pub parse_retry_limit: u32,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            max_plan_steps: 6,
            parse_retry_limit: 3,
        }
    }
}

/// Outputs of the steps run so far, in order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ContextCache {
    entries: Vec<(AgentRole, String)>,
}

impl ContextCache {
    pub fn push(&mut self, role: AgentRole, output: impl Into<String>) {
        self.entries.push((role, output.into()));
    }

    pub fn entries(&self) -> &[(AgentRole, String)] {
        &self.entries
    }

    pub fn render(&self) -> String {
        if self.entries.is_empty() {
            return "(none)".to_string();
        }
        self.entries
            .iter()
            .enumerate()
            .map(|(i, (role, out))| format!("[{}] {role}:\n{out}", i + 1))
            .collect::<Vec<_>>()
            .join("\n\n")
    }
}

pub struct AgentEngine {
    gateway: Arc<Gateway>,
    executor: Arc<dyn ProgramExecutor>,
    config: EngineConfig,
}

impl AgentEngine {
    pub fn new(gateway: Arc<Gateway>, executor: Arc<dyn ProgramExecutor>, config: EngineConfig) -> Self {
        AgentEngine {
            gateway,
            executor,
            config,
        }
    }

    pub fn gateway(&self) -> &Arc<Gateway> {
        &self.gateway
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn plan(&self, sample: &Sample, prompts: &PromptSet) -> Result<ToolPlan> {
        self.plan_with_warnings(sample, prompts).map(|(plan, _)| plan)
    }

    fn plan_with_warnings(&self, sample: &Sample, prompts: &PromptSet) -> Result<(ToolPlan, Vec<String>)> {
        let base = policy_prompt(sample);
        let attempts = self.config.parse_retry_limit.max(1);
        let mut last_reply = String::new();
        for attempt in 1..=attempts {
            let user = if attempt == 1 {
                base.clone()
            } else {
                format!(
                    "{base}\n\nAttempt {attempt}: the previous reply was not a valid plan. \
                     Use only the listed module names, one numbered line each."
                )
            };
            let req = self.gateway.request(
                ModelTarget::agent(AgentRole::Policy),
                prompts.get(AgentRole::Policy),
                &user,
            );
            let reply = self.gateway.complete(&req)?.text;
            if let Some(steps) = parse_plan(&reply) {
                return Ok(self.finish_plan(steps));
            }
            last_reply = reply;
        }
        Err(Error::PlanParseError {
            attempts,
            detail: truncate(&last_reply, 200),
        })
    }

    fn finish_plan(&self, mut steps: Vec<PlanStep>) -> (ToolPlan, Vec<String>) {
        let mut warnings = Vec::new();
        if steps.last().map(|s| s.role) != Some(AgentRole::Solution) {
            steps.push(PlanStep {
                role: AgentRole::Solution,
                query: String::new(),
            });
        }
        let max = self.config.max_plan_steps.max(1);
        if steps.len() > max {
            warnings.push(format!("plan of {} steps truncated to {max}", steps.len()));
            let solution = steps.pop().expect("non-empty");
            steps.truncate(max - 1);
            steps.push(solution);
        }
        (ToolPlan { steps }, warnings)
    }

    /// Runs one action step. Failures are reported through the returned
    /// step's status; the output then holds the error message.
    pub fn execute_step(
        &self,
        role: AgentRole,
        step_query: &str,
        context: &ContextCache,
        prompts: &PromptSet,
        sample: &Sample,
    ) -> ToolStep {
        let started = Instant::now();
        let input_context = context.render();
        let result = self.step_output(role, step_query, &input_context, prompts, sample);
        let elapsed_ms = started.elapsed().as_millis() as u64;
        let (status, output) = match result {
            Ok(out) if out.trim().is_empty() => (StepStatus::ExecutionError, format!("{role} produced no output")),
            Ok(out) => (StepStatus::Ok, out),
            Err(e @ Error::ExecutorTimeout { .. }) => (StepStatus::Timeout, e.to_string()),
            Err(e) => (StepStatus::ExecutionError, e.to_string()),
        };
        ToolStep {
            role,
            input_context,
            output,
            status,
            elapsed_ms,
        }
    }

    fn step_output(
        &self,
        role: AgentRole,
        step_query: &str,
        context: &str,
        prompts: &PromptSet,
        sample: &Sample,
    ) -> Result<String> {
        let chart = &sample.chart;
        match role {
            AgentRole::Policy => Err(Error::Validation("policy cannot run as an action step".into())),
            AgentRole::DataRetrieval => {
                if let Some(table) = &chart.table_text {
                    return Ok(table.clone());
                }
                let user = format!(
                    "Sub-task: {step_query}\nQuestion: {}\n{}\n\n\
                     Return the relevant data as a table: a header row, then one row per data point, \
                     cells separated by \" | \".",
                    sample.question,
                    chart_block(chart)
                );
                self.ask(role, prompts, &user).map(|s| s.trim().to_string())
            }
            AgentRole::VisualRetrieval => {
                let user = format!(
                    "Sub-task: {step_query}\nQuestion: {}\n{}\n\n\
                     State the visual attributes relevant to the sub-task, one statement per line.",
                    sample.question,
                    chart_block(chart)
                );
                self.ask(role, prompts, &user).map(|s| s.trim().to_string())
            }
            AgentRole::Program => {
                let user = format!(
                    "Sub-task: {step_query}\nQuestion: {}\nCached results:\n{context}\n\n\
                     Write a Python program that computes the sub-task and prints only the result.",
                    sample.question
                );
                let reply = self.ask(role, prompts, &user)?;
                let out = self.executor.execute(&extract_code(&reply))?;
                Ok(out.trim().to_string())
            }
            AgentRole::Solution => {
                let user = format!(
                    "Question: {}\nSub-task: {step_query}\nCached results:\n{context}\n\n\
                     Use all cached results to answer. Finish with a line `Answer: <value>`.",
                    sample.question
                );
                self.ask(role, prompts, &user).map(|s| s.trim().to_string())
            }
        }
    }

    fn ask(&self, role: AgentRole, prompts: &PromptSet, user: &str) -> Result<String> {
        let req = self.gateway.request(ModelTarget::agent(role), prompts.get(role), user);
        Ok(self.gateway.complete(&req)?.text)
    }

    /// Plans, executes every step in order and extracts the prediction.
    /// Only invalid prompts make this fail; everything else is recorded in
    /// the trajectory.
    pub fn run(&self, sample: &Sample, prompts: &PromptSet) -> Result<ToolTrajectory> {
        prompts.validate()?;
        let (plan, warnings) = match self.plan_with_warnings(sample, prompts) {
            Ok(p) => p,
            Err(e) => {
                return Ok(ToolTrajectory {
                    sample_id: sample.id.clone(),
                    plan: ToolPlan::default(),
                    steps: Vec::new(),
                    prediction: String::new(),
                    warnings: Vec::new(),
                    failure: Some(format!("policy: {e}")),
                })
            }
        };
        for w in &warnings {
            tracing::warn!(sample = %sample.id, "{w}");
        }

        let mut context = ContextCache::default();
        let mut steps = Vec::with_capacity(plan.len());
        let mut failure = None;
        for planned in &plan.steps {
            let step = self.execute_step(planned.role, &planned.query, &context, prompts, sample);
            let ok = step.status == StepStatus::Ok;
            if ok {
                context.push(step.role, step.output.clone());
            } else {
                failure = Some(format!("{}: {}", step.role, step.output));
            }
            steps.push(step);
            if !ok {
                break;
            }
        }

        let prediction = match (&failure, steps.iter().rev().find(|s| s.role == AgentRole::Solution)) {
            (None, Some(sol)) => extract_answer(&sol.output),
            _ => String::new(),
        };
        Ok(ToolTrajectory {
            sample_id: sample.id.clone(),
            plan,
            steps,
            prediction,
            warnings,
            failure,
        })
    }
}

fn chart_block(chart: &ChartContext) -> String {
    format!(
        "Chart: {}\nMetadata: {}",
        chart.chart_description(),
        chart.metadata_json()
    )
}

fn policy_prompt(sample: &Sample) -> String {
    format!(
        "Question: {}\nChart: {}\nFields: {}\n\n\
         Available modules:\n\
         - data_retrieval: extract the chart data as a structured table\n\
         - visual_retrieval: describe visual attributes such as colors, positions and trends\n\
         - program: write and run a Python program over the cached results\n\
         - solution: answer the question from all cached results\n\n\
         Reply with a numbered plan, one module per line, formatted as `N. module: sub-task`. \
         The last step must be `solution`.",
        sample.question,
        sample.chart.chart_description(),
        sample.chart.field_description()
    )
}

fn plan_line_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\s*(?:[Ss]tep\s*)?\d+\s*[.):]\s*(.+)$").unwrap())
}

/// Parses numbered `N. module: sub-task` lines. Unnumbered lines are
/// ignored; a numbered line naming an unknown module or the policy
/// invalidates the whole plan.
pub fn parse_plan(reply: &str) -> Option<Vec<PlanStep>> {
    let mut steps = Vec::new();
    for line in reply.lines() {
        let Some(caps) = plan_line_re().captures(line) else {
            continue;
        };
        let body = caps[1].trim();
        let (name, query) = match body.split_once(':') {
            Some((n, q)) => (n, q.trim()),
            None => (body, ""),
        };
        let name = name.trim().trim_matches(|c| c == '`' || c == '*');
        let role: AgentRole = name.parse().ok()?;
        if role == AgentRole::Policy {
            return None;
        }
        steps.push(PlanStep {
            role,
            query: query.to_string(),
        });
    }
    (!steps.is_empty()).then_some(steps)
}

/// Text after the last `Answer:` marker up to the end of that line; the
/// whole text when there is no marker.
pub fn extract_answer(solution: &str) -> String {
    let lower = solution.to_ascii_lowercase();
    match lower.rfind("answer:") {
        Some(pos) => {
            let rest = &solution[pos + "answer:".len()..];
            rest.lines().next().unwrap_or("").trim().to_string()
        }
        None => solution.trim().to_string(),
    }
}

fn truncate(s: &str, max: usize) -> String {
    match s.char_indices().nth(max) {
        Some((idx, _)) => format!("{}…", &s[..idx]),
        None => s.to_string(),
    }
}
