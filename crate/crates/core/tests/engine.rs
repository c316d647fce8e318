use std::sync::Arc;
use std::time::Duration;

use chartflow_core::domain::{AgentRole, ErrorCategory, OptimizerConfig, PromptSet, Sample, StepStatus};
use chartflow_core::engine::{AgentEngine, EngineConfig, ProcessExecutor, ProgramExecutor};
use chartflow_core::feedback::{self, RewardMode, DEFAULT_RUBRIC};
use chartflow_core::gateway::{Gateway, ScriptedBackend};
use chartflow_core::optimizer::evaluate_prompts;
use chartflow_core::testkit::{base_prompts, toy_dataset};
use chartflow_core::Error;

fn python(timeout_ms: u64) -> ProcessExecutor {
    ProcessExecutor::python(Duration::from_millis(timeout_ms), std::env::temp_dir())
}

/// Plans data retrieval, program and solution; the program body is chosen
/// per question so one sample can hang.
fn program_world(samples: &[Sample]) -> Gateway {
    let hang = samples[0].question.clone();
    Gateway::scripted(ScriptedBackend::from_fn(move |req| {
        let user = req.user_prompt();
        if user.contains("Available modules:") {
            return Some("1. data_retrieval: read\n2. program: add\n3. solution: answer".into());
        }
        if user.contains("Write a Python program") {
            if user.contains(&hang) {
                return Some("```python\nimport time\ntime.sleep(30)\n```".into());
            }
            return Some("```python\nprint(40 + 2)\n```".into());
        }
        if user.contains("Use all cached results") {
            let last = user
                .lines()
                .rev()
                .find(|l| l.trim().parse::<f64>().is_ok())
                .unwrap_or("0");
            return Some(format!("Answer: {}", last.trim()));
        }
        if user.contains("Rate the tool chain") {
            return Some("Score: 9\nCategory: none\nRationale: fine".into());
        }
        None
    }))
}

fn with_gold(mut samples: Vec<Sample>, gold: &str) -> Vec<Sample> {
    for s in &mut samples {
        s.gold_answer = gold.into();
    }
    samples
}

#[test]
fn python_program_step_runs() {
    let out = python(5_000).execute("print(sum([1, 2, 3]))").unwrap();
    assert_eq!(out.trim(), "6");
    match python(5_000).execute("raise SystemExit(3)") {
        Err(Error::ExecutorFailure { code: Some(3), .. }) => {}
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn executor_kills_runaway_program() {
    let started = std::time::Instant::now();
    let err = python(300).execute("import time\ntime.sleep(30)").unwrap_err();
    assert!(matches!(err, Error::ExecutorTimeout { timeout_ms: 300 }));
    assert!(started.elapsed() < Duration::from_secs(10));
}

#[test]
fn engine_chains_program_output_into_solution() {
    let samples = with_gold(toy_dataset(2), "42");
    let engine = AgentEngine::new(
        Arc::new(program_world(&samples)),
        Arc::new(python(5_000)),
        EngineConfig::default(),
    );
    let traj = engine.run(&samples[1], &base_prompts()).unwrap();
    assert!(traj.failure.is_none(), "{traj:?}");
    let roles: Vec<_> = traj.steps.iter().map(|s| s.role).collect();
    assert_eq!(
        roles,
        [AgentRole::DataRetrieval, AgentRole::Program, AgentRole::Solution]
    );
    assert_eq!(traj.steps[1].output, "42");
    assert_eq!(traj.prediction, "42");
    traj.check_alignment().unwrap();
}

#[test]
fn timeout_truncates_and_scores_without_aborting_the_batch() {
    let samples = with_gold(toy_dataset(3), "42");
    let engine = AgentEngine::new(
        Arc::new(program_world(&samples)),
        Arc::new(python(300)),
        EngineConfig::default(),
    );
    let cfg = OptimizerConfig::default();
    let outcomes = evaluate_prompts(&engine, DEFAULT_RUBRIC, &base_prompts(), &samples, &cfg).unwrap();
    assert_eq!(outcomes.len(), 3);

    let hung = &outcomes[0];
    assert_eq!(hung.trajectory.steps.len(), 2);
    assert_eq!(hung.trajectory.steps[1].status, StepStatus::Timeout);
    assert!(hung.trajectory.is_truncated());
    assert_eq!(hung.trajectory.prediction, "");
    assert_eq!(hung.assessment.score, 1);
    assert_eq!(hung.assessment.category, ErrorCategory::Invalid);
    assert!(!hung.assessment.coordinated);
    assert!(!hung.accuracy);
    assert_eq!(hung.reward, 0.0);

    // an accurate answer with this assessment would cost -alpha
    let mode = RewardMode::new(cfg.alpha, false).unwrap();
    assert_eq!(mode.reward(true, hung.assessment.coordinated), -cfg.alpha);

    for o in &outcomes[1..] {
        assert!(o.accuracy && o.assessment.coordinated);
        assert_eq!(o.reward, 1.0);
    }
    assert!((feedback::prompt_reward(&outcomes).unwrap() - 2.0 / 3.0).abs() < 1e-12);
}

#[test]
fn unparseable_plan_yields_failed_trajectory() {
    let samples = toy_dataset(1);
    let gw = Gateway::scripted(ScriptedBackend::from_fn(|req| {
        req.user_prompt()
            .contains("Available modules:")
            .then(|| "I cannot plan this.".to_string())
    }));
    let engine = AgentEngine::new(Arc::new(gw), Arc::new(python(1_000)), EngineConfig::default());
    let traj = engine.run(&samples[0], &base_prompts()).unwrap();
    assert!(traj.plan.is_empty());
    assert!(traj.failure.as_deref().unwrap().contains("plan"));
    let a = feedback::assess_trajectory(engine.gateway(), DEFAULT_RUBRIC, &samples[0], &traj, 7, 3).unwrap();
    assert_eq!((a.score, a.category), (1, ErrorCategory::Invalid));
    assert_eq!(engine.gateway().backend_calls(), 3);
}

#[test]
fn long_plans_are_capped_with_solution_last() {
    let samples = toy_dataset(1);
    let gw = Gateway::scripted(ScriptedBackend::from_fn(|req| {
        let user = req.user_prompt();
        if user.contains("Available modules:") {
            let lines: Vec<String> = (1..=9).map(|i| format!("{i}. visual_retrieval: look {i}")).collect();
            return Some(lines.join("\n"));
        }
        if user.contains("State the visual attributes") {
            return Some("blue bars".into());
        }
        user.contains("Use all cached results")
            .then(|| "Answer: 10".to_string())
    }));
    let engine = AgentEngine::new(Arc::new(gw), Arc::new(python(1_000)), EngineConfig::default());
    let traj = engine.run(&samples[0], &base_prompts()).unwrap();
    assert_eq!(traj.plan.len(), 6);
    assert_eq!(traj.plan.steps.last().unwrap().role, AgentRole::Solution);
    assert_eq!(traj.warnings.len(), 1);
    assert_eq!(traj.prediction, "10");
}

#[test]
fn invalid_prompts_are_rejected_before_any_call() {
    let samples = toy_dataset(1);
    let gw = Gateway::scripted(ScriptedBackend::from_fn(|_| None));
    let engine = AgentEngine::new(Arc::new(gw), Arc::new(python(1_000)), EngineConfig::default());
    let mut p: PromptSet = base_prompts();
    p.prompts.remove(&AgentRole::Program);
    assert!(engine.run(&samples[0], &p).is_err());
    assert_eq!(engine.gateway().backend_calls(), 0);
}
