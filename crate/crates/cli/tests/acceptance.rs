//! Acceptance suite: one PASS/FAIL line per criterion. Exits non-zero when
//! any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use chartflow_core::domain::{
    ErrorCategory, OptimizerConfig, PromptSet, Sample, SampleOutcome, StepStatus, ToolPlan, ToolTrajectory,
    TrajectoryAssessment,
};
use chartflow_core::engine::{AgentEngine, EngineConfig, ProcessExecutor};
use chartflow_core::feedback::{
    assess_trajectory, collaborative_reward, mean_accuracy, prompt_reward, RewardMode, DEFAULT_RUBRIC,
};
use chartflow_core::gateway::{FixtureStore, Gateway, RemoteBackend, ScriptedBackend};
use chartflow_core::io::write_jsonl;
use chartflow_core::metrics::{decline_rate, normalize_text, population_variance, relaxed_match};
use chartflow_core::optimizer::{evaluate_candidate, evaluate_prompts, Optimizer, RunEvent};
use chartflow_core::review::ReviewStore;
use chartflow_core::synthesis::{
    generate_hqa, generate_proposals, init_pool, retention_from_counts, retention_stats, Demonstration, InstanceStatus,
    Provenance, QaPair, ReviewAspects, ReviewVerdict, PROPOSAL_SYSTEM, REWRITER_SYSTEM,
};
use chartflow_core::testkit::{base_prompts, seed_proposals, toy_dataset, variant_of, FakeChatServer, ToyWorld};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($msg)+));
        }
    };
}

// ---------------------------------------------------------------- reward

fn reward_table() -> Check {
    let expected = [
        ((true, true), 1.0),
        ((true, false), -0.5),
        ((false, true), 0.5),
        ((false, false), 0.0),
    ];
    for ((acc, coo), want) in expected {
        let got = collaborative_reward(acc, coo, 0.5).map_err(|e| e.to_string())?;
        ensure!(
            got == want,
            "({}, {}) -> {got}, expected {want}",
            u8::from(acc),
            u8::from(coo)
        );
    }
    Ok("(1,1)=1 (1,0)=-0.5 (0,1)=0.5 (0,0)=0 exact".into())
}

// ---------------------------------------------------------------- published tables

/// (model, factoid accuracy, hypothetical accuracy, published decline rate)
const DECLINE_ROWS: [(&str, f64, f64, f64); 18] = [
    ("Pix2struct", 56.00, 17.68, 68.43),
    ("MatCha", 64.20, 21.32, 66.79),
    ("Unichart", 66.24, 18.69, 71.78),
    ("TinyChart", 83.60, 30.79, 63.17),
    ("DocOwl-v2.0", 70.00, 30.83, 55.96),
    ("ChartLlama", 69.66, 17.22, 75.28),
    ("ChartVLM-L", 62.28, 20.15, 63.70),
    ("DePlot", 76.70, 49.49, 35.48),
    ("Qwen-VL-Chat", 66.30, 28.60, 56.86),
    ("DeepSeek-VL-Chat", 60.72, 27.93, 54.00),
    ("Qwen2.5-VL-7B", 87.30, 57.20, 34.48),
    ("InternVL-v2.5-8B", 84.80, 48.23, 43.13),
    ("Monkey", 65.10, 31.45, 51.69),
    ("Qwen2.5-VL-72B", 89.50, 66.41, 25.80),
    ("Gemini-Pro", 74.10, 41.25, 44.33),
    ("Qwen-VL-Max", 79.80, 53.41, 33.07),
    ("GPT-4V", 78.50, 56.49, 28.01),
    ("GPT-4o", 85.70, 62.52, 27.05),
];
const DECLINE_TOLERANCE: f64 = 0.01;
const DECLINE_ANCHORS: [&str; 5] = ["Pix2struct", "MatCha", "ChartLlama", "DePlot", "GPT-4o"];

fn decline_golden() -> Check {
    let mut misses = Vec::new();
    let mut anchors_ok = 0;
    for (model, qa, hqa, published) in DECLINE_ROWS {
        let got = decline_rate(qa, hqa).map_err(|e| e.to_string())?;
        let ok = (got - published).abs() <= DECLINE_TOLERANCE + 1e-9;
        if !ok {
            misses.push(format!("{model} {got:.2} vs {published:.2}"));
        } else if DECLINE_ANCHORS.contains(&model) {
            anchors_ok += 1;
        }
    }
    let summary = format!(
        "{}/18 rows within ±{DECLINE_TOLERANCE}, anchors {anchors_ok}/{}",
        18 - misses.len(),
        DECLINE_ANCHORS.len()
    );
    if misses.is_empty() {
        Ok(summary)
    } else {
        Err(format!("{summary}; off: {}", misses.join(", ")))
    }
}

fn variance_golden() -> Check {
    let rows = [
        ("GPT-4V", [54.58, 58.38, 55.32, 55.52], 2.09),
        ("Qwen-VL-Max", [50.34, 55.98, 58.51, 49.72], 13.86),
    ];
    let mut out = Vec::new();
    for (model, accs, published) in rows {
        let got = population_variance(&accs);
        ensure!((got - published).abs() <= 0.01, "{model} {got:.4} vs {published}");
        out.push(format!("{model} {got:.4}"));
    }
    Ok(out.join(", "))
}

// ---------------------------------------------------------------- relaxed accuracy

fn relaxed_boundary() -> Check {
    ensure!(relaxed_match("95", "100"), "(95, 100) should match");
    ensure!(!relaxed_match("94", "100"), "(94, 100) should not match");
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let draws = 20_000;
    for _ in 0..draws {
        let magnitude = 10f64.powf(rng.gen_range(-6.0..9.0));
        let g = if rng.gen::<bool>() { magnitude } else { -magnitude };
        let gold = g.to_string();
        ensure!(
            relaxed_match(&(1.05 * g).to_string(), &gold),
            "(1.05g, g) rejected for g={g}"
        );
        ensure!(
            !relaxed_match(&(1.0501 * g).to_string(), &gold),
            "(1.0501g, g) accepted for g={g}"
        );
    }
    Ok(format!("fixed cases and {draws} random g"))
}

// ---------------------------------------------------------------- beam search

fn toy_engine(world: &ToyWorld, edit_calls: Arc<AtomicUsize>) -> AgentEngine {
    let w = world.clone();
    let backend = ScriptedBackend::from_fn(move |req| {
        if req
            .user_prompt()
            .contains("Rewrite the prompts following the suggestion")
        {
            edit_calls.fetch_add(1, Ordering::SeqCst);
        }
        w.respond(req.system_prompt(), req.user_prompt())
    });
    AgentEngine::new(
        Arc::new(Gateway::scripted(backend)),
        Arc::new(ProcessExecutor::python(Duration::from_secs(5), std::env::temp_dir())),
        EngineConfig::default(),
    )
}

fn search_cfg(l: usize, k: usize, t: u32, n: usize) -> OptimizerConfig {
    OptimizerConfig {
        beam_width: l,
        edit_count: k,
        iterations: t,
        minibatch_size: n.min(8),
        eval_subset_size: n,
        rng_seed: 11,
        ..OptimizerConfig::default()
    }
}

/// Reward and accuracy of a variant straight from the world's ground truth.
fn oracle(world: &ToyWorld, variant: &str, samples: &[Sample], alpha: f64, beta: u8) -> (f64, f64) {
    let (mut reward, mut correct) = (0.0, 0.0);
    for s in samples {
        let o = world.outcome(variant, &s.id);
        let acc = f64::from(u8::from(o.correct));
        let coo = f64::from(u8::from(o.score >= beta));
        reward += acc * coo + alpha * (coo - acc);
        correct += acc;
    }
    let n = samples.len() as f64;
    (reward / n, correct / n)
}

fn leaves(k: usize, depth: u32) -> Vec<String> {
    let mut level = vec!["0".to_string()];
    for _ in 0..depth {
        level = level
            .iter()
            .flat_map(|v| (1..=k).map(move |j| format!("{v}.{j}")))
            .collect();
    }
    level
}

fn beam_equals_exhaustive() -> Check {
    let samples = toy_dataset(24);
    let world = ToyWorld::new(&samples, 5);
    let (l, k, t) = (64, 4, 3);
    let cfg = search_cfg(l, k, t, samples.len());
    let engine = toy_engine(&world, Arc::new(AtomicUsize::new(0)));
    let out = Optimizer::new(&engine, cfg.clone())
        .optimize(&samples, &base_prompts())
        .map_err(|e| e.to_string())?;

    let space = leaves(k, t);
    ensure!(space.len() == 64, "search space has {} candidates", space.len());
    let scored: Vec<(String, (f64, f64))> = space
        .iter()
        .map(|v| (v.clone(), oracle(&world, v, &samples, cfg.alpha, cfg.beta)))
        .collect();
    let best = scored
        .iter()
        .map(|(_, r)| *r)
        .fold((f64::MIN, f64::MIN), |a, b| if b > a { b } else { a });
    let winners: Vec<&String> = scored.iter().filter(|(_, r)| *r == best).map(|(v, _)| v).collect();
    ensure!(winners.len() == 1, "brute force optimum is not unique: {winners:?}");
    let chosen = variant_of(out.best.get(chartflow_core::domain::AgentRole::Policy)).unwrap_or_default();
    ensure!(&chosen == winners[0], "beam chose {chosen}, brute force {}", winners[0]);

    // invariants on a narrow beam
    let samples = toy_dataset(20);
    let world = ToyWorld::new(&samples, 3);
    let calls = Arc::new(AtomicUsize::new(0));
    let engine = toy_engine(&world, calls.clone());
    let (l, k, t) = (2usize, 2usize, 3u32);
    let out = Optimizer::new(&engine, search_cfg(l, k, t, samples.len()))
        .optimize(&samples, &base_prompts())
        .map_err(|e| e.to_string())?;
    let events = out.log.events().map_err(|e| e.to_string())?;
    let mut selections = 0;
    for ev in &events {
        if let RunEvent::Selection { beam, pool_size, .. } = ev {
            selections += 1;
            ensure!(beam.len() <= l, "beam of {} exceeds L={l}", beam.len());
            ensure!(*pool_size <= l * k, "pool of {pool_size} exceeds L*K={}", l * k);
        }
    }
    ensure!(selections == t as usize, "{selections} selections for T={t}");
    let edit_calls = calls.load(Ordering::SeqCst);
    ensure!(edit_calls <= t as usize * l * k, "{edit_calls} edit calls exceed T*L*K");
    Ok(format!(
        "64-candidate optimum {chosen} found; L=2 K=2 T=3 invariants hold ({edit_calls} edit calls)"
    ))
}

// ---------------------------------------------------------------- determinism

fn chartflow(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_chartflow"))
        .args(args)
        .env_remove("RUST_LOG")
        .output()
        .map_err(|e| e.to_string())?;
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    if !out.status.success() {
        return Err(format!(
            "chartflow {} failed: {stdout}{}",
            args[0],
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(stdout)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn determinism() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let samples = toy_dataset(12);
    let train = dir.path().join("train.jsonl");
    let p0 = dir.path().join("p0.json");
    write_jsonl(&train, &samples).map_err(|e| e.to_string())?;
    base_prompts().save(&p0).map_err(|e| e.to_string())?;
    let world = ToyWorld::new(&samples, 8);
    let server = FakeChatServer::start(move |sys, user| world.respond(sys, user)).map_err(|e| e.to_string())?;
    let config = dir.path().join("run.toml");
    std::fs::write(
        &config,
        format!(
            "[gateway]\nbackend = \"remote\"\nurl = \"{}\"\nmax_retries = 0\n[optimizer]\nbeam_width = 2\nedit_count = 2\n\
             iterations = 2\nminibatch_size = 6\neval_subset_size = 12\nrng_seed = 5\n",
            server.url()
        ),
    )
    .map_err(|e| e.to_string())?;

    let rec = dir.path().join("recorded");
    let base = ["--config", s(&config), "--train", s(&train), "--p0", s(&p0)];
    let mut args = vec!["record"];
    args.extend(base);
    args.extend(["--run-dir", s(&rec)]);
    chartflow(&args)?;
    let fixtures = rec.join("fixtures.jsonl");

    let mut logs = Vec::new();
    for name in ["a", "b"] {
        let run = dir.path().join(name);
        let mut args = vec!["optimize"];
        args.extend(base);
        args.extend(["--run-dir", s(&run), "--fixtures", s(&fixtures)]);
        chartflow(&args)?;
        logs.push(std::fs::read(run.join("run_log.jsonl")).map_err(|e| e.to_string())?);
    }
    ensure!(!logs[0].is_empty(), "empty run log");
    ensure!(logs[0] == logs[1], "two offline runs wrote different logs");
    let replay = chartflow(&["replay", s(&rec)])?;
    ensure!(replay.contains("identical"), "replay: {replay}");
    Ok(format!(
        "two runs byte-identical ({} bytes); {}",
        logs[0].len(),
        replay.trim()
    ))
}

// ---------------------------------------------------------------- feedback gating

fn scored_trajectory(sample: &Sample) -> ToolTrajectory {
    ToolTrajectory {
        sample_id: sample.id.clone(),
        plan: ToolPlan::default(),
        steps: vec![],
        prediction: sample.gold_answer.clone(),
        warnings: vec![],
        failure: None,
    }
}

fn feedback_gating() -> Check {
    let sample = &toy_dataset(1)[0];
    let traj = scored_trajectory(sample);
    let mut coordinated = Vec::new();
    for score in [4u8, 7, 10] {
        let gw = Gateway::scripted(ScriptedBackend::from_fn(move |req| {
            req.user_prompt()
                .contains("Rate the tool chain")
                .then(|| format!("Score: {score}\nCategory: none\nRationale: scripted"))
        }));
        let a = assess_trajectory(&gw, DEFAULT_RUBRIC, sample, &traj, 7, 3).map_err(|e| e.to_string())?;
        ensure!(a.score == score, "parsed score {} for scripted {score}", a.score);
        coordinated.push(u8::from(a.coordinated));
    }
    ensure!(coordinated == [0, 1, 1], "coordinated {coordinated:?}");

    // accuracy-only mode on random outcome sets
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mode = RewardMode::new(0.5, true).map_err(|e| e.to_string())?;
    let sets = 500;
    for _ in 0..sets {
        let n = rng.gen_range(1..80);
        let outcomes: Vec<SampleOutcome> = (0..n)
            .map(|i| {
                let accuracy = rng.gen::<bool>();
                let score = rng.gen_range(1..=10);
                let assessment = TrajectoryAssessment::from_score(score, 7, String::new(), ErrorCategory::None);
                SampleOutcome {
                    sample_id: format!("s{i}"),
                    trajectory: scored_trajectory(sample),
                    accuracy,
                    reward: mode.reward(accuracy, assessment.coordinated),
                    assessment,
                }
            })
            .collect();
        let r = prompt_reward(&outcomes).map_err(|e| e.to_string())?;
        ensure!(
            r == mean_accuracy(&outcomes),
            "accuracy-only reward {r} != mean accuracy"
        );
    }

    // and through the optimizer's flag
    let samples = toy_dataset(16);
    let world = ToyWorld::new(&samples, 4);
    let engine = toy_engine(&world, Arc::new(AtomicUsize::new(0)));
    let cfg = OptimizerConfig {
        accuracy_only_reward: true,
        ..search_cfg(2, 2, 1, samples.len())
    };
    let eval =
        evaluate_candidate(&engine, DEFAULT_RUBRIC, &base_prompts(), &samples, &cfg).map_err(|e| e.to_string())?;
    ensure!(
        eval.reward == eval.mean_accuracy,
        "flagged reward {} != accuracy {}",
        eval.reward,
        eval.mean_accuracy
    );
    let (_, truth) = oracle(&world, "0", &samples, cfg.alpha, cfg.beta);
    ensure!(
        eval.mean_accuracy == truth,
        "accuracy {} != ground truth {truth}",
        eval.mean_accuracy
    );
    Ok(format!(
        "scores 4/7/10 -> {coordinated:?}; accuracy-only exact on {sets} random sets and via the flag"
    ))
}

// ---------------------------------------------------------------- synthesis

const PROPOSALS_REPLY: &str = "1. Select the largest segment; assume it loses 10 points to the next.\n\
2. Select a segment by label; assume its share doubles.\n\
3. Select the smallest segment; assume it gains 20 points.";

// rewrite 1.2 keeps the original answer, rewrite 2.2 drops the original question
const HQA_REPLY: &str = "First Original Question:\nQuestion: What is the share of Alpha?\nAnswer: 45\nHQ Rewrites:\n\
Question_1: If Alpha lost 10 points to Beta, what is the share of Alpha?\nAnswer_1: 35\n\
Question_2: If Beta lost 5 points to Gamma, what is the share of Alpha?\nAnswer_2: 45\n\
Second Original Question:\nQuestion: Which company has the smallest share?\nAnswer: Gamma\nHQ Rewrites:\n\
Question_1: If Gamma gained 20 points from Beta, which company has the smallest share?\nAnswer_1: Beta\n\
Question_2: If Alpha fell to 15 points, who is last?\nAnswer_2: Alpha";

fn synth_responder(system: &str, user: &str) -> Option<String> {
    match system {
        REWRITER_SYSTEM => Some(HQA_REPLY.into()),
        PROPOSAL_SYSTEM if user.contains("Reviewer feedback:") => Some(
            "Revised instruction: Select a segment by label; assume its share changes and the others rescale to 100%."
                .into(),
        ),
        PROPOSAL_SYSTEM => Some(PROPOSALS_REPLY.into()),
        _ => None,
    }
}

fn pie_chart() -> chartflow_core::domain::ChartContext {
    serde_json::from_value(serde_json::json!({
        "type": "pie",
        "title": "Market share 2023",
        "records": [{"label": "Alpha", "share": 45}, {"label": "Beta", "share": 35}, {"label": "Gamma", "share": 20}]
    }))
    .unwrap()
}

fn originals() -> Vec<QaPair> {
    vec![
        QaPair {
            question: "What is the share of Alpha?".into(),
            answer: "45".into(),
        },
        QaPair {
            question: "Which company has the smallest share?".into(),
            answer: "Gamma".into(),
        },
    ]
}

/// Proposal generation, HQA generation and one reject verdict against
/// `gateway`; returns (proposal count, instances, pool growth).
fn synthesis_pass(
    gateway: &Gateway,
    store_dir: &Path,
) -> Result<(usize, Vec<chartflow_core::synthesis::HqaInstance>, usize), String> {
    let pool = init_pool(seed_proposals()).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let proposals = generate_proposals(gateway, &pool, &pie_chart(), &mut rng, 3).map_err(|e| e.to_string())?;
    let batch = generate_hqa(
        gateway,
        &proposals,
        &originals(),
        &pie_chart(),
        &Demonstration::default(),
        3,
    )
    .map_err(|e| e.to_string())?;
    let mut store = ReviewStore::create(store_dir, &batch.instances, &pool).map_err(|e| e.to_string())?;
    let before = store.pool().len();
    let target = batch.instances.first().ok_or("no instances generated")?.id.clone();
    let verdict = ReviewVerdict {
        reviewer: "ann".into(),
        accept: false,
        aspects: ReviewAspects {
            question_reasonable: false,
            answer_accurate: false,
            complexity_adequate: true,
        },
        comment: "shares no longer sum to 100%".into(),
        timestamp: chrono::Utc::now(),
    };
    let out = store
        .submit_verdict(gateway, &target, verdict, chrono::Utc::now())
        .map_err(|e| e.to_string())?;
    let added = out.added_proposal.ok_or("reject added no proposal")?;
    if added.provenance != Provenance::Revised || added.feedback_log != ["shares no longer sum to 100%"] {
        return Err(format!("unexpected revised proposal {added:?}"));
    }
    Ok((proposals.len(), batch.instances, store.pool().len() - before))
}

fn synthesis_round_trip() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let fixtures = dir.path().join("synthesis-fixtures.jsonl");
    {
        let server = FakeChatServer::start(synth_responder).map_err(|e| e.to_string())?;
        let live = Gateway::new(Arc::new(RemoteBackend::new(
            server.url(),
            "m",
            None,
            Duration::from_secs(10),
        )))
        .with_recorder(&fixtures);
        synthesis_pass(&live, &dir.path().join("live"))?;
    }
    let offline = Gateway::scripted(ScriptedBackend::new(
        FixtureStore::load(&fixtures).map_err(|e| e.to_string())?,
        true,
    ));
    let (n_proposals, instances, growth) = synthesis_pass(&offline, &dir.path().join("offline"))?;
    ensure!(n_proposals == 3, "parsed {n_proposals} proposals");
    ensure!(instances.len() <= 4, "{} instances from one chart", instances.len());
    ensure!(
        instances.len() == 2,
        "expected the 2 rule-abiding rewrites, got {}",
        instances.len()
    );
    for inst in &instances {
        let hq = normalize_text(&inst.hypothetical_question);
        ensure!(
            hq.contains(&normalize_text(&inst.original_question)),
            "{} drops the original question",
            inst.id
        );
        ensure!(
            normalize_text(&inst.answer) != normalize_text(&inst.original_answer),
            "{} keeps the original answer",
            inst.id
        );
    }
    ensure!(growth == 1, "reject grew the pool by {growth}");

    let mut many = chartflow_core::testkit::review_fixture(1000).0;
    for (i, inst) in many.iter_mut().enumerate() {
        inst.status = if i < 634 {
            InstanceStatus::Accepted
        } else {
            InstanceStatus::Rejected
        };
    }
    let stats = retention_stats(&many);
    ensure!(
        stats.retention_rate == Some(63.4),
        "retention {:?}",
        stats.retention_rate
    );
    ensure!(
        retention_from_counts(634, 366, 0).retention_rate == Some(63.4),
        "retention from counts"
    );
    Ok(format!(
        "3 proposals, {} instances (2 rewrites rejected by rules), pool +1 on reject, retention 63.4%",
        instances.len()
    ))
}

// ---------------------------------------------------------------- fault path

fn fault_path() -> Check {
    let samples: Vec<Sample> = toy_dataset(3)
        .into_iter()
        .map(|mut s| {
            s.gold_answer = "42".into();
            s
        })
        .collect();
    let hang = samples[0].question.clone();
    let gw = Gateway::scripted(ScriptedBackend::from_fn(move |req| {
        let user = req.user_prompt();
        if user.contains("Available modules:") {
            return Some("1. data_retrieval: read\n2. program: compute\n3. solution: answer".into());
        }
        if user.contains("Write a Python program") {
            let body = if user.contains(&hang) {
                "import time\ntime.sleep(30)"
            } else {
                "print(40 + 2)"
            };
            return Some(format!("```python\n{body}\n```"));
        }
        if user.contains("Use all cached results") {
            let last = user
                .lines()
                .rev()
                .find(|l| l.trim().parse::<f64>().is_ok())
                .unwrap_or("0");
            return Some(format!("Answer: {}", last.trim()));
        }
        user.contains("Rate the tool chain")
            .then(|| "Score: 9\nCategory: none\nRationale: fine".to_string())
    }));
    let engine = AgentEngine::new(
        Arc::new(gw),
        Arc::new(ProcessExecutor::python(
            Duration::from_millis(300),
            std::env::temp_dir(),
        )),
        EngineConfig::default(),
    );
    let cfg = OptimizerConfig::default();
    let prompts: PromptSet = base_prompts();
    let outcomes = evaluate_prompts(&engine, DEFAULT_RUBRIC, &prompts, &samples, &cfg).map_err(|e| e.to_string())?;
    ensure!(outcomes.len() == 3, "batch aborted: {} outcomes", outcomes.len());
    let hung = &outcomes[0];
    ensure!(hung.trajectory.is_truncated(), "trajectory not truncated");
    ensure!(
        hung.trajectory.steps.last().map(|s| s.status) == Some(StepStatus::Timeout),
        "last step is not a timeout"
    );
    ensure!(
        hung.assessment.score == 1 && hung.assessment.category == ErrorCategory::Invalid,
        "assessed {} / {:?}",
        hung.assessment.score,
        hung.assessment.category
    );
    ensure!(
        !hung.accuracy && hung.reward == 0.0,
        "(0,0) contributed {}",
        hung.reward
    );
    let mode = RewardMode::new(cfg.alpha, false).map_err(|e| e.to_string())?;
    let accurate = mode.reward(true, hung.assessment.coordinated);
    ensure!(
        accurate == -cfg.alpha,
        "accurate timed-out chain would contribute {accurate}"
    );
    ensure!(
        outcomes[1..].iter().all(|o| o.reward == 1.0),
        "healthy samples were affected"
    );
    Ok(format!(
        "timeout -> score 1/invalid, reward 0 (acc=0) or {accurate} (acc=1); batch of 3 completed"
    ))
}

// ---------------------------------------------------------------- driver

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        ("reward table", reward_table),
        ("decline rate golden", decline_golden),
        ("variance golden", variance_golden),
        ("relaxed accuracy boundary", relaxed_boundary),
        ("beam equals exhaustive", beam_equals_exhaustive),
        ("determinism and replay", determinism),
        ("feedback gating", feedback_gating),
        ("synthesis round trip", synthesis_round_trip),
        ("agent engine fault path", fault_path),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match result {
            Ok(detail) => println!("PASS  {name:<28} {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name:<28} {detail}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
