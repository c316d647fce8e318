use std::collections::BTreeMap;

use chartflow_core::domain::{
    AgentRole, ErrorCategory, PlanStep, PromptSet, SampleOutcome, ToolPlan, ToolTrajectory, TrajectoryAssessment,
};
use chartflow_core::engine::parse_plan;
use chartflow_core::feedback::{collaborative_reward, mean_accuracy, prompt_reward, RewardMode};
use chartflow_core::metrics::{decline_rate, population_variance, relaxed_match};
use chartflow_core::optimizer::{BeamEntry, BeamState, RngState};
use chartflow_core::synthesis::retention_from_counts;
use proptest::prelude::*;

fn outcome(i: usize, accuracy: bool, score: u8, beta: u8, mode: RewardMode) -> SampleOutcome {
    let assessment = TrajectoryAssessment::from_score(score, beta, String::new(), ErrorCategory::None);
    let reward = mode.reward(accuracy, assessment.coordinated);
    SampleOutcome {
        sample_id: format!("s{i}"),
        trajectory: ToolTrajectory {
            sample_id: format!("s{i}"),
            plan: ToolPlan::default(),
            steps: vec![],
            prediction: String::new(),
            warnings: vec![],
            failure: None,
        },
        accuracy,
        assessment,
        reward,
    }
}

fn prompt_text() -> impl Strategy<Value = String> {
    "[a-zA-Z0-9 ,.\n]{1,40}".prop_filter("non-blank", |s| !s.trim().is_empty())
}

fn prompt_set() -> impl Strategy<Value = PromptSet> {
    (
        "[a-z0-9-]{1,12}",
        proptest::collection::vec(prompt_text(), 5),
        proptest::option::of("[a-z0-9]{1,8}"),
        0u32..10,
    )
        .prop_map(|(id, texts, parent, it)| {
            let prompts: BTreeMap<AgentRole, String> = AgentRole::ALL.into_iter().zip(texts).collect();
            let mut p = PromptSet::new(id, prompts).unwrap();
            p.parent_id = parent;
            p.created_at_iteration = it;
            p
        })
}

proptest! {
    #[test]
    fn relaxed_match_tolerance_boundary(mag in 1e-3f64..1e6, neg in any::<bool>()) {
        let g = if neg { -mag } else { mag };
        let gold = format!("{g}");
        let at = |f: f64| (f * g).to_string();
        prop_assert!(relaxed_match(&at(1.05), &gold));
        prop_assert!(relaxed_match(&at(0.95), &gold));
        prop_assert!(!relaxed_match(&at(1.0501), &gold));
        prop_assert!(!relaxed_match(&at(0.9499), &gold));
        prop_assert!(relaxed_match(&gold, &gold));
    }

    #[test]
    fn reward_is_bounded_and_ordered(alpha in 0.001f64..0.999) {
        let r = |a, c| collaborative_reward(a, c, alpha).unwrap();
        prop_assert_eq!(r(true, true), 1.0);
        prop_assert_eq!(r(true, false), -alpha);
        prop_assert_eq!(r(false, true), alpha);
        prop_assert_eq!(r(false, false), 0.0);
        // a cooperating chain always beats a non-cooperating one with the same accuracy
        prop_assert!(r(true, true) > r(true, false));
        prop_assert!(r(false, true) > r(false, false));
    }

    #[test]
    fn accuracy_only_reward_equals_mean_accuracy(
        rows in proptest::collection::vec((any::<bool>(), 1u8..=10), 1..60),
        beta in 1u8..=10,
    ) {
        let outcomes: Vec<_> = rows
            .iter()
            .enumerate()
            .map(|(i, (a, s))| outcome(i, *a, *s, beta, RewardMode::AccuracyOnly))
            .collect();
        prop_assert_eq!(prompt_reward(&outcomes).unwrap(), mean_accuracy(&outcomes));
    }

    #[test]
    fn coordination_follows_threshold(score in 1u8..=10, beta in 1u8..=10) {
        let a = TrajectoryAssessment::from_score(score, beta, String::new(), ErrorCategory::None);
        prop_assert_eq!(a.coordinated, score >= beta);
        prop_assert_eq!(a.category == ErrorCategory::None, a.coordinated);
    }

    #[test]
    fn prompt_set_round_trips(p in prompt_set()) {
        let json = serde_json::to_string(&p).unwrap();
        let back: PromptSet = serde_json::from_str(&json).unwrap();
        prop_assert_eq!(back, p);
    }

    #[test]
    fn beam_state_round_trips(sets in proptest::collection::vec(prompt_set(), 1..5), seed in any::<u64>()) {
        let state = BeamState {
            iteration: 2,
            beam: sets
                .iter()
                .enumerate()
                .map(|(i, p)| BeamEntry {
                    prompts: p.clone(),
                    reward: Some(i as f64 / 7.0 - 0.5),
                    mean_accuracy: Some(0.25),
                    eval_count: i * 3,
                    generation: i as u64,
                })
                .collect(),
            candidates: sets.clone(),
            rng_state: RngState { seed, next_iteration: 3 },
            eval_subset: vec!["a".into(), "b".into()],
            next_generation: 9,
            log_len: 1234,
        };
        let back: BeamState = serde_json::from_str(&serde_json::to_string(&state).unwrap()).unwrap();
        prop_assert_eq!(back, state);
    }

    #[test]
    fn rendered_plans_parse_back(steps in proptest::collection::vec((0usize..4, "[a-z ]{0,20}"), 1..6)) {
        let plan: Vec<PlanStep> = steps
            .iter()
            .map(|(r, q)| PlanStep { role: AgentRole::ACTIONS[*r], query: q.trim().to_string() })
            .collect();
        let text: Vec<String> = plan
            .iter()
            .enumerate()
            .map(|(i, s)| format!("{}. {}: {}", i + 1, s.role, s.query))
            .collect();
        prop_assert_eq!(parse_plan(&text.join("\n")).unwrap(), plan);
    }

    #[test]
    fn decline_rate_properties(a in 0.01f64..100.0, b in 0.0f64..100.0) {
        let d = decline_rate(a, b).unwrap();
        prop_assert!(d >= 0.0);
        prop_assert_eq!(decline_rate(a, a).unwrap(), 0.0);
        let expected = ((a - b).abs() / a * 100.0 * 100.0).round() / 100.0;
        prop_assert!((d - expected).abs() < 1e-9);
    }

    #[test]
    fn variance_is_shift_invariant(v in proptest::collection::vec(0.0f64..100.0, 4), shift in -50.0f64..50.0) {
        let base = population_variance(&v);
        let shifted: Vec<f64> = v.iter().map(|x| x + shift).collect();
        prop_assert!(base >= 0.0);
        prop_assert!((population_variance(&shifted) - base).abs() < 1e-6);
    }

    #[test]
    fn retention_rate_is_a_percentage(a in 0usize..5000, r in 0usize..5000, p in 0usize..100) {
        let s = retention_from_counts(a, r, p);
        prop_assert_eq!(s.total, a + r + p);
        match s.retention_rate {
            None => prop_assert_eq!(a + r, 0),
            Some(rate) => {
                prop_assert!((0.0..=100.0).contains(&rate));
                prop_assert!((rate - a as f64 * 100.0 / (a + r) as f64).abs() <= 0.05 + 1e-9);
            }
        }
    }
}
