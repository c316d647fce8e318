//! Beam search over chain-of-tool prompts.
//!
//! Each iteration expands every beam member: evaluate it on a seeded
//! minibatch, collect error feedback, ask the optimizer model for a
//! suggestion, and have it write K edited children. All children are ranked
//! by mean collaborative reward on one shared evaluation subset and the top
//! L become the next beam.

mod editing;
mod runlog;

use std::cmp::Ordering;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering as AtomicOrdering};
use std::sync::Arc;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::domain::{ErrorCategory, OptimizerConfig, PromptSet, Sample, SampleOutcome, TrajectoryAssessment};
use crate::engine::AgentEngine;
use crate::error::{Error, Result};
use crate::feedback::{self, RewardMode};
use crate::io;
use crate::metrics::relaxed_match;

pub use editing::{
    edit_prompts, generate_suggestion, parse_edit, Suggestion, CONSERVATIVE_SUGGESTION, OPTIMIZER_SYSTEM,
};
pub use runlog::{checkpoint_path, BeamEntry, BeamState, EvalPhase, RankedId, RngState, RunEvent, RunLog, SampleScore};

/// Reward given to a candidate whose evaluation failed; below every
/// attainable reward, so it never survives selection against a valid one.
pub const FAILED_CANDIDATE_REWARD: f64 = -1.0;

#[derive(Clone, Debug, PartialEq)]
pub struct CandidateEval {
    pub reward: f64,
    pub mean_accuracy: f64,
    pub outcomes: Vec<SampleOutcome>,
}

/// Runs `prompts` on every sample and scores each trajectory. Samples run in
/// parallel; outcomes come back in input order.
pub fn evaluate_prompts(
    engine: &AgentEngine,
    rubric: &str,
    prompts: &PromptSet,
    samples: &[Sample],
    cfg: &OptimizerConfig,
) -> Result<Vec<SampleOutcome>> {
    let mode = RewardMode::new(cfg.alpha, cfg.accuracy_only_reward)?;
    samples
        .par_iter()
        .map(|s| {
            let traj = engine.run(s, prompts)?;
            let mut accuracy = relaxed_match(&traj.prediction, &s.gold_answer);
            let assessment = match feedback::assess_trajectory(
                engine.gateway(),
                rubric,
                s,
                &traj,
                cfg.beta,
                cfg.parse_retry_limit,
            ) {
                Ok(a) => a,
                Err(e) => {
                    accuracy = false;
                    TrajectoryAssessment::from_score(
                        1,
                        cfg.beta,
                        format!("assessment failed: {e}"),
                        ErrorCategory::Invalid,
                    )
                }
            };
            let reward = mode.reward(accuracy, assessment.coordinated);
            Ok(SampleOutcome {
                sample_id: s.id.clone(),
                trajectory: traj,
                accuracy,
                assessment,
                reward,
            })
        })
        .collect()
}

/// Mean reward of `candidate` over the shared evaluation subset.
pub fn evaluate_candidate(
    engine: &AgentEngine,
    rubric: &str,
    candidate: &PromptSet,
    eval_subset: &[Sample],
    cfg: &OptimizerConfig,
) -> Result<CandidateEval> {
    if eval_subset.is_empty() {
        return Err(Error::Config("evaluation subset is empty".into()));
    }
    let outcomes = evaluate_prompts(engine, rubric, candidate, eval_subset, cfg)?;
    Ok(CandidateEval {
        reward: feedback::prompt_reward(&outcomes)?,
        mean_accuracy: feedback::mean_accuracy(&outcomes),
        outcomes,
    })
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// `amount` distinct indices below `len`, ascending.
fn draw(seed: u64, stream: u64, len: usize, amount: usize) -> Vec<usize> {
    let mut idx = index::sample(&mut rng_for(seed, stream), len, amount).into_vec();
    idx.sort_unstable();
    idx
}

/// Evaluation subset shared by every candidate of a run.
pub fn draw_eval_subset(train: &[Sample], cfg: &OptimizerConfig) -> Vec<Sample> {
    draw(cfg.rng_seed, 0, train.len(), cfg.eval_subset_size.min(train.len()))
        .into_iter()
        .map(|i| train[i].clone())
        .collect()
}

/// Minibatch for parent `parent` of iteration `iteration` (1-based).
pub fn draw_minibatch(train: &[Sample], cfg: &OptimizerConfig, iteration: u32, parent: usize) -> Vec<Sample> {
    let stream = (u64::from(iteration) << 32) | parent as u64;
    draw(cfg.rng_seed, stream, train.len(), cfg.minibatch_size.min(train.len()))
        .into_iter()
        .map(|i| train[i].clone())
        .collect()
}

/// Higher reward, then higher mean accuracy, then earlier generation, then
/// lexicographic id.
pub fn rank_order(a: &BeamEntry, b: &BeamEntry) -> Ordering {
    let key = |e: &BeamEntry| {
        (
            e.reward.unwrap_or(f64::NEG_INFINITY),
            e.mean_accuracy.unwrap_or(f64::NEG_INFINITY),
        )
    };
    let (ra, aa) = key(a);
    let (rb, ab) = key(b);
    rb.total_cmp(&ra)
        .then(ab.total_cmp(&aa))
        .then(a.generation.cmp(&b.generation))
        .then_with(|| a.prompts.id.cmp(&b.prompts.id))
}

#[derive(Debug)]
pub struct OptimizeOutcome {
    pub best: PromptSet,
    pub reward: Option<f64>,
    pub state: BeamState,
    pub log: RunLog,
}

pub struct Optimizer<'a> {
    engine: &'a AgentEngine,
    cfg: OptimizerConfig,
    rubric: String,
    run_dir: Option<PathBuf>,
    cancel: Option<Arc<AtomicBool>>,
}

impl<'a> Optimizer<'a> {
    pub fn new(engine: &'a AgentEngine, cfg: OptimizerConfig) -> Self {
        Optimizer {
            engine,
            cfg,
            rubric: feedback::DEFAULT_RUBRIC.to_string(),
            run_dir: None,
            cancel: None,
        }
    }

    pub fn with_rubric(mut self, rubric: impl Into<String>) -> Self {
        self.rubric = rubric.into();
        self
    }

    /// Persist the run log, checkpoints, feedback sets, trajectories and
    /// the final prompt set under `dir`.
    pub fn with_run_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.run_dir = Some(dir.into());
        self
    }

    /// Checked between expansions; when set the run stops with
    /// [`Error::Interrupted`] and the last checkpoint stays valid.
    pub fn with_cancel_flag(mut self, flag: Arc<AtomicBool>) -> Self {
        self.cancel = Some(flag);
        self
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    fn prepare_dir(&self) -> Result<()> {
        if let Some(dir) = &self.run_dir {
            for sub in ["checkpoints", "feedback"] {
                let p = dir.join(sub);
                std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
            }
        }
        Ok(())
    }

    pub fn optimize(&self, train: &[Sample], p0: &PromptSet) -> Result<OptimizeOutcome> {
        p0.validate()?;
        if train.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        self.cfg.validate(train.len())?;
        self.prepare_dir()?;
        let eval_subset = draw_eval_subset(train, &self.cfg);
        let mut log = match &self.run_dir {
            Some(dir) => RunLog::create(&dir.join("run_log.jsonl"))?,
            None => RunLog::in_memory(),
        };
        log.append(&[RunEvent::Start {
            p0: p0.id.clone(),
            train_size: train.len(),
            eval_subset: eval_subset.iter().map(|s| s.id.clone()).collect(),
            config: self.cfg.clone(),
        }])?;
        let state = BeamState {
            iteration: 0,
            beam: vec![BeamEntry {
                prompts: p0.clone(),
                reward: None,
                mean_accuracy: None,
                eval_count: 0,
                generation: 0,
            }],
            candidates: Vec::new(),
            rng_state: RngState {
                seed: self.cfg.rng_seed,
                next_iteration: 1,
            },
            eval_subset: eval_subset.iter().map(|s| s.id.clone()).collect(),
            next_generation: 1,
            log_len: log.len(),
        };
        self.drive(train, eval_subset, state, log)
    }

    /// Continues from a checkpoint written by an earlier run in the same
    /// run directory.
    pub fn resume(&self, train: &[Sample], state: BeamState) -> Result<OptimizeOutcome> {
        self.cfg.validate(train.len())?;
        if state.rng_state.seed != self.cfg.rng_seed {
            return Err(Error::Config("checkpoint was written with a different seed".into()));
        }
        self.prepare_dir()?;
        let eval_subset: Vec<Sample> = state
            .eval_subset
            .iter()
            .map(|id| {
                train
                    .iter()
                    .find(|s| &s.id == id)
                    .cloned()
                    .ok_or_else(|| Error::Config(format!("checkpoint sample {id} is not in the training set")))
            })
            .collect::<Result<_>>()?;
        let log = match &self.run_dir {
            Some(dir) => RunLog::resume(&dir.join("run_log.jsonl"), state.log_len)?,
            None => RunLog::in_memory(),
        };
        self.drive(train, eval_subset, state, log)
    }

    fn cancelled(&self) -> bool {
        self.cancel.as_ref().is_some_and(|f| f.load(AtomicOrdering::SeqCst))
    }

    fn drive(
        &self,
        train: &[Sample],
        eval_subset: Vec<Sample>,
        mut state: BeamState,
        mut log: RunLog,
    ) -> Result<OptimizeOutcome> {
        while state.iteration < self.cfg.iterations {
            if self.cancelled() {
                return Err(Error::Interrupted);
            }
            let iteration = state.iteration + 1;
            let mut events = Vec::new();
            let next = self.iterate(train, &eval_subset, &state, iteration, &mut events)?;
            state = next;
            log.append(&events)?;
            state.log_len = log.len();
            if let Some(dir) = &self.run_dir {
                state.save(&checkpoint_path(dir, iteration))?;
                state.save(&dir.join("checkpoint.json"))?;
            }
        }
        self.finish(train, state, log)
    }

    /// One iteration: expand every beam member, rank the pool, keep top L.
    fn iterate(
        &self,
        train: &[Sample],
        eval_subset: &[Sample],
        state: &BeamState,
        iteration: u32,
        events: &mut Vec<RunEvent>,
    ) -> Result<BeamState> {
        let cfg = &self.cfg;
        let mut generation = state.next_generation;
        let mut pool: Vec<BeamEntry> = Vec::new();

        for (j, parent) in state.beam.iter().enumerate() {
            if self.cancelled() {
                return Err(Error::Interrupted);
            }
            let p = &parent.prompts;
            let minibatch = draw_minibatch(train, cfg, iteration, j);
            let outcomes = evaluate_prompts(self.engine, &self.rubric, p, &minibatch, cfg)?;
            events.push(evaluation_event(iteration, &p.id, EvalPhase::Minibatch, &outcomes)?);
            self.persist_trajectories(&outcomes)?;

            let fb = feedback::collect_feedback_with(cfg.feedback_mode, &minibatch, &outcomes, iteration, &p.id);
            events.push(RunEvent::Feedback {
                iteration,
                prompt_id: p.id.clone(),
                error_samples: fb.records.iter().map(|r| r.sample.id.clone()).collect(),
            });
            if let Some(dir) = &self.run_dir {
                io::write_json(
                    &dir.join("feedback").join(format!("iter-{iteration:04}-{}.json", p.id)),
                    &fb,
                )?;
            }

            let gateway = self.engine.gateway();
            let children = generate_suggestion(gateway, &fb, cfg.feedback_mode, cfg.parse_retry_limit).and_then(|s| {
                events.push(RunEvent::Suggestion {
                    iteration,
                    prompt_id: p.id.clone(),
                    text: s.0.clone(),
                });
                edit_prompts(
                    gateway,
                    &s,
                    p,
                    cfg.edit_count,
                    iteration,
                    cfg.edit_mode,
                    cfg.parse_retry_limit,
                )
            });
            match children {
                Ok(children) => {
                    for child in children {
                        events.push(RunEvent::Edit {
                            iteration,
                            parent_id: p.id.clone(),
                            child_id: child.id.clone(),
                            changed_roles: child.changed_roles(p),
                        });
                        pool.push(BeamEntry {
                            prompts: child,
                            reward: None,
                            mean_accuracy: None,
                            eval_count: 0,
                            generation,
                        });
                        generation += 1;
                    }
                }
                Err(e) => events.push(RunEvent::ExpansionFailed {
                    iteration,
                    prompt_id: p.id.clone(),
                    error: e.to_string(),
                }),
            }
        }
        if self.cancelled() {
            return Err(Error::Interrupted);
        }

        let candidates: Vec<PromptSet> = pool.iter().map(|e| e.prompts.clone()).collect();
        let mut ranked = self.rank(iteration, eval_subset, pool, events)?;
        if cfg.include_parents_in_beam {
            let parents: Vec<BeamEntry> = state.beam.iter().filter(|e| e.reward.is_some()).cloned().collect();
            let unranked: Vec<BeamEntry> = state.beam.iter().filter(|e| e.reward.is_none()).cloned().collect();
            ranked.extend(parents);
            ranked.extend(self.rank(iteration, eval_subset, unranked, events)?);
        }
        ranked.sort_by(rank_order);
        let pool_size = ranked.len();
        ranked.truncate(cfg.beam_width);

        let beam = if ranked.is_empty() {
            // nothing expanded: carry the old beam forward
            state.beam.clone()
        } else {
            ranked
        };
        events.push(RunEvent::Selection {
            iteration,
            beam: beam
                .iter()
                .map(|e| RankedId {
                    id: e.prompts.id.clone(),
                    reward: e.reward.unwrap_or(FAILED_CANDIDATE_REWARD),
                })
                .collect(),
            pool_size,
        });
        Ok(BeamState {
            iteration,
            beam,
            candidates,
            rng_state: RngState {
                seed: cfg.rng_seed,
                next_iteration: iteration + 1,
            },
            eval_subset: state.eval_subset.clone(),
            next_generation: generation,
            log_len: state.log_len,
        })
    }

    /// Scores entries on the evaluation subset, in parallel.
    fn rank(
        &self,
        iteration: u32,
        eval_subset: &[Sample],
        entries: Vec<BeamEntry>,
        events: &mut Vec<RunEvent>,
    ) -> Result<Vec<BeamEntry>> {
        let results: Vec<Result<CandidateEval>> = entries
            .par_iter()
            .map(|e| evaluate_candidate(self.engine, &self.rubric, &e.prompts, eval_subset, &self.cfg))
            .collect();
        let mut out = Vec::with_capacity(entries.len());
        for (mut entry, result) in entries.into_iter().zip(results) {
            match result {
                Ok(ev) => {
                    events.push(evaluation_event(
                        iteration,
                        &entry.prompts.id,
                        EvalPhase::Rank,
                        &ev.outcomes,
                    )?);
                    self.persist_trajectories(&ev.outcomes)?;
                    entry.reward = Some(ev.reward);
                    entry.mean_accuracy = Some(ev.mean_accuracy);
                    entry.eval_count += ev.outcomes.len();
                }
                Err(e) => {
                    events.push(RunEvent::CandidateFailed {
                        iteration,
                        prompt_id: entry.prompts.id.clone(),
                        error: e.to_string(),
                    });
                    entry.reward = Some(FAILED_CANDIDATE_REWARD);
                    entry.mean_accuracy = Some(0.0);
                }
            }
            out.push(entry);
        }
        Ok(out)
    }

    fn finish(&self, train: &[Sample], mut state: BeamState, mut log: RunLog) -> Result<OptimizeOutcome> {
        let mut events = Vec::new();
        let (best, reward) = if state.iteration == 0 {
            (state.beam[0].prompts.clone(), state.beam[0].reward)
        } else if self.cfg.final_full_eval {
            let mut scored = Vec::with_capacity(state.beam.len());
            for entry in &state.beam {
                let ev = evaluate_candidate(self.engine, &self.rubric, &entry.prompts, train, &self.cfg)?;
                events.push(evaluation_event(
                    state.iteration,
                    &entry.prompts.id,
                    EvalPhase::Full,
                    &ev.outcomes,
                )?);
                scored.push(BeamEntry {
                    reward: Some(ev.reward),
                    mean_accuracy: Some(ev.mean_accuracy),
                    ..entry.clone()
                });
            }
            scored.sort_by(rank_order);
            (scored[0].prompts.clone(), scored[0].reward)
        } else {
            (state.beam[0].prompts.clone(), state.beam[0].reward)
        };
        events.push(RunEvent::Final {
            prompt_id: best.id.clone(),
            reward,
        });
        log.append(&events)?;
        state.log_len = log.len();
        if let Some(dir) = &self.run_dir {
            best.save(&dir.join("best_prompts.json"))?;
        }
        Ok(OptimizeOutcome {
            best,
            reward,
            state,
            log,
        })
    }

    fn persist_trajectories(&self, outcomes: &[SampleOutcome]) -> Result<()> {
        if let Some(dir) = &self.run_dir {
            let path = dir.join("trajectories.jsonl");
            let chunk = io::to_jsonl(&outcomes.iter().map(|o| &o.trajectory).collect::<Vec<_>>())?;
            io::append_bytes(&path, chunk.as_bytes())?;
        }
        Ok(())
    }
}

fn evaluation_event(iteration: u32, prompt_id: &str, phase: EvalPhase, outcomes: &[SampleOutcome]) -> Result<RunEvent> {
    Ok(RunEvent::Evaluation {
        iteration,
        prompt_id: prompt_id.to_string(),
        phase,
        reward: feedback::prompt_reward(outcomes)?,
        mean_accuracy: feedback::mean_accuracy(outcomes),
        samples: outcomes.iter().map(SampleScore::from).collect(),
    })
}

/// Latest checkpoint in a run directory.
pub fn latest_checkpoint(run_dir: &Path) -> PathBuf {
    run_dir.join("checkpoint.json")
}
