//! `optimize`, `record` and `replay`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use chartflow_core::config::{BackendChoice, RunConfig};
use chartflow_core::domain::{load_dataset, EditMode, PromptSet};
use chartflow_core::io::{file_hash, read_json, write_json};
use chartflow_core::optimizer::{latest_checkpoint, BeamState, OptimizeOutcome, Optimizer};
use clap::Args;
use serde::{Deserialize, Serialize};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const RUN_LOG_FILE: &str = "run_log.jsonl";

#[derive(Args, Clone)]
pub struct RunInputs {
    /// Run config (TOML). Flags below override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training samples (JSONL).
    #[arg(long)]
    train: PathBuf,
    /// Initial prompt set (JSON).
    #[arg(long)]
    p0: PathBuf,
    /// Directory for the run log, checkpoints and results.
    #[arg(long)]
    run_dir: PathBuf,
    /// Scripted fixture store; selects the offline backend.
    #[arg(long)]
    fixtures: Option<PathBuf>,
    /// Continue from the latest checkpoint in --run-dir.
    #[arg(long)]
    resume: bool,
    /// Copy the selected prompt set here.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args, Clone, Default)]
pub struct Overrides {
    #[arg(long)]
    iterations: Option<u32>,
    #[arg(long)]
    beam_width: Option<usize>,
    #[arg(long)]
    edit_count: Option<usize>,
    #[arg(long)]
    minibatch_size: Option<usize>,
    #[arg(long)]
    eval_subset_size: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<u8>,
    #[arg(long)]
    seed: Option<u64>,
    /// Rank by accuracy alone (no collaborative reward).
    #[arg(long)]
    accuracy_only: bool,
    /// Keep parents in the next beam alongside their children.
    #[arg(long)]
    include_parents: bool,
    /// Ask for all edits of a parent in one call.
    #[arg(long)]
    batched_edits: bool,
    /// Pick the final prompt set by reward over the whole training set.
    #[arg(long)]
    final_full_eval: bool,
}

impl Overrides {
    fn apply(&self, cfg: &mut RunConfig) {
        let o = &mut cfg.optimizer;
        if let Some(v) = self.iterations {
            o.iterations = v;
        }
        if let Some(v) = self.beam_width {
            o.beam_width = v;
        }
        if let Some(v) = self.edit_count {
            o.edit_count = v;
        }
        if let Some(v) = self.minibatch_size {
            o.minibatch_size = v;
        }
        if let Some(v) = self.eval_subset_size {
            o.eval_subset_size = v;
        }
        if let Some(v) = self.alpha {
            o.alpha = v;
        }
        if let Some(v) = self.beta {
            o.beta = v;
        }
        if let Some(v) = self.seed {
            o.rng_seed = v;
        }
        o.accuracy_only_reward |= self.accuracy_only;
        o.include_parents_in_beam |= self.include_parents;
        o.final_full_eval |= self.final_full_eval;
        if self.batched_edits {
            o.edit_mode = EditMode::Batched;
        }
    }
}

#[derive(Args)]
pub struct RecordArgs {
    #[command(flatten)]
    inputs: RunInputs,
    /// Fixture store to append responses to [default: <run-dir>/fixtures.jsonl].
    #[arg(long)]
    fixtures_out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub optimizer: u64,
}

/// Everything needed to re-execute a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config: RunConfig,
    pub config_hash: String,
    pub train: PathBuf,
    pub dataset_hash: String,
    pub p0: PathBuf,
    pub p0_hash: String,
    pub fixtures: Option<PathBuf>,
    pub fixture_hash: Option<String>,
    pub seeds: Seeds,
    /// Set once the run was continued from a checkpoint.
    #[serde(default)]
    pub resumed: bool,
}

pub fn load_config(path: Option<&Path>, fixtures: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(f) = fixtures {
        cfg.gateway.backend = BackendChoice::Scripted;
        cfg.gateway.fixtures = Some(std::path::absolute(f)?);
    }
    Ok(cfg)
}

fn cancel_flag() -> Arc<AtomicBool> {
    let flag = Arc::new(AtomicBool::new(false));
    let f = flag.clone();
    if let Err(e) = ctrlc::set_handler(move || f.store(true, Ordering::SeqCst)) {
        tracing::warn!("interrupt handler not installed: {e}");
    }
    flag
}

fn execute(
    cfg: &RunConfig,
    inputs: &RunInputs,
    record_to: Option<&Path>,
    cancel: Option<Arc<AtomicBool>>,
) -> Result<OptimizeOutcome> {
    let train = load_dataset(&inputs.train).with_context(|| format!("loading {}", inputs.train.display()))?;
    let p0 = PromptSet::load(&inputs.p0).with_context(|| format!("loading {}", inputs.p0.display()))?;
    std::fs::create_dir_all(&inputs.run_dir)?;
    let gateway = Arc::new(cfg.build_gateway(record_to)?);
    let engine = cfg.build_engine(gateway)?;
    let mut opt = Optimizer::new(&engine, cfg.optimizer.clone())
        .with_rubric(cfg.rubric()?)
        .with_run_dir(&inputs.run_dir);
    if let Some(flag) = cancel {
        opt = opt.with_cancel_flag(flag);
    }
    let outcome = if inputs.resume {
        let ckpt = latest_checkpoint(&inputs.run_dir);
        let state = BeamState::load(&ckpt).with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
        opt.resume(&train, state)?
    } else {
        opt.optimize(&train, &p0)?
    };
    Ok(outcome)
}

fn manifest(command: &str, cfg: &RunConfig, inputs: &RunInputs, fixtures: Option<&Path>) -> Result<Manifest> {
    let fixtures = fixtures.map(std::path::absolute).transpose()?;
    let fixture_hash = match &fixtures {
        Some(f) if f.exists() => Some(file_hash(f)?),
        _ => None,
    };
    Ok(Manifest {
        command: command.to_string(),
        config: cfg.clone(),
        config_hash: cfg.hash(),
        train: std::path::absolute(&inputs.train)?,
        dataset_hash: file_hash(&inputs.train)?,
        p0: std::path::absolute(&inputs.p0)?,
        p0_hash: file_hash(&inputs.p0)?,
        fixtures,
        fixture_hash,
        seeds: Seeds {
            optimizer: cfg.optimizer.rng_seed,
        },
        resumed: inputs.resume,
    })
}

fn report(outcome: &OptimizeOutcome, inputs: &RunInputs) -> Result<()> {
    if let Some(out) = &inputs.out {
        outcome.best.save(out)?;
    }
    let reward = outcome.reward.map_or("n/a".to_string(), |r| format!("{r:.4}"));
    println!("best prompt set  {}", outcome.best.id);
    println!("reward           {reward}");
    println!("iterations       {}", outcome.state.iteration);
    println!(
        "prompts          {}",
        inputs.run_dir.join("best_prompts.json").display()
    );
    Ok(())
}

fn resolved(inputs: &RunInputs) -> Result<RunConfig> {
    let mut cfg = load_config(inputs.config.as_deref(), inputs.fixtures.as_deref())?;
    inputs.overrides.apply(&mut cfg);
    Ok(cfg)
}

pub fn optimize(inputs: RunInputs) -> Result<ExitCode> {
    let cfg = resolved(&inputs)?;
    let fixtures = match cfg.gateway.backend {
        BackendChoice::Scripted => cfg.gateway.fixtures.clone(),
        BackendChoice::Remote => None,
    };
    std::fs::create_dir_all(&inputs.run_dir)?;
    write_json(
        &inputs.run_dir.join(MANIFEST_FILE),
        &manifest("optimize", &cfg, &inputs, fixtures.as_deref())?,
    )?;
    let outcome = execute(&cfg, &inputs, None, Some(cancel_flag()))?;
    report(&outcome, &inputs)?;
    Ok(ExitCode::SUCCESS)
}

pub fn record(args: RecordArgs) -> Result<ExitCode> {
    let inputs = args.inputs;
    let cfg = resolved(&inputs)?;
    let store = args
        .fixtures_out
        .unwrap_or_else(|| inputs.run_dir.join("fixtures.jsonl"));
    std::fs::create_dir_all(&inputs.run_dir)?;
    let outcome = execute(&cfg, &inputs, Some(&store), Some(cancel_flag()));
    // written even when the run fails
    let m = manifest("record", &cfg, &inputs, Some(&store))?;
    write_json(&inputs.run_dir.join(MANIFEST_FILE), &m)?;
    let outcome = outcome?;
    report(&outcome, &inputs)?;
    println!("fixtures         {}", store.display());
    Ok(ExitCode::SUCCESS)
}

fn check_hash(label: &str, path: &Path, expected: &str) -> Result<()> {
    let actual = file_hash(path).with_context(|| format!("reading {label} {}", path.display()))?;
    if actual != expected {
        bail!("{label} {} changed since the run was recorded", path.display());
    }
    Ok(())
}

pub fn replay(run_dir: &Path) -> Result<ExitCode> {
    let m: Manifest = read_json(&run_dir.join(MANIFEST_FILE))?;
    let Some(fixtures) = &m.fixtures else {
        bail!("run has no fixture store; capture one with `chartflow record`");
    };
    let Some(fixture_hash) = &m.fixture_hash else {
        bail!("manifest lists no fixture hash for {}", fixtures.display());
    };
    check_hash("dataset", &m.train, &m.dataset_hash)?;
    check_hash("initial prompts", &m.p0, &m.p0_hash)?;
    check_hash("fixture store", fixtures, fixture_hash)?;
    if m.config.hash() != m.config_hash {
        bail!("manifest config does not match its hash");
    }

    let mut cfg = m.config.clone();
    cfg.gateway.backend = BackendChoice::Scripted;
    cfg.gateway.fixtures = Some(fixtures.clone());
    cfg.gateway.strict = true;
    let scratch = tempfile::tempdir()?;
    let inputs = RunInputs {
        config: None,
        train: m.train.clone(),
        p0: m.p0.clone(),
        run_dir: scratch.path().to_path_buf(),
        fixtures: None,
        resume: false,
        out: None,
        overrides: Overrides::default(),
    };
    execute(&cfg, &inputs, None, None).context("re-executing the run")?;

    let recorded = std::fs::read_to_string(run_dir.join(RUN_LOG_FILE))?;
    let replayed = std::fs::read_to_string(scratch.path().join(RUN_LOG_FILE))?;
    // a resumed run keeps the start line of its first leg
    let skip = usize::from(m.resumed);
    let a: Vec<&str> = recorded.split_inclusive('\n').skip(skip).collect();
    let b: Vec<&str> = replayed.split_inclusive('\n').skip(skip).collect();
    if a == b {
        println!("replay: {} run log lines identical", a.len());
        return Ok(ExitCode::SUCCESS);
    }
    let at = a
        .iter()
        .zip(&b)
        .position(|(x, y)| x != y)
        .unwrap_or(a.len().min(b.len()));
    println!("replay: run logs differ at line {}", at + skip + 1);
    println!("  recorded: {}", a.get(at).map_or("<end of log>", |l| l.trim_end()));
    println!("  replayed: {}", b.get(at).map_or("<end of log>", |l| l.trim_end()));
    Ok(ExitCode::from(1))
}
