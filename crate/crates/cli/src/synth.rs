//! `synthesize` and `synth stats`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use chartflow_core::io::{file_hash, read_jsonl, write_json, write_jsonl};
use chartflow_core::review::{ReviewStore, INSTANCES_FILE};
use chartflow_core::synthesis::{
    init_pool, render_synth_stats, run_round, synth_stats, HqaBatch, InstructionProposal, SynthesisChart,
};
use clap::Args;
use serde::Serialize;

use crate::run::load_config;

#[derive(Args)]
pub struct SynthesizeArgs {
    /// Run config (TOML); the [synthesis] section applies.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Charts with their factoid QA pairs (JSONL).
    #[arg(long)]
    charts: PathBuf,
    /// Seed instruction proposals (JSONL), at least four per chart type.
    #[arg(long)]
    pool: PathBuf,
    /// Output directory; becomes a review store.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    rounds: Option<u32>,
    #[arg(long)]
    seed: Option<u64>,
    /// Scripted fixture store; selects the offline backend.
    #[arg(long)]
    fixtures: Option<PathBuf>,
}

#[derive(Serialize)]
struct SynthManifest {
    command: &'static str,
    config_hash: String,
    charts: PathBuf,
    charts_hash: String,
    pool: PathBuf,
    pool_hash: String,
    fixture_hash: Option<String>,
    seed: u64,
    rounds: u32,
}

pub fn synthesize(args: SynthesizeArgs) -> Result<ExitCode> {
    if args.out.join(INSTANCES_FILE).exists() {
        bail!("{} already holds a review store", args.out.display());
    }
    let mut cfg = load_config(args.config.as_deref(), args.fixtures.as_deref())?;
    if let Some(r) = args.rounds {
        cfg.synthesis.rounds = r;
    }
    if let Some(s) = args.seed {
        cfg.synthesis.rng_seed = s;
    }
    let charts: Vec<SynthesisChart> =
        read_jsonl(&args.charts).with_context(|| format!("loading {}", args.charts.display()))?;
    let seeds: Vec<InstructionProposal> =
        read_jsonl(&args.pool).with_context(|| format!("loading {}", args.pool.display()))?;
    let pool = init_pool(seeds)?;
    let gateway = cfg.build_gateway(None)?;

    let mut all = HqaBatch::default();
    for round in 0..cfg.synthesis.rounds {
        let batch = run_round(&gateway, &pool, &charts, &cfg.synthesis, round);
        tracing::info!(
            round,
            instances = batch.instances.len(),
            violations = batch.violations.len(),
            "round done"
        );
        all.instances.extend(batch.instances);
        all.violations.extend(batch.violations);
        all.failures.extend(batch.failures);
    }
    all.instances.sort_by(|a, b| a.id.cmp(&b.id));
    all.instances.dedup_by(|a, b| a.id == b.id);

    let store = ReviewStore::create(&args.out, &all.instances, &pool)?;
    write_jsonl(&args.out.join("violations.jsonl"), &all.violations)?;
    write_jsonl(&args.out.join("failures.jsonl"), &all.failures)?;
    let fixture_hash = match &cfg.gateway.fixtures {
        Some(f) if f.exists() => Some(file_hash(f)?),
        _ => None,
    };
    write_json(
        &args.out.join("manifest.json"),
        &SynthManifest {
            command: "synthesize",
            config_hash: cfg.hash(),
            charts: std::path::absolute(&args.charts)?,
            charts_hash: file_hash(&args.charts)?,
            pool: std::path::absolute(&args.pool)?,
            pool_hash: file_hash(&args.pool)?,
            fixture_hash,
            seed: cfg.synthesis.rng_seed,
            rounds: cfg.synthesis.rounds,
        },
    )?;
    print!("{}", render_synth_stats(&synth_stats(store.instances())));
    println!("violations         {}", all.violations.len());
    println!("chart failures     {}", all.failures.len());
    Ok(ExitCode::SUCCESS)
}

pub fn stats(dir: &Path) -> Result<ExitCode> {
    let snap = ReviewStore::read_snapshot(dir)?;
    print!("{}", render_synth_stats(&synth_stats(&snap.instances)));
    println!("pool size          {}", snap.pool.len());
    Ok(ExitCode::SUCCESS)
}
