//! `eval`: score a prompt set, or compare two reports.

use std::path::Path;
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{Context, Result};
use chartflow_core::domain::{load_dataset, PromptSet};
use chartflow_core::io::{read_json, write_json};
use chartflow_core::metrics::{decline_rate, evaluate, render_report};
use serde::Deserialize;

use crate::run::load_config;
use crate::EvalArgs;

/// Accuracy field of a report; other fields are ignored.
#[derive(Deserialize)]
struct Accuracy {
    accuracy: f64,
}

fn accuracy_of(path: &Path) -> Result<f64> {
    let r: Accuracy = read_json(path).with_context(|| format!("reading report {}", path.display()))?;
    Ok(r.accuracy)
}

pub fn run(args: EvalArgs) -> Result<ExitCode> {
    if let (Some(a), Some(b)) = (&args.report_a, &args.report_b) {
        let (qa, hqa) = (accuracy_of(a)?, accuracy_of(b)?);
        println!("accuracy a       {qa:.2}");
        println!("accuracy b       {hqa:.2}");
        println!("decline rate     {:.2}", decline_rate(qa, hqa)?);
        return Ok(ExitCode::SUCCESS);
    }
    let (Some(dataset), Some(prompts)) = (&args.dataset, &args.prompts) else {
        anyhow::bail!("eval needs --dataset and --prompts, or --report-a and --report-b");
    };
    let cfg = load_config(args.config.as_deref(), args.fixtures.as_deref())?;
    let samples = load_dataset(dataset).with_context(|| format!("loading {}", dataset.display()))?;
    let prompts = PromptSet::load(prompts)?;
    let engine = cfg.build_engine(Arc::new(cfg.build_gateway(None)?))?;
    let report = evaluate(&engine, &samples, &prompts)?;
    print!("{}", render_report(&report));
    if let Some(out) = &args.out {
        write_json(out, &report)?;
    }
    Ok(ExitCode::SUCCESS)
}
