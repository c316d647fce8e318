use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand};

mod eval;
mod review;
mod run;
mod synth;

#[derive(Parser)]
#[command(
    name = "chartflow",
    version,
    about = "Chart QA agent prompt optimization and hypothetical QA synthesis"
)]
struct Cli {
    /// More log output on stderr (-v info, -vv debug). RUST_LOG wins when set.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Search for better chain-of-tool prompts with beam search.
    Optimize(run::RunInputs),
    /// Like `optimize`, but records every model response to a fixture store
    /// so the run can be replayed offline.
    Record(run::RecordArgs),
    /// Re-execute a recorded run from its manifest and fixtures and diff the
    /// run logs.
    Replay { run_dir: PathBuf },
    /// Score prompts on a dataset, or compare two reports.
    Eval(EvalArgs),
    /// Generate hypothetical QA instances into a review store.
    Synthesize(synth::SynthesizeArgs),
    /// Inspect synthesized data.
    Synth {
        #[command(subcommand)]
        command: SynthCommand,
    },
    /// Serve the reviewer queue over HTTP.
    ReviewServe(review::ServeArgs),
    /// Talk to a running review service.
    Review(review::ReviewArgs),
}

#[derive(Subcommand)]
enum SynthCommand {
    /// Corpus statistics and retention of a review store.
    Stats { dir: PathBuf },
}

#[derive(Args)]
#[command(group(ArgGroup::new("mode").required(true).args(["dataset", "report_a"])))]
pub struct EvalArgs {
    /// Run config (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Samples to evaluate (JSONL).
    #[arg(long, requires = "prompts")]
    dataset: Option<PathBuf>,
    /// Prompt set to evaluate (JSON).
    #[arg(long)]
    prompts: Option<PathBuf>,
    /// Scripted fixture store; selects the offline backend.
    #[arg(long)]
    fixtures: Option<PathBuf>,
    /// Write the report as JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Factoid QA report; with --report-b prints the decline rate.
    #[arg(long, requires = "report_b", conflicts_with = "dataset")]
    report_a: Option<PathBuf>,
    /// Hypothetical QA report.
    #[arg(long, requires = "report_a")]
    report_b: Option<PathBuf>,
}

fn init_logging(verbose: u8) {
    let default = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(default));
    tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .init();
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(cli.verbose);
    let result = match cli.command {
        Command::Optimize(a) => run::optimize(a),
        Command::Record(a) => run::record(a),
        Command::Replay { run_dir } => run::replay(&run_dir),
        Command::Eval(a) => eval::run(a),
        Command::Synthesize(a) => synth::synthesize(a),
        Command::Synth {
            command: SynthCommand::Stats { dir },
        } => synth::stats(&dir),
        Command::ReviewServe(a) => review::serve(a),
        Command::Review(a) => review::client(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
