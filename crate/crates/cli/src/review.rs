//! `review-serve` and the `review` client commands.

use std::net::{IpAddr, SocketAddr};
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{Context, Result};
use chartflow_client::ReviewClient;
use chartflow_core::review::{ReviewStore, TOKEN_ENV};
use chartflow_core::synthesis::{ReviewAspects, ReviewVerdict};
use chartflow_service::{router, serve as serve_http, AppState};
use clap::{Args, Subcommand};

use crate::run::load_config;

#[derive(Args)]
pub struct ServeArgs {
    /// Review store directory (written by `synthesize`).
    #[arg(long)]
    store: PathBuf,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: IpAddr,
    /// Run config (TOML); its gateway revises rejected proposals.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scripted fixture store for proposal revisions.
    #[arg(long)]
    fixtures: Option<PathBuf>,
    /// Reviewer UI files served from /.
    #[arg(long)]
    static_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 900)]
    lease_ttl_secs: i64,
}

pub fn serve(args: ServeArgs) -> Result<ExitCode> {
    let cfg = load_config(args.config.as_deref(), args.fixtures.as_deref())?;
    // built and finally dropped outside the async runtime; the remote
    // backend uses a blocking HTTP client
    let gateway = Arc::new(cfg.build_gateway(None)?);
    let store = ReviewStore::open(&args.store)?
        .with_lease_ttl(chrono::Duration::seconds(args.lease_ttl_secs))
        .with_retry_limit(cfg.synthesis.retry_limit);
    let token = std::env::var(TOKEN_ENV).ok().filter(|t| !t.is_empty());
    if token.is_none() {
        tracing::warn!("{TOKEN_ENV} is not set; the API accepts unauthenticated requests");
    }
    let state = AppState::new(store, gateway.clone(), token);
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let addr = SocketAddr::new(args.host, args.port);
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .with_context(|| format!("binding {addr}"))?;
        eprintln!("review service on http://{}", listener.local_addr()?);
        serve_http(listener, router(state, args.static_dir), async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
        anyhow::Ok(())
    })?;
    drop(rt);
    drop(gateway);
    Ok(ExitCode::SUCCESS)
}

#[derive(Args)]
pub struct ReviewArgs {
    /// Service root URL.
    #[arg(long, default_value = "http://127.0.0.1:8080")]
    url: String,
    /// Shared reviewer token.
    #[arg(long, env = TOKEN_ENV, hide_env_values = true)]
    token: Option<String>,
    #[command(subcommand)]
    command: ReviewCommand,
}

#[derive(Subcommand)]
enum ReviewCommand {
    /// Lease the next pending instance and print it as JSON.
    Next {
        #[arg(long)]
        reviewer: String,
    },
    /// Submit a verdict on a leased instance.
    Submit {
        #[arg(long)]
        instance: String,
        #[arg(long)]
        reviewer: String,
        #[arg(long, conflicts_with = "reject", required_unless_present = "reject")]
        accept: bool,
        #[arg(long)]
        reject: bool,
        #[arg(long)]
        question_reasonable: bool,
        #[arg(long)]
        answer_accurate: bool,
        #[arg(long)]
        complexity_adequate: bool,
        #[arg(long, default_value = "")]
        comment: String,
    },
    /// Retention statistics.
    Stats,
    /// The instruction proposal pool as JSON.
    Proposals,
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

pub fn client(args: ReviewArgs) -> Result<ExitCode> {
    let client = ReviewClient::new(args.url, args.token);
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        match args.command {
            ReviewCommand::Next { reviewer } => match client.next(&reviewer).await? {
                Some(inst) => print_json(&inst)?,
                None => println!("queue empty"),
            },
            ReviewCommand::Submit {
                instance,
                reviewer,
                accept,
                question_reasonable,
                answer_accurate,
                complexity_adequate,
                comment,
                ..
            } => {
                let verdict = ReviewVerdict {
                    reviewer,
                    accept,
                    aspects: ReviewAspects {
                        question_reasonable,
                        answer_accurate,
                        complexity_adequate,
                    },
                    comment,
                    timestamp: chrono::Utc::now(),
                };
                let out = client.submit(&instance, verdict).await?;
                if let Some(w) = &out.warning {
                    eprintln!("warning: {w}");
                }
                print_json(&out)?;
            }
            ReviewCommand::Stats => print_json(&client.stats().await?)?,
            ReviewCommand::Proposals => print_json(&client.proposals().await?)?,
        }
        anyhow::Ok(())
    })?;
    Ok(ExitCode::SUCCESS)
}
