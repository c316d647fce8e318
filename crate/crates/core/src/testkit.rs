//! Deterministic scripted worlds for tests and demos.
//!
//! [`ToyWorld`] answers every request the agent and optimizer make from a
//! hash table keyed by the prompt variant and sample, so a search space of
//! prompt sets has known, reproducible rewards. [`FakeChatServer`] exposes
//! any responder over a minimal chat-completions HTTP endpoint.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, OnceLock};
use std::thread;
use std::time::Duration;

use regex::Regex;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::domain::{AgentRole, AnswerType, ChartContext, ChartType, PromptSet, Sample, Split};
use crate::gateway::{Gateway, ScriptedBackend};
use crate::synthesis::{HqaInstance, InstanceStatus, InstructionProposal, ProposalPool, Provenance};

fn variant_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"variant=(\d+(?:\.\d+)*)").unwrap())
}

fn candidate_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"This is candidate (\d+) of (\d+)\.").unwrap())
}

fn batched_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"Produce (\d+) different candidates").unwrap())
}

/// First `variant=` tag in `text`.
pub fn variant_of(text: &str) -> Option<String> {
    variant_re().captures(text).map(|c| c[1].to_string())
}

/// Policy prompt text of a variant.
pub fn policy_text(variant: &str) -> String {
    format!("variant={variant}\nPlan the modules needed to answer the chart question.")
}

/// Prompt map for a variant; only the policy prompt differs between variants.
pub fn variant_prompts(variant: &str) -> BTreeMap<AgentRole, String> {
    AgentRole::ALL
        .into_iter()
        .map(|r| {
            let text = match r {
                AgentRole::Policy => policy_text(variant),
                other => format!("You are the {other} model of a chart question-answering agent."),
            };
            (r, text)
        })
        .collect()
}

/// The root prompt set, variant `0`.
pub fn base_prompts() -> PromptSet {
    PromptSet::new("p0", variant_prompts("0")).expect("valid prompts")
}

/// `n` bar-chart samples with pre-extracted tables and integer answers.
pub fn toy_dataset(n: usize) -> Vec<Sample> {
    (0..n)
        .map(|i| {
            let value = 10 + (i * 7) % 90;
            let mut rec = serde_json::Map::new();
            rec.insert("label".into(), json!(format!("item {i}")));
            rec.insert("value".into(), json!(value));
            let chart = ChartContext {
                chart_type: ChartType::Bar,
                title: format!("Chart {i}"),
                records: vec![rec],
                table_text: Some(format!("label | value\nitem {i} | {value}")),
                image_ref: None,
            };
            Sample {
                id: format!("s{i:03}"),
                question: format!("What is the value of item {i}?"),
                gold_answer: value.to_string(),
                chart,
                split: Split::Train,
            }
        })
        .collect()
}

/// Ground truth of one (variant, sample) pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ToyOutcome {
    pub correct: bool,
    pub score: u8,
}

/// Rule-based responder. Prompt quality is a hash of the variant; per
/// sample correctness and chain score are hashes of (variant, sample).
#[derive(Clone, Debug)]
pub struct ToyWorld {
    salt: u64,
    by_question: HashMap<String, (String, String)>,
}

fn digest(parts: &[&str]) -> [u8; 32] {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    h.finalize().into()
}

impl ToyWorld {
    pub fn new(samples: &[Sample], salt: u64) -> Self {
        ToyWorld {
            salt,
            by_question: samples
                .iter()
                .map(|s| (s.question.clone(), (s.id.clone(), s.gold_answer.clone())))
                .collect(),
        }
    }

    /// Probability-like quality of a variant in [0.2, 0.9].
    pub fn quality(&self, variant: &str) -> f64 {
        let d = digest(&[&self.salt.to_string(), variant]);
        0.2 + 0.7 * f64::from(u16::from_le_bytes([d[0], d[1]])) / f64::from(u16::MAX)
    }

    pub fn outcome(&self, variant: &str, sample_id: &str) -> ToyOutcome {
        let q = self.quality(variant);
        let d = digest(&[&self.salt.to_string(), variant, sample_id]);
        let roll = f64::from(u16::from_le_bytes([d[0], d[1]])) / f64::from(u16::MAX);
        let correct = roll < q;
        let coop_roll = f64::from(u16::from_le_bytes([d[2], d[3]])) / f64::from(u16::MAX);
        let score = if coop_roll < q { 7 + d[4] % 4 } else { 1 + d[4] % 6 };
        ToyOutcome { correct, score }
    }

    fn sample_of(&self, user: &str) -> Option<&(String, String)> {
        let line = user.lines().find_map(|l| l.strip_prefix("Question: "))?;
        self.by_question.get(line.trim())
    }

    /// Reply to a (system, user) request, or `None` for an unknown request.
    pub fn respond(&self, system: &str, user: &str) -> Option<String> {
        if user.contains("Available modules:") {
            let v = variant_of(system)?;
            return Some(format!(
                "1. data_retrieval: read the table [variant={v}]\n2. solution: answer from the table [variant={v}]"
            ));
        }
        if user.contains("Return the relevant data as a table") {
            return Some("label | value".into());
        }
        if user.contains("Use all cached results to answer") {
            let v = variant_of(user)?;
            let (id, gold) = self.sample_of(user)?;
            let answer = if self.outcome(&v, id).correct {
                gold.as_str()
            } else {
                "none"
            };
            return Some(format!("Reading the table.\nAnswer: {answer}"));
        }
        if user.contains("Rate the tool chain") {
            let v = variant_of(user)?;
            let (id, _) = self.sample_of(user)?;
            let o = self.outcome(&v, id);
            let category = if o.score >= 7 { "none" } else { "incomplete" };
            return Some(format!(
                "Score: {}\nCategory: {category}\nRationale: scripted assessment",
                o.score
            ));
        }
        if user.contains("Summarize why the agent produces these errors") {
            return Some("Suggestion: make each tool build on the previous result".into());
        }
        if user.contains("Rewrite the prompts following the suggestion") {
            let v = variant_of(user)?;
            if let Some(c) = batched_re().captures(user) {
                let k: usize = c[1].parse().ok()?;
                let blocks: Vec<String> = (1..=k)
                    .map(|j| format!("=== candidate {j} ===\n[policy]\n{}", policy_text(&format!("{v}.{j}"))))
                    .collect();
                return Some(blocks.join("\n"));
            }
            let c = candidate_re().captures(user)?;
            let j: usize = c[1].parse().ok()?;
            return Some(format!("[policy]\n{}", policy_text(&format!("{v}.{j}"))));
        }
        None
    }

    pub fn backend(&self) -> ScriptedBackend {
        let world = self.clone();
        ScriptedBackend::from_fn(move |req| world.respond(req.system_prompt(), req.user_prompt()))
    }

    pub fn gateway(&self) -> Gateway {
        Gateway::scripted(self.backend())
    }
}

/// Four seed proposals per chart type.
pub fn seed_proposals() -> Vec<InstructionProposal> {
    [ChartType::Bar, ChartType::Line, ChartType::Pie]
        .into_iter()
        .flat_map(|ct| {
            (0..4).map(move |i| InstructionProposal {
                id: format!("seed-{ct}-{i}"),
                chart_type: ct,
                text: format!(
                    "Select the {ct} element ranked {i} by value; assume its value changes by {}0%.",
                    i + 1
                ),
                provenance: Provenance::Seed,
                feedback_log: vec![],
            })
        })
        .collect()
}

/// `n` pending bar-chart instances, each drawn from a seed proposal, and
/// the seed pool. Ids sort in creation order.
pub fn review_fixture(n: usize) -> (Vec<HqaInstance>, ProposalPool) {
    let seeds = seed_proposals();
    let bar: Vec<&InstructionProposal> = seeds.iter().filter(|p| p.chart_type == ChartType::Bar).collect();
    let instances = toy_dataset(n)
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            let proposal = bar[i % bar.len()];
            let assumption = format!("If item {i} increased by 10,");
            HqaInstance {
                id: format!("h-{i:04}"),
                hypothetical_question: format!("{assumption} {}", s.question),
                answer: (s.gold_answer.parse::<u64>().unwrap_or(0) + 10).to_string(),
                original_question: s.question,
                original_answer: s.gold_answer,
                assumption,
                answer_type: AnswerType::Int,
                proposal_id: proposal.id.clone(),
                proposal_text: proposal.text.clone(),
                status: InstanceStatus::Pending,
                verdicts: vec![],
                chart: s.chart,
            }
        })
        .collect();
    let mut pool = ProposalPool::default();
    for p in seeds {
        pool.add(p).expect("valid seed");
    }
    (instances, pool)
}

/// Answers proposal revision requests with a fixed instruction.
pub fn reviser_gateway() -> Gateway {
    Gateway::scripted(ScriptedBackend::from_fn(|req| {
        req.user_prompt().contains("Reviewer feedback:").then(|| {
            "Revised instruction: Select one bar by label; assume its value rises while the axis range stays fixed."
                .to_string()
        })
    }))
}

type ChatResponder = Arc<dyn Fn(&str, &str) -> Option<String> + Send + Sync>;

/// Minimal chat-completions server on a loopback port. Answers
/// `POST` bodies `{messages: [system, user]}` through a responder; unknown
/// requests get a 400. Stops when dropped.
pub struct FakeChatServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    requests: Arc<AtomicUsize>,
    handle: Option<thread::JoinHandle<()>>,
}

impl FakeChatServer {
    pub fn start(responder: impl Fn(&str, &str) -> Option<String> + Send + Sync + 'static) -> std::io::Result<Self> {
        Self::start_with_failures(responder, 0)
    }

    /// Like [`FakeChatServer::start`]; the first `failures` requests get a
    /// 503.
    pub fn start_with_failures(
        responder: impl Fn(&str, &str) -> Option<String> + Send + Sync + 'static,
        failures: usize,
    ) -> std::io::Result<Self> {
        let listener = TcpListener::bind("127.0.0.1:0")?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let requests = Arc::new(AtomicUsize::new(0));
        let responder: ChatResponder = Arc::new(responder);
        let (stop2, requests2) = (stop.clone(), requests.clone());
        let handle = thread::spawn(move || {
            while !stop2.load(Ordering::SeqCst) {
                match listener.accept() {
                    Ok((stream, _)) => {
                        let n = requests2.fetch_add(1, Ordering::SeqCst);
                        let responder = responder.clone();
                        thread::spawn(move || {
                            let _ = serve(stream, &*responder, n < failures);
                        });
                    }
                    Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(2)),
                    Err(_) => break,
                }
            }
        });
        Ok(FakeChatServer {
            addr,
            stop,
            requests,
            handle: Some(handle),
        })
    }

    pub fn url(&self) -> String {
        format!("http://{}/v1/chat/completions", self.addr)
    }

    pub fn requests(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }
}

impl Drop for FakeChatServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

fn serve(
    stream: TcpStream,
    responder: &(dyn Fn(&str, &str) -> Option<String> + Send + Sync),
    fail: bool,
) -> std::io::Result<()> {
    stream.set_nonblocking(false)?;
    stream.set_read_timeout(Some(Duration::from_secs(10)))?;
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut length = 0usize;
    let mut line = String::new();
    loop {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            return Ok(());
        }
        let trimmed = line.trim_end();
        if trimmed.is_empty() {
            break;
        }
        if let Some((name, value)) = trimmed.split_once(':') {
            if name.eq_ignore_ascii_case("content-length") {
                length = value.trim().parse().unwrap_or(0);
            }
        }
    }
    let mut body = vec![0u8; length];
    reader.read_exact(&mut body)?;
    let (status, payload) = if fail {
        ("503 Service Unavailable", json!({"error": "overloaded"}))
    } else {
        let parsed: Value = serde_json::from_slice(&body).unwrap_or(Value::Null);
        let content = |i: usize| {
            parsed
                .pointer(&format!("/messages/{i}/content"))
                .and_then(Value::as_str)
                .unwrap_or("")
                .to_string()
        };
        match responder(&content(0), &content(1)) {
            Some(text) => (
                "200 OK",
                json!({"choices": [{"index": 0, "message": {"role": "assistant", "content": text}}]}),
            ),
            None => ("400 Bad Request", json!({"error": "no scripted reply"})),
        }
    };
    let body = payload.to_string();
    let mut stream = stream;
    write!(
        stream,
        "HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    )?;
    stream.flush()
}
