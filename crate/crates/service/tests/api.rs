use std::sync::Arc;

use chartflow_core::review::{ApiError, ApiErrorKind, ReviewStore, SubmitOutcome, VerdictRequest, TOKEN_HEADER};
use chartflow_core::synthesis::{
    HqaInstance, InstanceStatus, InstructionProposal, RetentionStats, ReviewAspects, ReviewVerdict,
};
use chartflow_core::testkit::{review_fixture, reviser_gateway};
use chartflow_service::{router, serve, AppState};
use serde_json::json;
use tokio::sync::oneshot;

struct Running {
    base: String,
    stop: Option<oneshot::Sender<()>>,
    handle: tokio::task::JoinHandle<std::io::Result<()>>,
}

impl Running {
    async fn shutdown(mut self) {
        let _ = self.stop.take().unwrap().send(());
        self.handle.await.unwrap().unwrap();
    }
}

async fn start(dir: &std::path::Path, token: Option<&str>, static_dir: Option<std::path::PathBuf>) -> Running {
    let store = match ReviewStore::open(dir) {
        Ok(s) => s,
        Err(_) => {
            let (instances, pool) = review_fixture(2);
            ReviewStore::create(dir, &instances, &pool).unwrap()
        }
    };
    let state = AppState::new(store, Arc::new(reviser_gateway()), token.map(str::to_string));
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let base = format!("http://{}", listener.local_addr().unwrap());
    let (tx, rx) = oneshot::channel();
    let handle = tokio::spawn(serve(listener, router(state, static_dir), async {
        let _ = rx.await;
    }));
    Running {
        base,
        stop: Some(tx),
        handle,
    }
}

fn verdict(reviewer: &str, accept: bool, comment: &str) -> ReviewVerdict {
    ReviewVerdict {
        reviewer: reviewer.into(),
        accept,
        aspects: ReviewAspects {
            question_reasonable: accept,
            answer_accurate: accept,
            complexity_adequate: accept,
        },
        comment: comment.into(),
        timestamp: chrono::DateTime::parse_from_rfc3339("2024-05-01T12:00:00Z")
            .unwrap()
            .into(),
    }
}

#[tokio::test(flavor = "multi_thread")]
async fn queue_verdict_and_views() {
    let dir = tempfile::tempdir().unwrap();
    let svc = start(dir.path(), None, None).await;
    let http = reqwest::Client::new();
    let url = |p: &str| format!("{}{p}", svc.base);

    assert_eq!(
        http.get(url("/healthz")).send().await.unwrap().text().await.unwrap(),
        "ok"
    );

    let first: HqaInstance = http
        .get(url("/api/queue/next?reviewer=ann"))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(first.id, "h-0000");
    let second: HqaInstance = http
        .get(url("/api/queue/next?reviewer=bob"))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(second.id, "h-0001");
    let none = http.get(url("/api/queue/next?reviewer=cyd")).send().await.unwrap();
    assert_eq!(none.status(), 204);

    let conflict = http
        .post(url("/api/verdict"))
        .json(&VerdictRequest {
            instance_id: first.id.clone(),
            verdict: verdict("bob", true, ""),
        })
        .send()
        .await
        .unwrap();
    assert_eq!(conflict.status(), 409);
    let body: ApiError = conflict.json().await.unwrap();
    assert_eq!(body.kind, ApiErrorKind::LeaseConflict);

    let ok: SubmitOutcome = http
        .post(url("/api/verdict"))
        .json(&VerdictRequest {
            instance_id: first.id.clone(),
            verdict: verdict("ann", true, ""),
        })
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(ok.instance.status, InstanceStatus::Accepted);
    assert_eq!(ok.stats.accepted, 1);

    let stats: RetentionStats = http.get(url("/api/stats")).send().await.unwrap().json().await.unwrap();
    assert_eq!((stats.accepted, stats.pending), (1, 1));
    let inst: HqaInstance = http
        .get(url(&format!("/api/instances/{}", first.id)))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(inst.verdicts.len(), 1);
    let pool: Vec<InstructionProposal> = http
        .get(url("/api/proposals"))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(pool.len(), 12);

    let missing = http.get(url("/api/instances/h-9999")).send().await.unwrap();
    assert_eq!(missing.status(), 404);
    let unknown = http
        .post(url("/api/verdict"))
        .json(&VerdictRequest {
            instance_id: "h-9999".into(),
            verdict: verdict("ann", true, ""),
        })
        .send()
        .await
        .unwrap();
    assert_eq!(unknown.status(), 404);

    // accepting without the required aspects is refused
    let mut bad = verdict("bob", true, "");
    bad.aspects.answer_accurate = false;
    let invalid = http
        .post(url("/api/verdict"))
        .json(&VerdictRequest {
            instance_id: second.id.clone(),
            verdict: bad,
        })
        .send()
        .await
        .unwrap();
    assert_eq!(invalid.status(), 422);

    let malformed = http
        .post(url("/api/verdict"))
        .json(&json!({"instance_id": 3}))
        .send()
        .await
        .unwrap();
    assert!(malformed.status().is_client_error());
    svc.shutdown().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn token_is_required_when_configured() {
    let dir = tempfile::tempdir().unwrap();
    let svc = start(dir.path(), Some("s3cret"), None).await;
    let http = reqwest::Client::new();
    let stats = format!("{}/api/stats", svc.base);
    assert_eq!(http.get(&stats).send().await.unwrap().status(), 401);
    assert_eq!(
        http.get(&stats)
            .header(TOKEN_HEADER, "nope")
            .send()
            .await
            .unwrap()
            .status(),
        401
    );
    assert_eq!(
        http.get(&stats)
            .header(TOKEN_HEADER, "s3cret")
            .send()
            .await
            .unwrap()
            .status(),
        200
    );
    assert_eq!(
        http.get(format!("{}/healthz", svc.base)).send().await.unwrap().status(),
        200
    );
    svc.shutdown().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn restart_keeps_verdicts_and_drops_leases() {
    let dir = tempfile::tempdir().unwrap();
    let http = reqwest::Client::new();
    let svc = start(dir.path(), None, None).await;
    let a: HqaInstance = http
        .get(format!("{}/api/queue/next?reviewer=ann", svc.base))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    let _b: HqaInstance = http
        .get(format!("{}/api/queue/next?reviewer=bob", svc.base))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    let out: SubmitOutcome = http
        .post(format!("{}/api/verdict", svc.base))
        .json(&VerdictRequest {
            instance_id: a.id.clone(),
            verdict: verdict("ann", false, "the assumption is ambiguous"),
        })
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert!(out.added_proposal.is_some());
    svc.shutdown().await;

    let svc = start(dir.path(), None, None).await;
    let stats: RetentionStats = http
        .get(format!("{}/api/stats", svc.base))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!((stats.rejected, stats.pending), (1, 1));
    // bob's lease did not survive the restart
    let c: HqaInstance = http
        .get(format!("{}/api/queue/next?reviewer=cyd", svc.base))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(c.id, "h-0001");
    let pool: Vec<InstructionProposal> = http
        .get(format!("{}/api/proposals", svc.base))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(pool.len(), 13);
    assert!(pool.iter().any(|p| p.feedback_log == ["the assumption is ambiguous"]));
    svc.shutdown().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn static_files_are_served_from_root() {
    let dir = tempfile::tempdir().unwrap();
    let ui = tempfile::tempdir().unwrap();
    std::fs::write(ui.path().join("index.html"), "<h1>review</h1>").unwrap();
    let svc = start(dir.path(), Some("t"), Some(ui.path().to_path_buf())).await;
    let body = reqwest::get(format!("{}/", svc.base))
        .await
        .unwrap()
        .text()
        .await
        .unwrap();
    assert_eq!(body, "<h1>review</h1>");
    svc.shutdown().await;
}
