//! In-process chat-completion server for contract tests. It understands the
//! default prompt templates, can fail a configurable number of requests and
//! records concurrency and the `Authorization` headers it received.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::routing::post;
use axum::{Json, Router};
use serde_json::{json, Value};

/// Knobs and counters shared with the server task.
#[derive(Debug, Default)]
pub struct Stub {
    /// Requests still to be failed with `fail_status`.
    pub fail_first: AtomicUsize,
    pub fail_status: AtomicUsize,
    pub requests: AtomicUsize,
    pub inflight: AtomicUsize,
    pub max_inflight: AtomicUsize,
    pub delay_ms: AtomicUsize,
    pub auth: Mutex<Vec<String>>,
}

impl Stub {
    pub fn failing(n: usize, status: u16) -> Arc<Self> {
        let s = Self::default();
        s.fail_first.store(n, Ordering::SeqCst);
        s.fail_status.store(status as usize, Ordering::SeqCst);
        Arc::new(s)
    }

    pub fn requests(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }

    pub fn max_inflight(&self) -> usize {
        self.max_inflight.load(Ordering::SeqCst)
    }
}

fn numbered(items: &[&str]) -> String {
    items.iter().enumerate().map(|(i, s)| format!("{}. {s}\n", i + 1)).collect()
}

fn after<'a>(text: &'a str, marker: &str) -> &'a str {
    text.split_once(marker).map(|(_, t)| t.trim()).unwrap_or("")
}

/// Deterministic stand-in for a model. Instructions decompose on `;`,
/// recombination joins with `; `, negation prefixes `do not`, and any other
/// prompt is answered with `answer<prompt>`. An instruction containing
/// `UNPARSEABLE` gets a reply that is not a numbered list.
pub fn reply_for(prompt: &str) -> String {
    if prompt.starts_with("Decompose") {
        let ins = after(prompt, "Instruction:\n");
        if ins.contains("UNPARSEABLE") {
            return "I would rather not.".into();
        }
        let parts: Vec<&str> = ins.split(';').map(str::trim).filter(|s| !s.is_empty()).collect();
        numbered(&parts)
    } else if prompt.starts_with("Rewrite the following constraints") {
        after(prompt, "Constraints:\n")
            .lines()
            .map(|l| l.split_once(". ").map(|(_, t)| t).unwrap_or(l))
            .collect::<Vec<_>>()
            .join("; ")
    } else if prompt.starts_with("Rewrite the constraint below") {
        format!("1. do not {}", after(prompt, "Constraint:\n"))
    } else if prompt.starts_with("Replace the constraint") {
        format!("1. instead of {}", after(prompt, "Constraint:\n"))
    } else {
        format!("answer<{prompt}>")
    }
}

async fn chat(
    State(stub): State<Arc<Stub>>,
    headers: HeaderMap,
    Json(body): Json<Value>,
) -> (StatusCode, Json<Value>) {
    stub.requests.fetch_add(1, Ordering::SeqCst);
    if let Some(a) = headers.get("authorization") {
        stub.auth.lock().unwrap().push(a.to_str().unwrap_or_default().to_string());
    }
    let now = stub.inflight.fetch_add(1, Ordering::SeqCst) + 1;
    stub.max_inflight.fetch_max(now, Ordering::SeqCst);
    tokio::time::sleep(Duration::from_millis(stub.delay_ms.load(Ordering::SeqCst) as u64)).await;
    stub.inflight.fetch_sub(1, Ordering::SeqCst);
    let failing =
        stub.fail_first.fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1)).is_ok();
    if failing {
        let code = StatusCode::from_u16(stub.fail_status.load(Ordering::SeqCst) as u16)
            .unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        return (code, Json(json!({"error": "stub failure"})));
    }
    let prompt = body["messages"][0]["content"].as_str().unwrap_or_default();
    let reply = reply_for(prompt);
    (StatusCode::OK, Json(json!({"choices": [{"message": {"role": "assistant", "content": reply}}]})))
}

/// Serves on an ephemeral localhost port and returns the base URL
/// (`http://127.0.0.1:<port>/v1`). Must be called inside a Tokio runtime.
pub async fn serve(stub: Arc<Stub>) -> std::io::Result<String> {
    let app = Router::new().route("/v1/chat/completions", post(chat)).with_state(stub);
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await?;
    let addr = listener.local_addr()?;
    tokio::spawn(async move {
        let _ = axum::serve(listener, app).await;
    });
    Ok(format!("http://{addr}/v1"))
}
