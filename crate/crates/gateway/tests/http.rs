use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use approx::assert_abs_diff_eq;

use optexit_core::llm::mock::{Matcher, MockEntry, MockScript, ScriptToken};
use optexit_core::llm::{FinishReason, LlmClient, LlmError, LlmRequest, RoleTag, StreamControl, ROLE_HEADER, TRUNCATION_HEADER};
use optexit_gateway::{HttpConfig, HttpLlm, MockServer, RetryPolicy, ServeError};

fn tok(text: &str, probs: &[f64]) -> ScriptToken {
    ScriptToken { text: text.into(), id: None, probs: probs.to_vec(), chosen_prob: None }
}

fn script() -> MockScript {
    let five = ["The", " cat", " sat", " down", "."].iter().map(|t| tok(t, &[0.9, 0.1])).collect();
    MockScript::new(vec![
        MockEntry::text(RoleTag::Extract, Matcher::prompt("P"), "42"),
        MockEntry::tokens(RoleTag::Generate, Matcher::prompt("five"), five),
        MockEntry::text(RoleTag::SolveAfterTruncation, Matcher::prompt("Q").from_index(7), "The answer is \\boxed{9}."),
    ])
    .unwrap()
}

fn fast_retry() -> RetryPolicy {
    RetryPolicy { max_retries: 3, base: Duration::from_millis(5), factor: 2.0 }
}

fn client(server: &MockServer) -> HttpLlm {
    HttpLlm::new(HttpConfig { api_key: None, retry: fast_retry(), ..HttpConfig::new(server.url()) }).unwrap()
}

#[test]
fn scripted_echo_over_http() {
    let server = MockServer::start(script(), 0).unwrap();
    let llm = client(&server);
    let c = llm.complete(&LlmRequest::new(RoleTag::Extract, "P")).unwrap();
    assert_eq!(c.text, "42");
    assert_eq!(c.finish_reason, FinishReason::Stop);
    assert!(c.tokens.is_empty());
    match llm.complete(&LlmRequest::new(RoleTag::Extract, "nope")) {
        Err(LlmError::Transport { status: Some(404), .. }) => {}
        other => panic!("{other:?}"),
    }
}

#[test]
fn logprobs_are_natural_logs() {
    let server = MockServer::start(script(), 0).unwrap();
    let c = client(&server)
        .complete(&LlmRequest::new(RoleTag::Generate, "five").with_logprobs(2))
        .unwrap();
    assert_eq!(c.tokens.len(), 5);
    for t in &c.tokens {
        assert_eq!(t.top_k.len(), 2);
        assert_abs_diff_eq!(t.top_k[0].logprob, -0.10536051565782628, epsilon = 1e-9);
        assert_abs_diff_eq!(t.top_k[1].logprob, -2.3025850929940455, epsilon = 1e-9);
        assert_eq!(t.top_k[0].token_id, t.token_id);
    }
}

#[test]
fn stream_equals_complete() {
    let server = MockServer::start(script(), 0).unwrap();
    let llm = client(&server);
    for k in [1, 2] {
        let req = LlmRequest::new(RoleTag::Generate, "five").with_logprobs(k);
        let full = llm.complete(&req).unwrap();
        let mut calls = 0;
        let streamed = llm
            .stream(&req, &mut |_| {
                calls += 1;
                StreamControl::Continue
            })
            .unwrap();
        assert_eq!(calls, 5);
        assert_eq!(streamed, full);
    }
    let plain = LlmRequest::new(RoleTag::Extract, "P");
    let s = llm.stream(&plain, &mut |_| StreamControl::Continue).unwrap();
    assert_eq!(s.text, llm.complete(&plain).unwrap().text);
}

#[test]
fn abort_over_http() {
    let server = MockServer::start(script(), 0).unwrap();
    let llm = client(&server);
    let req = LlmRequest::new(RoleTag::Generate, "five").with_logprobs(2);
    for stop_after in [1usize, 3] {
        let mut calls = 0;
        let c = llm
            .stream(&req, &mut |_| {
                calls += 1;
                if calls == stop_after {
                    StreamControl::Abort
                } else {
                    StreamControl::Continue
                }
            })
            .unwrap();
        assert_eq!(calls, stop_after);
        assert_eq!(c.tokens.len(), stop_after);
        assert_eq!(c.finish_reason, FinishReason::Aborted);
    }
}

#[test]
fn max_tokens_cuts_with_length() {
    let server = MockServer::start(script(), 0).unwrap();
    let mut req = LlmRequest::new(RoleTag::Generate, "five").with_logprobs(1);
    req.max_tokens = 2;
    let c = client(&server).complete(&req).unwrap();
    assert_eq!(c.text, "The cat");
    assert_eq!(c.finish_reason, FinishReason::Length);
}

#[test]
fn truncation_rule_over_http() {
    let server = MockServer::start(script(), 0).unwrap();
    let llm = client(&server);
    let at = |j: usize| {
        llm.complete(&LlmRequest::new(RoleTag::SolveAfterTruncation, "Q").with_prefix("<think>x</think>\n").with_truncation(j))
            .unwrap()
            .text
    };
    assert!(!at(6).contains("\\boxed{9}"));
    assert!(at(7).contains("\\boxed{9}"));
    assert!(at(70).contains("\\boxed{9}"));
}

#[test]
fn identical_requests_get_identical_bytes() {
    let server = MockServer::start(script(), 0).unwrap();
    let http = reqwest::blocking::Client::new();
    let url = format!("{}/v1/chat/completions", server.url());
    for stream in [false, true] {
        let body = serde_json::json!({
            "model": "m",
            "messages": [{"role": "user", "content": "five"}],
            "max_tokens": 10,
            "temperature": 0.0,
            "logprobs": true,
            "top_logprobs": 2,
            "stream": stream,
        })
        .to_string();
        let send = || {
            http.post(&url)
                .header(ROLE_HEADER, "generate")
                .body(body.clone())
                .send()
                .unwrap()
                .bytes()
                .unwrap()
        };
        let (a, b) = (send(), send());
        assert!(!a.is_empty());
        assert_eq!(a, b);
    }
}

#[test]
fn unreachable_endpoint_is_a_transport_error() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let llm = HttpLlm::new(HttpConfig {
        api_key: None,
        retry: fast_retry(),
        ..HttpConfig::new(format!("http://127.0.0.1:{port}"))
    })
    .unwrap();
    match llm.complete(&LlmRequest::new(RoleTag::Extract, "P")) {
        Err(LlmError::Transport { status: None, .. }) => {}
        other => panic!("{other:?}"),
    }
}

#[test]
fn port_in_use() {
    let held = TcpListener::bind("127.0.0.1:0").unwrap();
    let port = held.local_addr().unwrap().port();
    assert!(matches!(MockServer::start(script(), port), Err(ServeError::PortInUse(p)) if p == port));
}

#[test]
fn ambiguous_script_file_is_rejected() {
    let dir = std::env::temp_dir().join(format!("optexit-gw-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("amb.jsonl");
    let s = MockScript::new(vec![MockEntry::text(RoleTag::Verify, Matcher::any(), "True")]).unwrap();
    std::fs::write(&path, s.to_jsonl().repeat(2)).unwrap();
    assert!(matches!(
        MockServer::start_file(&path, 0),
        Err(ServeError::Script(optexit_core::llm::mock::ScriptError::ScriptAmbiguity { first: 1, second: 2 }))
    ));
    std::fs::remove_dir_all(dir).unwrap();
}

/// Server failing the first `fail` requests with `status`, then answering.
type Seen = Arc<Mutex<Vec<(String, String)>>>;

fn flaky(status: u16, fail: usize) -> (String, Arc<AtomicUsize>, Seen) {
    let server = tiny_http::Server::http("127.0.0.1:0").unwrap();
    let url = format!("http://{}", server.server_addr().to_ip().unwrap());
    let hits = Arc::new(AtomicUsize::new(0));
    let seen = Arc::new(Mutex::new(Vec::new()));
    let (h, s) = (hits.clone(), seen.clone());
    thread::spawn(move || {
        for req in server.incoming_requests() {
            let n = h.fetch_add(1, Ordering::SeqCst);
            *s.lock().unwrap() = req
                .headers()
                .iter()
                .map(|x| (x.field.as_str().as_str().to_ascii_lowercase(), x.value.as_str().to_string()))
                .collect();
            let resp = if n < fail {
                tiny_http::Response::from_string("busy").with_status_code(status)
            } else {
                tiny_http::Response::from_string(r#"{"choices":[{"message":{"content":"ok"},"finish_reason":"stop"}]}"#)
            };
            let _ = req.respond(resp);
        }
    });
    (url, hits, seen)
}

#[test]
fn transient_statuses_are_retried() {
    for status in [503u16, 429] {
        let (url, hits, seen) = flaky(status, 2);
        let llm = HttpLlm::new(HttpConfig {
            api_key: Some("sekret".into()),
            retry: fast_retry(),
            ..HttpConfig::new(url)
        })
        .unwrap();
        let req = LlmRequest::new(RoleTag::Verify, "p").with_truncation(4);
        assert_eq!(llm.complete(&req).unwrap().text, "ok");
        assert_eq!(hits.load(Ordering::SeqCst), 3);
        let headers = seen.lock().unwrap().clone();
        let get = |k: &str| headers.iter().find(|(n, _)| n == k).map(|(_, v)| v.clone());
        assert_eq!(get("authorization").as_deref(), Some("Bearer sekret"));
        assert_eq!(get(ROLE_HEADER).as_deref(), Some("verify"));
        assert_eq!(get(TRUNCATION_HEADER).as_deref(), Some("4"));
    }
}

#[test]
fn retries_are_bounded_and_client_errors_are_not_retried() {
    let (url, hits, _) = flaky(500, usize::MAX);
    let llm = HttpLlm::new(HttpConfig { retry: fast_retry(), ..HttpConfig::new(url) }).unwrap();
    assert!(matches!(
        llm.complete(&LlmRequest::new(RoleTag::Verify, "p")),
        Err(LlmError::Transport { status: Some(500), .. })
    ));
    assert_eq!(hits.load(Ordering::SeqCst), 4);

    let (url, hits, _) = flaky(400, usize::MAX);
    let llm = HttpLlm::new(HttpConfig { retry: fast_retry(), ..HttpConfig::new(url) }).unwrap();
    assert!(llm.complete(&LlmRequest::new(RoleTag::Verify, "p")).is_err());
    assert_eq!(hits.load(Ordering::SeqCst), 1);
}
