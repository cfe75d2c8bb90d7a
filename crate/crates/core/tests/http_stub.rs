use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use csaug::llm::batch::run_batch;
use csaug::llm::cassette::ReplayBackend;
use csaug::llm::http::HttpBackend;
use csaug::llm::{BackendPolicy, ChatBackend, ChatRequest};

#[derive(Default)]
struct Counters {
    hits: AtomicUsize,
    in_flight: AtomicUsize,
    max_in_flight: AtomicUsize,
}

type Script = dyn Fn(usize, &str) -> (u16, String) + Send + Sync;

/// Minimal HTTP/1.1 server. `script(hit, body)` picks status and body.
fn serve(delay: Duration, script: Arc<Script>) -> (String, Arc<Counters>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1", listener.local_addr().unwrap());
    let counters = Arc::new(Counters::default());
    let c = counters.clone();
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(stream) = stream else { continue };
            let (c, script) = (c.clone(), script.clone());
            thread::spawn(move || handle(stream, &c, delay, &*script));
        }
    });
    (url, counters)
}

fn handle(mut stream: TcpStream, c: &Counters, delay: Duration, script: &Script) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut content_length = 0usize;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line).unwrap_or(0) == 0 {
            return;
        }
        let lower = line.to_ascii_lowercase();
        if let Some(v) = lower.strip_prefix("content-length:") {
            content_length = v.trim().parse().unwrap();
        }
        if line == "\r\n" {
            break;
        }
    }
    let mut body = vec![0u8; content_length];
    reader.read_exact(&mut body).unwrap();
    let hit = c.hits.fetch_add(1, Ordering::SeqCst);
    let now = c.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
    c.max_in_flight.fetch_max(now, Ordering::SeqCst);
    thread::sleep(delay);
    let (status, payload) = script(hit, &String::from_utf8_lossy(&body));
    c.in_flight.fetch_sub(1, Ordering::SeqCst);
    let reason = match status {
        200 => "OK",
        401 => "Unauthorized",
        429 => "Too Many Requests",
        _ => "Error",
    };
    let response = format!(
        "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nRetry-After: 0\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
        payload.len()
    );
    let _ = stream.write_all(response.as_bytes());
}

fn completion(text: &str) -> String {
    serde_json::json!({
        "choices": [{"message": {"role": "assistant", "content": text}}],
        "usage": {"prompt_tokens": 11, "completion_tokens": 3}
    })
    .to_string()
}

/// Answers with the last user message, so replies differ per request.
fn echo_body(body: &str) -> String {
    let v: serde_json::Value = serde_json::from_str(body).unwrap();
    completion(v["messages"].as_array().unwrap().last().unwrap()["content"].as_str().unwrap())
}

fn fast_policy() -> BackendPolicy {
    BackendPolicy {
        retry_initial_ms: 1,
        retry_multiplier: 2.0,
        retry_max: 5,
        timeout_ms: 5_000,
        ..BackendPolicy::default()
    }
}

#[test]
fn three_rate_limits_then_success() {
    let (url, counters) = serve(
        Duration::ZERO,
        Arc::new(|hit, body| if hit < 3 { (429, "{}".into()) } else { (200, echo_body(body)) }),
    );
    let backend = HttpBackend::new(&url, "test-key", fast_policy()).unwrap();
    let resp = backend.complete(&ChatRequest::new("gpt-4", "hello")).unwrap();
    assert_eq!(resp.text, "hello");
    assert_eq!((resp.prompt_tokens, resp.completion_tokens), (11, 3));
    assert_eq!(counters.hits.load(Ordering::SeqCst), 4);
    assert_eq!(backend.retries(), 3);
}

#[test]
fn persistent_rate_limit_surfaces_after_retry_budget() {
    let (url, counters) = serve(Duration::ZERO, Arc::new(|_, _| (429, "{}".into())));
    let backend = HttpBackend::new(&url, "k", BackendPolicy { retry_max: 2, ..fast_policy() }).unwrap();
    let err = backend.complete(&ChatRequest::new("m", "x")).unwrap_err();
    assert_eq!(err.kind(), "RateLimited");
    assert_eq!(counters.hits.load(Ordering::SeqCst), 3);
}

#[test]
fn unauthorized_is_not_retried() {
    let (url, counters) = serve(Duration::ZERO, Arc::new(|_, _| (401, r#"{"error":"bad key"}"#.into())));
    let backend = HttpBackend::new(&url, "k", fast_policy()).unwrap();
    let err = backend.complete(&ChatRequest::new("m", "x")).unwrap_err();
    assert_eq!(err.kind(), "AuthError");
    assert_eq!(counters.hits.load(Ordering::SeqCst), 1);
}

#[test]
fn concurrency_stays_within_policy() {
    let (url, counters) = serve(Duration::from_millis(40), Arc::new(|_, body| (200, echo_body(body))));
    let policy = BackendPolicy { max_in_flight: 3, ..fast_policy() };
    let backend = HttpBackend::new(&url, "k", policy.clone()).unwrap();
    let reqs: Vec<ChatRequest> = (0..12).map(|i| ChatRequest::new("m", format!("msg {i}"))).collect();
    let out = run_batch(&reqs, &backend, &policy);
    for (i, r) in out.iter().enumerate() {
        assert_eq!(r.as_ref().unwrap().text, format!("msg {i}"));
    }
    assert_eq!(counters.hits.load(Ordering::SeqCst), 12);
    let peak = counters.max_in_flight.load(Ordering::SeqCst);
    assert!((2..=3).contains(&peak), "peak {peak}");
}

#[test]
fn warm_cache_sends_nothing() {
    let (url, counters) = serve(Duration::ZERO, Arc::new(|_, body| (200, echo_body(body))));
    let dir = tempfile::tempdir().unwrap();
    let cassette = dir.path().join("c.jsonl");
    let reqs: Vec<ChatRequest> = (0..5).map(|i| ChatRequest::new("m", format!("q{i}")).with_tag(format!("t/{i}"))).collect();
    let cold = ReplayBackend::recording(&cassette, Box::new(HttpBackend::new(&url, "k", fast_policy()).unwrap())).unwrap();
    for r in &reqs {
        assert!(!cold.complete(r).unwrap().cached);
    }
    drop(cold);
    assert_eq!(counters.hits.load(Ordering::SeqCst), 5);

    let warm = ReplayBackend::recording(&cassette, Box::new(HttpBackend::new(&url, "k", fast_policy()).unwrap())).unwrap();
    for r in &reqs {
        let resp = warm.complete(r).unwrap();
        assert!(resp.cached);
    }
    let strict = ReplayBackend::strict(&cassette).unwrap();
    assert_eq!(strict.complete(&reqs[2]).unwrap().text, "q2");
    assert_eq!(counters.hits.load(Ordering::SeqCst), 5);
}
