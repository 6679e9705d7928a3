//! Wire-level tests for the chat-completion policy against a hand-rolled
//! TCP stub server — no network, no external processes.

use graphrun::policy::PolicyError;
use graphrun::{HttpPolicy, HttpPolicyConfig, Policy, Rollout};
use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::mpsc;
use std::thread;
use std::time::Duration;

/// Serves `responses` (status line + JSON body) to consecutive connections
/// and forwards each raw request to the channel.
fn stub_server(responses: Vec<(u16, String)>) -> (String, mpsc::Receiver<String>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let base_url = format!("http://{}/v1", listener.local_addr().unwrap());
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        for (status, body) in responses {
            let (mut stream, _) = match listener.accept() {
                Ok(pair) => pair,
                Err(_) => return,
            };
            let request = read_request(&mut stream);
            let _ = tx.send(request);
            let reason = if status == 200 { "OK" } else { "Error" };
            let response = format!(
                "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            );
            let _ = stream.write_all(response.as_bytes());
        }
    });
    (base_url, rx)
}

fn read_request(stream: &mut TcpStream) -> String {
    stream
        .set_read_timeout(Some(Duration::from_secs(5)))
        .unwrap();
    let mut raw = Vec::new();
    let mut buffer = [0u8; 4096];
    loop {
        let n = match stream.read(&mut buffer) {
            Ok(0) | Err(_) => break,
            Ok(n) => n,
        };
        raw.extend_from_slice(&buffer[..n]);
        let text = String::from_utf8_lossy(&raw);
        if let Some(header_end) = text.find("\r\n\r\n") {
            let content_length = text
                .lines()
                .find_map(|l| {
                    l.to_ascii_lowercase()
                        .strip_prefix("content-length:")
                        .map(|v| v.trim().parse::<usize>().unwrap())
                })
                .unwrap_or(0);
            if raw.len() >= header_end + 4 + content_length {
                break;
            }
        }
    }
    String::from_utf8_lossy(&raw).into_owned()
}

fn completion_body(content: &str, usage: Option<(u64, u64)>) -> String {
    let usage = match usage {
        Some((p, c)) => {
            format!(r#","usage":{{"prompt_tokens":{p},"completion_tokens":{c}}}"#)
        }
        None => String::new(),
    };
    format!(r#"{{"choices":[{{"message":{{"role":"assistant","content":"{content}"}}}}]{usage}}}"#)
}

#[test]
fn sends_protocol_request_and_reads_usage() {
    let (base_url, rx) = stub_server(vec![(
        200,
        completion_body(
            "<think>hm</think><plan>Task 1: x\\n- Dependencies: none</plan>",
            Some((321, 45)),
        ),
    )]);
    let mut policy = HttpPolicy::new(HttpPolicyConfig::new(base_url, "test-model")).unwrap();

    let mut rollout = Rollout::new("who?");
    rollout.events.push(graphrun::TraceEvent::new(
        graphrun::trace::EventKind::Think,
        "earlier",
    ));
    let generation = policy
        .generate("who?", &rollout, &["</plan>", "</answer>"])
        .unwrap();

    assert!(generation.text.starts_with("<think>hm</think>"));
    assert_eq!(generation.n_in, Some(321));
    assert_eq!(generation.n_out, Some(45));

    let request = rx.recv_timeout(Duration::from_secs(5)).unwrap();
    assert!(request.starts_with("POST /v1/chat/completions HTTP/1.1"));
    let body_start = request.find("\r\n\r\n").unwrap() + 4;
    let body: serde_json::Value = serde_json::from_str(&request[body_start..]).unwrap();
    assert_eq!(body["model"], "test-model");
    assert_eq!(body["stop"], serde_json::json!(["</plan>", "</answer>"]));
    assert_eq!(body["temperature"], 0.0);
    let messages = body["messages"].as_array().unwrap();
    assert_eq!(messages.len(), 3, "system + question + transcript");
    assert_eq!(messages[0]["role"], "system");
    assert_eq!(messages[1]["role"], "user");
    assert_eq!(messages[1]["content"], "who?");
    assert_eq!(messages[2]["role"], "assistant");
    assert_eq!(messages[2]["content"], "<think>earlier</think>");
    assert!(!request.to_ascii_lowercase().contains("authorization:"));
}

#[test]
fn fresh_conversation_omits_the_transcript_message() {
    let (base_url, rx) = stub_server(vec![(200, completion_body("ok", None))]);
    let mut policy = HttpPolicy::new(HttpPolicyConfig::new(base_url, "m")).unwrap();
    let generation = policy.generate("q", &Rollout::new("q"), &[]).unwrap();
    assert_eq!(generation.text, "ok");
    assert_eq!(generation.n_in, None);
    assert_eq!(generation.n_out, None);

    let request = rx.recv_timeout(Duration::from_secs(5)).unwrap();
    let body_start = request.find("\r\n\r\n").unwrap() + 4;
    let body: serde_json::Value = serde_json::from_str(&request[body_start..]).unwrap();
    assert_eq!(body["messages"].as_array().unwrap().len(), 2);
    assert!(body.get("stop").is_none(), "empty stop list is omitted");
}

#[test]
fn bearer_token_comes_from_the_environment() {
    let (base_url, rx) = stub_server(vec![(200, completion_body("ok", None))]);
    // Raciness note: set_var is process-global, so use a name unique to
    // this test and never read it elsewhere.
    std::env::set_var("GRAPHRUN_TEST_TOKEN_A", "sk-stub-123");
    let mut config = HttpPolicyConfig::new(base_url, "m");
    config.api_key_env = Some("GRAPHRUN_TEST_TOKEN_A".to_string());
    let mut policy = HttpPolicy::new(config).unwrap();
    policy.generate("q", &Rollout::new("q"), &[]).unwrap();
    let request = rx.recv_timeout(Duration::from_secs(5)).unwrap();
    assert!(
        request.contains("authorization: Bearer sk-stub-123")
            || request.contains("Authorization: Bearer sk-stub-123")
    );
}

#[test]
fn missing_key_variable_fails_at_construction() {
    let mut config = HttpPolicyConfig::new("http://127.0.0.1:1/v1", "m");
    config.api_key_env = Some("GRAPHRUN_TEST_TOKEN_UNSET".to_string());
    match HttpPolicy::new(config) {
        Err(PolicyError::MissingApiKey(var)) => {
            assert_eq!(var, "GRAPHRUN_TEST_TOKEN_UNSET");
        }
        Err(other) => panic!("expected MissingApiKey, got {other:?}"),
        Ok(_) => panic!("construction succeeded without the key variable"),
    }
}

#[test]
fn server_error_is_retried_once_then_succeeds() {
    let (base_url, rx) = stub_server(vec![
        (500, r#"{"error":"overloaded"}"#.to_string()),
        (200, completion_body("second try", None)),
    ]);
    let mut policy = HttpPolicy::new(HttpPolicyConfig::new(base_url, "m"))
        .unwrap()
        .with_backoff(Duration::from_millis(10));
    let generation = policy.generate("q", &Rollout::new("q"), &[]).unwrap();
    assert_eq!(generation.text, "second try");
    assert_eq!(rx.try_iter().count(), 2, "exactly two requests on the wire");
}

#[test]
fn client_error_is_not_retried() {
    let (base_url, rx) = stub_server(vec![
        (401, r#"{"error":"bad key"}"#.to_string()),
        (200, completion_body("never reached", None)),
    ]);
    let mut policy = HttpPolicy::new(HttpPolicyConfig::new(base_url, "m"))
        .unwrap()
        .with_backoff(Duration::from_millis(10));
    match policy.generate("q", &Rollout::new("q"), &[]) {
        Err(PolicyError::BadStatus { status, .. }) => assert_eq!(status, 401),
        other => panic!("expected BadStatus, got {other:?}"),
    }
    assert_eq!(rx.try_iter().count(), 1, "no retry after a client error");
}

#[test]
fn unreachable_endpoint_reports_transport_error() {
    // Bind-then-drop guarantees a port with no listener.
    let port = {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        listener.local_addr().unwrap().port()
    };
    let mut policy = HttpPolicy::new(HttpPolicyConfig::new(
        format!("http://127.0.0.1:{port}/v1"),
        "m",
    ))
    .unwrap()
    .with_backoff(Duration::from_millis(5));
    match policy.generate("q", &Rollout::new("q"), &[]) {
        Err(PolicyError::Transport(_)) => {}
        other => panic!("expected Transport, got {other:?}"),
    }
}

#[test]
fn malformed_completion_is_a_bad_response() {
    let (base_url, _rx) = stub_server(vec![(200, r#"{"choices":[]}"#.to_string())]);
    let mut policy = HttpPolicy::new(HttpPolicyConfig::new(base_url, "m")).unwrap();
    match policy.generate("q", &Rollout::new("q"), &[]) {
        Err(PolicyError::BadResponse(_)) => {}
        other => panic!("expected BadResponse, got {other:?}"),
    }
}
