use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use taskplan_core::llm::{DecodingParams, LiveConfig, LlmClient, LlmError, ReplayStore};

/// Serves one canned `(status, body)` per connection and records each
/// request body.
fn serve(replies: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<String>>>, thread::JoinHandle<()>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = format!("http://{}", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    let handle = thread::spawn(move || {
        for (status, body) in replies {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0usize;
            let mut line = String::new();
            loop {
                line.clear();
                reader.read_line(&mut line).unwrap();
                if line == "\r\n" || line.is_empty() {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
            }
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).unwrap();
            log.lock().unwrap().push(String::from_utf8(buf).unwrap());
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
            stream.flush().unwrap();
        }
    });
    (addr, seen, handle)
}

fn completion(text: &str) -> String {
    serde_json::json!({
        "choices": [{"message": {"role": "assistant", "content": text}}],
        "usage": {"prompt_tokens": 11, "completion_tokens": 2}
    })
    .to_string()
}

fn fast(url: &str, retries: u32) -> LiveConfig {
    LiveConfig {
        max_retries: retries,
        initial_backoff: Duration::from_millis(5),
        timeout: Duration::from_secs(5),
        ..LiveConfig::new(url, Some("test-key".into()))
    }
}

#[test]
fn live_call_retries_transient_failures() {
    let (url, seen, handle) = serve(vec![
        (503, "busy".into()),
        (429, "slow down".into()),
        (200, completion("pong")),
    ]);
    let client = LlmClient::live(fast(&url, 5), DecodingParams::default());
    let ex = client.chat("ping").unwrap();
    handle.join().unwrap();
    assert_eq!(ex.response, "pong");
    assert_eq!(ex.usage.prompt_tokens, 11);
    assert_eq!(ex.usage.completion_tokens, 2);
    assert_eq!(client.network_calls(), 3);
    let bodies = seen.lock().unwrap();
    let req: serde_json::Value = serde_json::from_str(&bodies[0]).unwrap();
    assert_eq!(req["messages"][0]["content"], "ping");
    assert_eq!(req["model"], "gpt-3.5-turbo");
}

#[test]
fn client_errors_are_not_retried() {
    let (url, _, handle) = serve(vec![(400, "bad request".into())]);
    let client = LlmClient::live(fast(&url, 5), DecodingParams::default());
    let err = client.chat("ping").unwrap_err();
    handle.join().unwrap();
    assert!(matches!(err, LlmError::Service { status: Some(400), .. }));
    assert_eq!(client.network_calls(), 1);
}

#[test]
fn retries_are_bounded() {
    let (url, _, handle) = serve(vec![(500, "x".into()), (500, "x".into()), (500, "x".into())]);
    let client = LlmClient::live(fast(&url, 2), DecodingParams::default());
    let err = client.chat("ping").unwrap_err();
    handle.join().unwrap();
    assert!(err.is_service());
    assert_eq!(client.network_calls(), 3);
}

#[test]
fn recorded_live_exchanges_replay_identically() {
    let dir = tempfile::tempdir().unwrap();
    let rec = dir.path().join("rec.jsonl");
    let (url, _, handle) = serve(vec![(200, completion("first")), (200, completion("second"))]);
    let live = LlmClient::live(fast(&url, 0), DecodingParams::default()).with_recorder(&rec).unwrap();
    let a = live.chat("one").unwrap();
    let b = live.chat("two").unwrap();
    handle.join().unwrap();
    drop(live);

    let replay = LlmClient::replay(ReplayStore::load(&rec).unwrap(), DecodingParams::default());
    let ra = replay.chat("one").unwrap();
    let rb = replay.chat("two").unwrap();
    assert_eq!((ra.response.as_str(), rb.response.as_str()), ("first", "second"));
    assert_eq!(ra.usage, a.usage);
    assert_eq!(rb.usage, b.usage);
    assert_eq!(replay.network_calls(), 0);
    assert!(matches!(replay.chat("three"), Err(LlmError::ReplayMiss { .. })));
}
