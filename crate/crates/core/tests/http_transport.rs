//! Chat-completions client against a scripted local server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;

use idiorank::llmgate::{
    CachedTransport, ChatRequest, HttpChatTransport, HttpConfig, LlmTransport, PromptKind,
    TransportError,
};

/// Serves `replies` in order, one per connection, and records request bodies.
fn serve(replies: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<String>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!(
        "http://127.0.0.1:{}/v1",
        listener.local_addr().unwrap().port()
    );
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = Arc::clone(&seen);
    thread::spawn(move || {
        for (status, body) in replies {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream);
            let mut length = 0;
            let mut request_line = String::new();
            reader.read_line(&mut request_line).unwrap();
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line == "\r\n" || line.is_empty() {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    length = v.trim().parse().unwrap();
                }
            }
            let mut buf = vec![0; length];
            reader.read_exact(&mut buf).unwrap();
            log.lock().unwrap().push(format!(
                "{}{}",
                request_line.trim(),
                String::from_utf8(buf).unwrap()
            ));
            let mut stream = reader.into_inner();
            write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
        }
    });
    (url, seen)
}

fn ok_body(text: &str) -> String {
    serde_json::json!({"choices": [{"message": {"role": "assistant", "content": text}}]})
        .to_string()
}

fn request() -> ChatRequest {
    ChatRequest {
        kind: PromptKind::Classify,
        compound: "elbow grease".into(),
        prompt: "Is it idiomatic?".into(),
        temperature: 1.0,
        seed: 42,
        repeat: 0,
    }
}

fn client(url: &str) -> HttpChatTransport {
    let mut config = HttpConfig::new(url, "test-model");
    config.api_key_env = "IDIORANK_TEST_UNSET_KEY".into();
    config.backoff_ms = 1;
    HttpChatTransport::new("test", config).unwrap()
}

#[test]
fn successful_completion() {
    let (url, seen) = serve(vec![(200, ok_body("Idiomatic"))]);
    assert_eq!(client(&url).complete(&request()).unwrap(), "Idiomatic");
    let seen = seen.lock().unwrap();
    assert!(seen[0].starts_with("POST /v1/chat/completions"));
    assert!(seen[0].contains("\"model\":\"test-model\""));
    assert!(seen[0].contains("\"seed\":42"));
    assert!(seen[0].contains("Is it idiomatic?"));
}

#[test]
fn server_errors_are_retried() {
    let (url, seen) = serve(vec![
        (500, "{}".into()),
        (503, "{}".into()),
        (200, ok_body("Literal")),
    ]);
    assert_eq!(client(&url).complete(&request()).unwrap(), "Literal");
    assert_eq!(seen.lock().unwrap().len(), 3);
}

#[test]
fn client_errors_are_not_retried() {
    let (url, seen) = serve(vec![
        (400, "{\"error\":\"bad\"}".into()),
        (200, ok_body("Literal")),
    ]);
    match client(&url).complete(&request()) {
        Err(TransportError::Http { status, .. }) => assert_eq!(status, 400),
        other => panic!("expected HTTP 400, got {other:?}"),
    }
    assert_eq!(seen.lock().unwrap().len(), 1);
}

#[test]
fn retries_are_bounded() {
    let (url, seen) = serve(vec![
        (500, "{}".into()),
        (500, "{}".into()),
        (500, "{}".into()),
    ]);
    assert!(client(&url).complete(&request()).is_err());
    assert_eq!(seen.lock().unwrap().len(), 3);
}

#[test]
fn remote_endpoint_requires_key() {
    let mut config = HttpConfig::new("https://api.example.com/v1", "m");
    config.api_key_env = "IDIORANK_TEST_UNSET_KEY".into();
    assert!(matches!(
        HttpChatTransport::new("x", config),
        Err(TransportError::MissingApiKey(_))
    ));
}

#[test]
fn cache_replays_without_network() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cache.jsonl");
    let (url, seen) = serve(vec![(200, ok_body("Idiomatic"))]);
    {
        let cached = CachedTransport::open(client(&url), &path).unwrap();
        assert_eq!(cached.complete(&request()).unwrap(), "Idiomatic");
        assert_eq!(cached.complete(&request()).unwrap(), "Idiomatic");
    }
    // The server is gone after one reply; the reopened cache still answers.
    let cached = CachedTransport::open(client(&url), &path).unwrap();
    assert_eq!(cached.len(), 1);
    assert_eq!(cached.complete(&request()).unwrap(), "Idiomatic");
    assert_eq!(seen.lock().unwrap().len(), 1);
}
