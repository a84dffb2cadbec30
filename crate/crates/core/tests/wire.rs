use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use cfd_core::gateway::{BackendError, Gateway, GatewayError, HashedBowEncoder, RetryPolicy, WireBackend};
use cfd_core::prompts::{self, vars, Template};
use cfd_core::{ChatBackend, ChatRequest, EmbeddingBackend};
use serde_json::Value;

#[derive(Debug, Clone)]
struct Seen {
    path: String,
    auth: Option<String>,
    body: Value,
}

/// Serves the scripted `(status, body)` responses in order, one per connection.
fn serve(responses: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<Seen>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    thread::spawn(move || {
        for (status, body) in responses {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut line = String::new();
            reader.read_line(&mut line).unwrap();
            let path = line.split_whitespace().nth(1).unwrap_or_default().to_string();
            let mut len = 0;
            let mut auth = None;
            loop {
                let mut h = String::new();
                reader.read_line(&mut h).unwrap();
                let h = h.trim_end();
                if h.is_empty() {
                    break;
                }
                let (k, v) = h.split_once(':').unwrap();
                match k.to_ascii_lowercase().as_str() {
                    "content-length" => len = v.trim().parse().unwrap(),
                    "authorization" => auth = Some(v.trim().to_string()),
                    _ => {}
                }
            }
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).unwrap();
            log.lock().unwrap().push(Seen {
                path,
                auth,
                body: serde_json::from_slice(&buf).unwrap_or(Value::Null),
            });
            let mut stream = stream;
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

fn request() -> ChatRequest {
    let t = Template::builtin(prompts::ICL, "v1").unwrap();
    ChatRequest::from_template(
        &t,
        &vars([("question", "q?".into()), ("knowledge", "k.".into())]),
        "r1",
        0,
        0.0,
    )
    .unwrap()
}

fn backend(url: &str) -> WireBackend {
    WireBackend::new(url, Some("sk-test".into()), "chat-m", "embed-m", Duration::from_secs(5)).unwrap()
}

const CHAT_OK: &str = r#"{"choices":[{"message":{"role":"assistant","content":"The answer is Paris."}}],"usage":{"prompt_tokens":12,"completion_tokens":4}}"#;

#[test]
fn chat_request_wire_format() {
    let (url, seen) = serve(vec![(200, CHAT_OK.into())]);
    let reply = backend(&url).complete(&request()).unwrap();
    assert_eq!(reply.text, "The answer is Paris.");
    assert_eq!(reply.usage.completion_tokens, 4);
    let seen = seen.lock().unwrap();
    assert_eq!(seen[0].path, "/chat/completions");
    assert_eq!(seen[0].auth.as_deref(), Some("Bearer sk-test"));
    assert_eq!(seen[0].body["model"], "chat-m");
    assert_eq!(seen[0].body["messages"][0]["role"], "system");
}

#[test]
fn embedding_request_wire_format() {
    let body = r#"{"data":[{"index":0,"embedding":[0.6,0.8]},{"index":1,"embedding":[1.0,0.0]}]}"#;
    let (url, seen) = serve(vec![(200, body.into())]);
    let v = backend(&url).embed(&["a".into(), "b".into()]).unwrap();
    assert_eq!(v, vec![vec![0.6, 0.8], vec![1.0, 0.0]]);
    let seen = seen.lock().unwrap();
    assert_eq!(seen[0].path, "/embeddings");
    assert_eq!(seen[0].body["input"][1], "b");
}

#[test]
fn server_errors_are_retried_client_errors_are_not() {
    let (url, seen) = serve(vec![(503, "{}".into()), (429, "{}".into()), (200, CHAT_OK.into())]);
    let retry = RetryPolicy {
        initial_backoff_ms: 1,
        ..RetryPolicy::default()
    };
    let gw = Gateway::new(Arc::new(backend(&url)), Arc::new(HashedBowEncoder::default()), retry, 2);
    assert_eq!(gw.chat(&request()).unwrap().text, "The answer is Paris.");
    assert_eq!(seen.lock().unwrap().len(), 3);
    assert_eq!(gw.trace().len(), 3);

    let (url, _) = serve(vec![(400, r#"{"error":"bad"}"#.into()); 2]);
    let err = backend(&url).complete(&request()).unwrap_err();
    assert!(matches!(err, BackendError::Permanent(ref m) if m.contains("400")));
    let gw = Gateway::new(Arc::new(backend(&url)), Arc::new(HashedBowEncoder::default()), retry, 1);
    assert!(matches!(gw.chat(&request()), Err(GatewayError::Backend { .. })));
}

#[test]
fn unreachable_server_is_transient() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    drop(listener);
    assert!(matches!(
        backend(&url).complete(&request()),
        Err(BackendError::Transient(_))
    ));
}
