//! HttpProvider against a scripted local server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;

use serde_json::{json, Value};

use alchemist::gateway::{
    ChatRequest, Gateway, GatewayError, HttpProvider, HttpProviderConfig, Provider, Purpose, RetryPolicy,
};

struct Seen {
    path: String,
    auth: Option<String>,
    body: Value,
}

/// Serve one scripted `(status, body)` per connection, recording each request.
fn serve(replies: Vec<(u16, Value)>) -> (String, Arc<Mutex<Vec<Seen>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let base = format!("http://{}", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = Arc::clone(&seen);
    thread::spawn(move || {
        for (status, reply) in replies {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut request_line = String::new();
            reader.read_line(&mut request_line).unwrap();
            let (mut length, mut auth) = (0, None);
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                let (name, value) = line.split_once(':').unwrap();
                match name.to_ascii_lowercase().as_str() {
                    "content-length" => length = value.trim().parse().unwrap(),
                    "authorization" => auth = Some(value.trim().to_string()),
                    _ => {}
                }
            }
            let mut body = vec![0; length];
            reader.read_exact(&mut body).unwrap();
            log.lock().unwrap().push(Seen {
                path: request_line.split_whitespace().nth(1).unwrap_or_default().to_string(),
                auth,
                body: serde_json::from_slice(&body).unwrap(),
            });
            let text = reply.to_string();
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{text}",
                text.len()
            )
            .unwrap();
        }
    });
    (base, seen)
}

fn provider(base: &str, key: Option<&str>) -> HttpProvider {
    HttpProvider::with_key(
        HttpProviderConfig {
            endpoint: format!("{base}/v1/chat/completions"),
            model: "test-model".into(),
            logprob_endpoint: Some(format!("{base}/v1/completions")),
            timeout_secs: 10,
        },
        key.map(str::to_string),
    )
}

fn chat_reply(text: &str) -> Value {
    json!({"choices": [{"message": {"role": "assistant", "content": text}}]})
}

#[test]
fn chat_request_shape_and_auth() {
    let (base, seen) = serve(vec![(200, chat_reply("def f(): pass"))]);
    let request = ChatRequest::new(Purpose::Alchemist, "Write f.").with_system("Be brief.");
    let out = provider(&base, Some("sk-test")).complete(&request).unwrap();
    assert_eq!(out, "def f(): pass");

    let seen = seen.lock().unwrap();
    assert_eq!(seen[0].path, "/v1/chat/completions");
    assert_eq!(seen[0].auth.as_deref(), Some("Bearer sk-test"));
    let body = &seen[0].body;
    assert_eq!(body["model"], "test-model");
    assert_eq!(body["messages"][0], json!({"role": "system", "content": "Be brief."}));
    assert_eq!(body["messages"][1], json!({"role": "user", "content": "Write f."}));
}

#[test]
fn echo_logprobs_split_at_the_prefix() {
    let reply = json!({"choices": [{"logprobs": {
        "tokens": ["Q", ":", " A", " B"],
        "token_logprobs": [null, -0.5, -1.0, -2.0],
        "text_offset": [0, 1, 2, 4],
    }}]});
    let (base, seen) = serve(vec![(200, reply)]);
    let lp = provider(&base, None).score_logprobs("Q:", " A B").unwrap();
    assert_eq!(lp.tokens, vec![":", " A", " B"]);
    assert_eq!(lp.continuation(), &[-1.0, -2.0]);

    let seen = seen.lock().unwrap();
    assert_eq!(seen[0].path, "/v1/completions");
    assert_eq!(seen[0].auth, None);
    assert_eq!(seen[0].body["prompt"], "Q: A B");
    assert_eq!(seen[0].body["echo"], true);
}

#[test]
fn rate_limit_is_retried_through_the_gateway() {
    let (base, seen) = serve(vec![(429, json!({})), (503, json!({})), (200, chat_reply("ok"))]);
    let gateway = Gateway::new(Arc::new(provider(&base, None)))
        .with_retry(RetryPolicy { max_retries: 3, base_delay_ms: 1, max_delay_ms: 5 });
    let out = gateway.complete(&ChatRequest::new(Purpose::Review, "review this")).unwrap();
    assert_eq!(out, "ok");
    assert_eq!(seen.lock().unwrap().len(), 3);
}

#[test]
fn client_errors_are_not_retried() {
    let (base, seen) = serve(vec![(400, json!({"error": "bad request"})), (200, chat_reply("unused"))]);
    let gateway = Gateway::new(Arc::new(provider(&base, None)))
        .with_retry(RetryPolicy { max_retries: 3, base_delay_ms: 1, max_delay_ms: 5 });
    let err = gateway.complete(&ChatRequest::new(Purpose::Judge, "judge")).unwrap_err();
    assert!(matches!(err, GatewayError::Provider { attempts: 1, .. }), "{err:?}");
    assert_eq!(seen.lock().unwrap().len(), 1);
}
