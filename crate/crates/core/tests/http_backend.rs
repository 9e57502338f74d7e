use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use anchorconf::client::http::{HttpBackend, HttpConfig, RetryPolicy};
use anchorconf::client::{ClientConfig, ClientError, ModelClient};
use anchorconf::rag::{HttpRetriever, RagError, Retriever};
use serde_json::{json, Value};

/// Serves `replies` in order, one per connection, and records request bodies.
fn serve(replies: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<Value>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    thread::spawn(move || {
        for (status, body) in replies {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0;
            loop {
                let mut line = String::new();
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
            log.lock()
                .unwrap()
                .push(serde_json::from_slice(&buf).unwrap_or(Value::Null));
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
        }
    });
    (format!("http://{addr}/v1"), seen)
}

fn chat(token: &str, top: &[(&str, f64)]) -> String {
    let top: Vec<Value> = top
        .iter()
        .map(|(t, lp)| json!({"token": t, "logprob": lp}))
        .collect();
    json!({"choices": [{
        "message": {"role": "assistant", "content": token},
        "finish_reason": "length",
        "logprobs": {"content": [{"token": token, "logprob": top[0]["logprob"], "top_logprobs": top}]}
    }]})
    .to_string()
}

fn client(url: &str, retries: u32) -> ModelClient {
    let mut cfg = HttpConfig::new(url);
    cfg.retry = RetryPolicy {
        max_retries: retries,
        initial_backoff: Duration::from_millis(5),
    };
    cfg.api_key = Some("secret".into());
    let backend = HttpBackend::new(cfg).unwrap();
    ModelClient::new(
        Arc::new(backend),
        ClientConfig {
            model_name: "m".into(),
            ..ClientConfig::default()
        },
    )
}

#[test]
fn self_eval_over_http_with_retry() {
    let (url, seen) = serve(vec![
        (429, "{}".into()),
        (429, "{}".into()),
        (
            200,
            chat("Yes", &[("Yes", (0.8f64).ln()), ("No", (0.2f64).ln())]),
        ),
    ]);
    let c = client(&url, 3)
        .self_evaluate("q", "a", None)
        .unwrap()
        .unwrap();
    assert!((c.value - 0.8).abs() < 1e-12);
    let seen = seen.lock().unwrap();
    assert_eq!(seen.len(), 3);
    assert_eq!(seen[2]["logprobs"], json!(true));
    assert_eq!(seen[2]["top_logprobs"], json!(20));
    assert_eq!(seen[2]["max_tokens"], json!(1));
    assert_eq!(seen[2]["model"], json!("m"));
    assert_eq!(seen[2]["messages"].as_array().unwrap().len(), 3);
}

#[test]
fn rate_limit_exhausted() {
    let (url, _) = serve(vec![(429, "{}".into()), (429, "{}".into())]);
    let err = client(&url, 1).self_evaluate("q", "a", None).unwrap_err();
    assert!(
        matches!(err, ClientError::RateLimited { attempts: 2 }),
        "{err:?}"
    );
    assert!(err.is_endpoint_error());
}

#[test]
fn missing_logprobs_is_malformed() {
    let body =
        json!({"choices": [{"message": {"content": "Yes"}, "finish_reason": "stop"}]}).to_string();
    let (url, _) = serve(vec![(200, body)]);
    assert!(matches!(
        client(&url, 0).self_evaluate("q", "a", None),
        Err(ClientError::MalformedResponse(_))
    ));
}

#[test]
fn server_error_and_unreachable() {
    let (url, _) = serve(vec![(500, "boom".into())]);
    assert!(matches!(
        client(&url, 0).self_evaluate("q", "a", None),
        Err(ClientError::Http { status: 500, .. })
    ));
    let dead = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", dead.local_addr().unwrap());
    drop(dead);
    let err = client(&url, 0).self_evaluate("q", "a", None).unwrap_err();
    assert!(
        matches!(err, ClientError::EndpointUnreachable(_)),
        "{err:?}"
    );
}

#[test]
fn http_retriever_round_trip() {
    let (url, seen) = serve(vec![
        (
            200,
            json!({"passages": [{"text": "p1"}, {"text": "p2"}, {"text": "p3"}]}).to_string(),
        ),
        (200, json!({"nope": 1}).to_string()),
    ]);
    let r = HttpRetriever::new(&url, 2).unwrap();
    assert_eq!(r.retrieve("id", "who?").unwrap(), ["p1", "p2"]);
    assert_eq!(
        seen.lock().unwrap()[0],
        json!({"query": "who?", "top_k": 2})
    );
    assert!(matches!(
        r.retrieve("id", "who?"),
        Err(RagError::Retriever(_))
    ));
}
