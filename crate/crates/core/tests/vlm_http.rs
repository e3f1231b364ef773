//! HTTP backend behavior against a scripted local server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::thread;
use std::time::Duration;

use refexp_core::vlm::{
    query_batch, BatchOptions, HttpVlm, RetryPolicy, VlmBackend, VlmError, VlmRequest,
};

/// Serves scripted `(status, body)` responses, one per incoming connection,
/// then stops. Requests are drained but not inspected beyond Content-Length.
fn scripted_server(responses: Vec<(u16, String)>) -> (String, thread::JoinHandle<usize>) {
    let listener = TcpListener::bind("127.0.0.1:0").expect("bind loopback");
    let addr = listener.local_addr().unwrap();
    let handle = thread::spawn(move || {
        let mut served = 0;
        for response in responses {
            let Ok((stream, _)) = listener.accept() else {
                break;
            };
            let mut reader = BufReader::new(stream);
            let mut content_length = 0usize;
            loop {
                let mut line = String::new();
                if reader.read_line(&mut line).is_err() || line == "\r\n" || line.is_empty() {
                    break;
                }
                if let Some(rest) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    content_length = rest.trim().parse().unwrap_or(0);
                }
            }
            let mut body = vec![0u8; content_length];
            let _ = reader.read_exact(&mut body);

            let (status, payload) = &response;
            let reason = match status {
                200 => "OK",
                400 => "Bad Request",
                503 => "Service Unavailable",
                _ => "Unknown",
            };
            let reply = format!(
                "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
                payload.len()
            );
            let mut stream = reader.into_inner();
            let _ = stream.write_all(reply.as_bytes());
            served += 1;
        }
        served
    });
    (format!("http://{addr}"), handle)
}

fn request() -> VlmRequest {
    VlmRequest::new(vec![1, 2, 3], "describe", 5).unwrap()
}

#[test]
fn successful_response_parses_and_sorts() {
    let body = r#"{"answers":[{"text":"a mug","score":0.4},{"text":"a red cup","score":0.9}]}"#;
    let (url, handle) = scripted_server(vec![(200, body.to_string())]);
    let client = HttpVlm::new(url, Duration::from_secs(2));
    let answers = client.query(&request()).unwrap();
    assert_eq!(answers.len(), 2);
    assert_eq!(answers[0].text, "a red cup");
    assert_eq!(answers[1].text, "a mug");
    assert_eq!(handle.join().unwrap(), 1);
}

#[test]
fn four_xx_is_non_retryable() {
    let (url, handle) = scripted_server(vec![(400, r#"{"error":"bad prompt"}"#.to_string())]);
    let client = HttpVlm::new(url, Duration::from_secs(2));
    let err = client.query(&request()).unwrap_err();
    match &err {
        VlmError::Http { status, .. } => assert_eq!(*status, 400),
        other => panic!("expected Http error, got {other:?}"),
    }
    assert!(!err.is_retryable());
    assert_eq!(handle.join().unwrap(), 1);
}

#[test]
fn five_xx_retries_until_success() {
    let good = r#"{"answers":[{"text":"ok","score":1.0}]}"#;
    let (url, handle) = scripted_server(vec![
        (503, "{}".to_string()),
        (503, "{}".to_string()),
        (200, good.to_string()),
    ]);
    let client = HttpVlm::new(url, Duration::from_secs(2));
    let opts = BatchOptions {
        max_in_flight: 1,
        retry: RetryPolicy {
            max_retries: 3,
            base_delay: Duration::from_millis(1),
            max_delay: Duration::from_millis(4),
        },
    };
    let results = query_batch(&client, &[request()], &opts);
    let answers = results[0].1.as_ref().unwrap();
    assert_eq!(answers[0].text, "ok");
    // Two failures plus the success all reached the server.
    assert_eq!(handle.join().unwrap(), 3);
}

#[test]
fn malformed_body_is_a_bad_response() {
    let (url, handle) = scripted_server(vec![(200, "not json".to_string())]);
    let client = HttpVlm::new(url, Duration::from_secs(2));
    let err = client.query(&request()).unwrap_err();
    assert!(matches!(err, VlmError::BadResponse(_)), "got {err:?}");
    assert!(!err.is_retryable());
    assert_eq!(handle.join().unwrap(), 1);
}

#[test]
fn unreachable_backend_is_a_transport_error() {
    // Nothing listens on this port (bind-then-drop frees it).
    let port = {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        listener.local_addr().unwrap().port()
    };
    let client = HttpVlm::new(format!("http://127.0.0.1:{port}"), Duration::from_millis(300));
    let err = client.query(&request()).unwrap_err();
    assert!(matches!(err, VlmError::Transport(_)), "got {err:?}");
    assert!(err.is_retryable());
}
