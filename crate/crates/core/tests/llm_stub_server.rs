//! The HTTP client against a local counting server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use amplify_core::llmclient::{
    CompletionRequest, HttpEndpoint, LlmClient, LlmError, ResponseCache, ResponseSource, RetryPolicy,
};

struct Stub {
    url: String,
    arrivals: Arc<AtomicUsize>,
}

/// Serves `statuses` in order (200 once exhausted), each after `delay`.
fn start_stub(statuses: Vec<u16>, delay: Duration) -> Stub {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let arrivals = Arc::new(AtomicUsize::new(0));
    let script = Arc::new(Mutex::new(statuses.into_iter()));
    let counter = arrivals.clone();
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(stream) = stream else { continue };
            let counter = counter.clone();
            let script = script.clone();
            thread::spawn(move || serve(stream, &counter, &script, delay));
        }
    });
    Stub { url, arrivals }
}

fn serve(
    stream: TcpStream,
    counter: &AtomicUsize,
    script: &Mutex<std::vec::IntoIter<u16>>,
    delay: Duration,
) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut content_length = 0;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line).unwrap_or(0) == 0 {
            return;
        }
        if line == "\r\n" {
            break;
        }
        if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
            content_length = v.trim().parse().unwrap_or(0);
        }
    }
    let mut body = vec![0; content_length];
    reader.read_exact(&mut body).unwrap();
    counter.fetch_add(1, Ordering::SeqCst);
    thread::sleep(delay);
    let status = script.lock().unwrap().next().unwrap_or(200);
    let payload = if status == 200 {
        r#"{"choices":[{"text":" (B) because"}]}"#.to_string()
    } else {
        r#"{"error":"busy"}"#.to_string()
    };
    let mut out = stream;
    let _ = write!(
        out,
        "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
        payload.len()
    );
}

fn quick_retry() -> RetryPolicy {
    RetryPolicy {
        max_attempts: 3,
        base_delay: Duration::from_millis(5),
        max_delay: Duration::from_millis(20),
    }
}

#[test]
fn concurrent_identical_requests_reach_server_once() {
    let stub = start_stub(vec![], Duration::from_millis(200));
    let dir = tempfile::tempdir().unwrap();
    let client = Arc::new(
        LlmClient::new(
            Arc::new(HttpEndpoint::new(&stub.url, None, Duration::from_secs(10))),
            Some(ResponseCache::new(dir.path()).unwrap()),
        )
        .with_max_in_flight(4),
    );
    let req = CompletionRequest::new("stub", "Is it red?\nA:");
    let handles: Vec<_> = (0..100)
        .map(|_| {
            let c = client.clone();
            let r = req.clone();
            thread::spawn(move || c.complete(&r).unwrap())
        })
        .collect();
    let responses: Vec<_> = handles.into_iter().map(|h| h.join().unwrap()).collect();
    assert_eq!(stub.arrivals.load(Ordering::SeqCst), 1);
    assert!(responses.iter().all(|r| r.raw_text == " (B) because"));
    assert_eq!(responses.iter().filter(|r| r.source == ResponseSource::Live).count(), 1);
    assert_eq!(client.stats().endpoint_calls, 1);
}

#[test]
fn rate_limit_then_success_is_retried() {
    let stub = start_stub(vec![429, 503], Duration::ZERO);
    let client = LlmClient::new(
        Arc::new(HttpEndpoint::new(&stub.url, Some("k".into()), Duration::from_secs(5))),
        None,
    )
    .with_retry(quick_retry());
    let resp = client.complete(&CompletionRequest::new("stub", "p")).unwrap();
    assert_eq!(resp.raw_text, " (B) because");
    assert_eq!(stub.arrivals.load(Ordering::SeqCst), 3);
}

#[test]
fn persistent_rate_limit_surfaces() {
    let stub = start_stub(vec![429; 10], Duration::ZERO);
    let client = LlmClient::new(
        Arc::new(HttpEndpoint::new(&stub.url, None, Duration::from_secs(5))),
        None,
    )
    .with_retry(quick_retry());
    let err = client.complete(&CompletionRequest::new("stub", "p")).unwrap_err();
    assert_eq!(err, LlmError::RateLimited { attempts: 3 });
}

#[test]
fn unreachable_endpoint() {
    // bind then drop to get a port with nothing listening
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let client = LlmClient::new(
        Arc::new(HttpEndpoint::new(&format!("http://127.0.0.1:{port}"), None, Duration::from_secs(2))),
        None,
    )
    .with_retry(quick_retry());
    let err = client.complete(&CompletionRequest::new("stub", "p")).unwrap_err();
    assert!(matches!(err, LlmError::EndpointUnreachable(_)), "{err:?}");
}
