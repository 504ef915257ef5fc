//! Completion endpoint access: request hashing, an on-disk response cache,
//! retries, in-flight deduplication, mock policies and answer parsing.

mod cache;
mod http;
mod mock;
mod parse;

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex, OnceLock};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use cache::{CacheEntry, ResponseCache};
pub use http::{HttpEndpoint, ENV_API_KEY, ENV_ENDPOINT_URL, ENV_MODEL_NAME};
pub use mock::{
    fixtures_from_cache, load_fixtures, save_fixtures, Gate, MockEndpoint, MockPolicy,
    WrongLabelRule, RATIONALE_MARKER,
};
pub use parse::{parse_answer, ParsedAnswer};

pub const DEFAULT_MAX_TOKENS: u32 = 256;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum LlmError {
    #[error("endpoint unreachable: {0}")]
    EndpointUnreachable(String),
    #[error("rate limited after {attempts} attempts")]
    RateLimited { attempts: u32 },
    #[error("server error {status} after {attempts} attempts")]
    ServerError { status: u16, attempts: u32 },
    #[error("request rejected with status {0}")]
    Rejected(u16),
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("mock has no response for {0}")]
    MockMiss(String),
    #[error("cache i/o failed: {0}")]
    Cache(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

impl LlmError {
    fn is_transient(&self) -> bool {
        matches!(
            self,
            LlmError::EndpointUnreachable(_) | LlmError::RateLimited { .. } | LlmError::ServerError { .. }
        )
    }

    fn with_attempts(self, attempts: u32) -> Self {
        match self {
            LlmError::RateLimited { .. } => LlmError::RateLimited { attempts },
            LlmError::ServerError { status, .. } => LlmError::ServerError { status, attempts },
            other => other,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub model_name: String,
    pub prompt: String,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default)]
    pub stop: Vec<String>,
    /// Which example the prompt is for. Routing metadata for mocks; not
    /// part of the cache key.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub example_id: Option<String>,
}

fn default_max_tokens() -> u32 {
    DEFAULT_MAX_TOKENS
}

impl CompletionRequest {
    pub fn new(model_name: impl Into<String>, prompt: impl Into<String>) -> Self {
        CompletionRequest {
            model_name: model_name.into(),
            prompt: prompt.into(),
            temperature: 0.0,
            max_tokens: DEFAULT_MAX_TOKENS,
            stop: Vec::new(),
            example_id: None,
        }
    }

    pub fn for_example(mut self, id: impl Into<String>) -> Self {
        self.example_id = Some(id.into());
        self
    }

    fn validate(&self) -> Result<(), LlmError> {
        if !(self.temperature >= 0.0) || !self.temperature.is_finite() {
            return Err(LlmError::InvalidRequest("temperature must be >= 0".into()));
        }
        if self.max_tokens == 0 {
            return Err(LlmError::InvalidRequest("max_tokens must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct CanonicalRequest<'a> {
    max_tokens: u32,
    model_name: &'a str,
    prompt: &'a str,
    stop: &'a [String],
    temperature: f64,
}

/// Canonical JSON of the hashed fields, keys in lexicographic order.
pub fn canonical_serialization(request: &CompletionRequest) -> String {
    serde_json::to_string(&CanonicalRequest {
        max_tokens: request.max_tokens,
        model_name: &request.model_name,
        prompt: &request.prompt,
        stop: &request.stop,
        temperature: request.temperature,
    })
    .expect("request serializes")
}

/// Hex SHA-256 of the canonical serialization.
pub fn cache_key(request: &CompletionRequest) -> String {
    hex::encode(Sha256::digest(canonical_serialization(request).as_bytes()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResponseSource {
    Live,
    Cache,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResponse {
    pub raw_text: String,
    pub latency: Duration,
    pub source: ResponseSource,
}

/// Something that turns a request into text: a live server or a mock.
pub trait Endpoint: Send + Sync {
    fn call(&self, request: &CompletionRequest) -> Result<String, LlmError>;

    /// `Live` or `Mock`, reported on uncached responses.
    fn source(&self) -> ResponseSource;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 4,
            base_delay: Duration::from_millis(250),
            max_delay: Duration::from_secs(8),
        }
    }
}

impl RetryPolicy {
    pub fn delay(&self, attempt: u32) -> Duration {
        let factor = 2u32.saturating_pow(attempt.saturating_sub(1));
        self.base_delay.saturating_mul(factor).min(self.max_delay)
    }
}

struct Semaphore {
    permits: Mutex<usize>,
    freed: Condvar,
}

impl Semaphore {
    fn new(n: usize) -> Self {
        Semaphore {
            permits: Mutex::new(n.max(1)),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> SemaphoreGuard<'_> {
        let mut p = self.permits.lock().unwrap();
        while *p == 0 {
            p = self.freed.wait(p).unwrap();
        }
        *p -= 1;
        SemaphoreGuard(self)
    }
}

struct SemaphoreGuard<'a>(&'a Semaphore);

impl Drop for SemaphoreGuard<'_> {
    fn drop(&mut self) {
        *self.0.permits.lock().unwrap() += 1;
        self.0.freed.notify_one();
    }
}

type Shared = Arc<OnceLock<Result<(String, ResponseSource), LlmError>>>;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientStats {
    pub endpoint_calls: usize,
    pub cache_hits: usize,
}

/// Cache-first completion client, safe to share across threads.
pub struct LlmClient {
    endpoint: Arc<dyn Endpoint>,
    cache: Option<ResponseCache>,
    retry: RetryPolicy,
    limiter: Semaphore,
    inflight: Mutex<HashMap<String, Shared>>,
    endpoint_calls: AtomicUsize,
    cache_hits: AtomicUsize,
}

impl LlmClient {
    pub fn new(endpoint: Arc<dyn Endpoint>, cache: Option<ResponseCache>) -> Self {
        LlmClient {
            endpoint,
            cache,
            retry: RetryPolicy::default(),
            limiter: Semaphore::new(8),
            inflight: Mutex::new(HashMap::new()),
            endpoint_calls: AtomicUsize::new(0),
            cache_hits: AtomicUsize::new(0),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_max_in_flight(mut self, n: usize) -> Self {
        self.limiter = Semaphore::new(n);
        self
    }

    pub fn stats(&self) -> ClientStats {
        ClientStats {
            endpoint_calls: self.endpoint_calls.load(Ordering::SeqCst),
            cache_hits: self.cache_hits.load(Ordering::SeqCst),
        }
    }

    pub fn cache(&self) -> Option<&ResponseCache> {
        self.cache.as_ref()
    }

    fn cached(&self, key: &str) -> Result<Option<String>, LlmError> {
        match &self.cache {
            Some(c) => Ok(c.get(key)?.map(|e| e.raw_text)),
            None => Ok(None),
        }
    }

    fn call_with_retries(&self, request: &CompletionRequest) -> Result<String, LlmError> {
        let _permit = self.limiter.acquire();
        let mut attempt = 0;
        loop {
            attempt += 1;
            self.endpoint_calls.fetch_add(1, Ordering::SeqCst);
            match self.endpoint.call(request) {
                Ok(text) => return Ok(text),
                Err(e) if e.is_transient() && attempt < self.retry.max_attempts => {
                    let wait = self.retry.delay(attempt);
                    log::warn!("attempt {attempt} failed ({e}); retrying in {wait:?}");
                    std::thread::sleep(wait);
                }
                Err(e) => return Err(e.with_attempts(attempt)),
            }
        }
    }

    /// Cache first; otherwise one endpoint call per distinct in-flight key,
    /// stored before returning.
    pub fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, LlmError> {
        request.validate()?;
        let started = Instant::now();
        let key = cache_key(request);
        if let Some(text) = self.cached(&key)? {
            self.cache_hits.fetch_add(1, Ordering::SeqCst);
            return Ok(CompletionResponse {
                raw_text: text,
                latency: started.elapsed(),
                source: ResponseSource::Cache,
            });
        }

        let cell: Shared = self
            .inflight
            .lock()
            .unwrap()
            .entry(key.clone())
            .or_default()
            .clone();
        let mut leader = false;
        let outcome = cell
            .get_or_init(|| {
                leader = true;
                // a previous leader may have stored it between our checks
                if let Some(text) = self.cached(&key)? {
                    return Ok((text, ResponseSource::Cache));
                }
                let text = self.call_with_retries(request)?;
                if let Some(c) = &self.cache {
                    c.put(&key, request, &text)?;
                }
                Ok((text, self.endpoint.source()))
            })
            .clone();
        if leader {
            self.inflight.lock().unwrap().remove(&key);
        }
        let (raw_text, mut source) = outcome?;
        if !leader {
            source = ResponseSource::Cache;
        }
        if source == ResponseSource::Cache {
            self.cache_hits.fetch_add(1, Ordering::SeqCst);
        }
        Ok(CompletionResponse {
            raw_text,
            latency: started.elapsed(),
            source,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    struct Flaky {
        failures: Mutex<Vec<LlmError>>,
    }

    impl Endpoint for Flaky {
        fn call(&self, _: &CompletionRequest) -> Result<String, LlmError> {
            match self.failures.lock().unwrap().pop() {
                Some(e) => Err(e),
                None => Ok("(A)".into()),
            }
        }
        fn source(&self) -> ResponseSource {
            ResponseSource::Live
        }
    }

    fn fast_retry() -> RetryPolicy {
        RetryPolicy {
            max_attempts: 3,
            base_delay: Duration::from_millis(1),
            max_delay: Duration::from_millis(2),
        }
    }

    #[test]
    fn identical_requests_share_a_key() {
        let a = CompletionRequest::new("m", "prompt");
        let b = CompletionRequest::new("m", "prompt").for_example("x");
        assert_eq!(cache_key(&a), cache_key(&b));
        let c = CompletionRequest::new("m", "prompv");
        assert_ne!(cache_key(&a), cache_key(&c));
        assert_eq!(cache_key(&a).len(), 64);
    }

    #[test]
    fn field_order_does_not_change_key() {
        let one: CompletionRequest = serde_json::from_str(
            r#"{"model_name":"m","prompt":"p\nq","temperature":0.0,"max_tokens":16,"stop":["\n\n"]}"#,
        )
        .unwrap();
        let two: CompletionRequest = serde_json::from_str(
            r#"{"stop":["\n\n"],"max_tokens":16,"temperature":0.0,"prompt":"p\nq","model_name":"m"}"#,
        )
        .unwrap();
        assert_eq!(canonical_serialization(&one), canonical_serialization(&two));
        assert_eq!(cache_key(&one), cache_key(&two));
        // the canonical form itself has sorted keys
        let v: BTreeMap<String, serde_json::Value> =
            serde_json::from_str(&canonical_serialization(&one)).unwrap();
        let sorted: Vec<&String> = v.keys().collect();
        assert_eq!(serde_json::to_string(&v).unwrap(), canonical_serialization(&one));
        assert_eq!(sorted, ["max_tokens", "model_name", "prompt", "stop", "temperature"]);
    }

    #[test]
    fn second_request_hits_cache() {
        let dir = tempfile::tempdir().unwrap();
        let mut fixtures = BTreeMap::new();
        let req = CompletionRequest::new("m", "hello\nA:");
        fixtures.insert(cache_key(&req), "A: (B)".to_string());
        let client = LlmClient::new(
            Arc::new(MockEndpoint::new(MockPolicy::Replay { fixtures })),
            Some(ResponseCache::new(dir.path()).unwrap()),
        );
        let first = client.complete(&req).unwrap();
        assert_eq!(first.source, ResponseSource::Mock);
        assert_eq!(first.raw_text, "A: (B)");
        let second = client.complete(&req).unwrap();
        assert_eq!(second.source, ResponseSource::Cache);
        assert_eq!(second.raw_text.as_bytes(), first.raw_text.as_bytes());
        assert_eq!(client.stats(), ClientStats { endpoint_calls: 1, cache_hits: 1 });
    }

    #[test]
    fn transient_failures_are_retried() {
        let endpoint = Flaky {
            failures: Mutex::new(vec![
                LlmError::ServerError { status: 503, attempts: 0 },
                LlmError::RateLimited { attempts: 0 },
            ]),
        };
        let client = LlmClient::new(Arc::new(endpoint), None).with_retry(fast_retry());
        let resp = client.complete(&CompletionRequest::new("m", "p")).unwrap();
        assert_eq!(resp.raw_text, "(A)");
        assert_eq!(client.stats().endpoint_calls, 3);
    }

    #[test]
    fn retries_are_bounded() {
        let endpoint = Flaky {
            failures: Mutex::new(vec![LlmError::RateLimited { attempts: 0 }; 5]),
        };
        let client = LlmClient::new(Arc::new(endpoint), None).with_retry(fast_retry());
        assert_eq!(
            client.complete(&CompletionRequest::new("m", "p")),
            Err(LlmError::RateLimited { attempts: 3 })
        );
    }

    #[test]
    fn permanent_failures_are_not_retried() {
        let endpoint = Flaky {
            failures: Mutex::new(vec![LlmError::MalformedResponse("x".into())]),
        };
        let client = LlmClient::new(Arc::new(endpoint), None).with_retry(fast_retry());
        assert!(client.complete(&CompletionRequest::new("m", "p")).is_err());
        assert_eq!(client.stats().endpoint_calls, 1);
    }

    #[test]
    fn invalid_requests_rejected() {
        let client = LlmClient::new(Arc::new(Flaky { failures: Mutex::new(vec![]) }), None);
        let mut req = CompletionRequest::new("m", "p");
        req.max_tokens = 0;
        assert!(matches!(client.complete(&req), Err(LlmError::InvalidRequest(_))));
        req.max_tokens = 1;
        req.temperature = -0.5;
        assert!(matches!(client.complete(&req), Err(LlmError::InvalidRequest(_))));
    }

    #[test]
    fn backoff_grows_exponentially_and_caps() {
        let p = RetryPolicy {
            max_attempts: 10,
            base_delay: Duration::from_millis(100),
            max_delay: Duration::from_millis(500),
        };
        assert_eq!(p.delay(1), Duration::from_millis(100));
        assert_eq!(p.delay(2), Duration::from_millis(200));
        assert_eq!(p.delay(3), Duration::from_millis(400));
        assert_eq!(p.delay(4), Duration::from_millis(500));
    }
}
