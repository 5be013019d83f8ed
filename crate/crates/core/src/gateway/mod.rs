//! Chat-completion and token-logprob access behind one blocking, thread-safe gateway.
//!
//! The [`Gateway`] adds caching, single-flight deduplication, an in-flight
//! concurrency cap, a request/token budget, and bounded exponential-backoff
//! retries on transient failures to any [`Provider`].

mod cache;
mod http;
mod mock;
mod offline;
mod types;

use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::ingest::{Tokenizer, WhitespaceHeuristic};

pub use cache::ResponseCache;
pub use http::{HttpProvider, HttpProviderConfig, API_KEY_ENV};
pub use mock::{LogprobModel, MockProvider};
pub use offline::offline_responder;
pub use types::{ChatRequest, Purpose, Role, TokenLogprobs, Turn};

fn tokens_for_budget(text: &str) -> u64 {
    WhitespaceHeuristic.count(text)
}

/// A failure reported by a provider for a single call.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProviderFailure {
    pub kind: FailureKind,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailureKind {
    /// Rate limiting, server errors, timeouts: worth retrying.
    Transient { status: Option<u16> },
    Fatal,
    NoLogprobSupport,
}

impl ProviderFailure {
    pub fn transient(status: Option<u16>, message: impl Into<String>) -> Self {
        ProviderFailure { kind: FailureKind::Transient { status }, message: message.into() }
    }

    pub fn fatal(message: impl Into<String>) -> Self {
        ProviderFailure { kind: FailureKind::Fatal, message: message.into() }
    }

    pub fn no_logprobs() -> Self {
        ProviderFailure { kind: FailureKind::NoLogprobSupport, message: "provider exposes no token logprobs".into() }
    }
}

/// The two capabilities every backend offers.
pub trait Provider: Send + Sync {
    fn id(&self) -> String;
    fn complete(&self, request: &ChatRequest) -> Result<String, ProviderFailure>;
    /// Logprobs of every token of `prefix ⊕ continuation`.
    fn score_logprobs(&self, prefix: &str, continuation: &str) -> Result<TokenLogprobs, ProviderFailure>;
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GatewayError {
    #[error("provider error after {attempts} attempt(s): {message}")]
    Provider { attempts: u32, message: String },
    #[error("budget exceeded: {0}")]
    BudgetExceeded(String),
    #[error("provider does not support token logprobs")]
    NoLogprobSupport,
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("cache write failed: {0}")]
    Cache(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { max_retries: 4, base_delay_ms: 500, max_delay_ms: 30_000 }
    }
}

impl RetryPolicy {
    /// Delay before retry number `retry` (0-based): base · 2^retry, capped.
    pub fn delay(&self, retry: u32) -> Duration {
        let ms = self.base_delay_ms.saturating_mul(1u64 << retry.min(30));
        Duration::from_millis(ms.min(self.max_delay_ms))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Limits {
    /// Maximum concurrent provider calls (0 = unlimited).
    pub max_in_flight: usize,
    /// Maximum provider calls started per second (0 = unlimited).
    pub requests_per_second: f64,
    /// Total provider requests allowed (None = unlimited).
    pub max_requests: Option<u64>,
    /// Total estimated tokens (prompt + output) allowed (None = unlimited).
    pub max_tokens: Option<u64>,
}

struct LimiterState {
    in_flight: usize,
    next_start: Option<Instant>,
}

struct Limiter {
    max_in_flight: usize,
    min_interval: Option<Duration>,
    state: Mutex<LimiterState>,
    freed: Condvar,
    peak: AtomicUsize,
}

impl Limiter {
    fn new(limits: &Limits) -> Self {
        Limiter {
            max_in_flight: limits.max_in_flight,
            min_interval: (limits.requests_per_second > 0.0)
                .then(|| Duration::from_secs_f64(1.0 / limits.requests_per_second)),
            state: Mutex::new(LimiterState { in_flight: 0, next_start: None }),
            freed: Condvar::new(),
            peak: AtomicUsize::new(0),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut state = self.state.lock().expect("limiter lock");
        while self.max_in_flight > 0 && state.in_flight >= self.max_in_flight {
            state = self.freed.wait(state).expect("limiter lock");
        }
        state.in_flight += 1;
        self.peak.fetch_max(state.in_flight, Ordering::SeqCst);
        let wait = match self.min_interval {
            Some(interval) => {
                let now = Instant::now();
                let start = state.next_start.map_or(now, |t| t.max(now));
                state.next_start = Some(start + interval);
                start.saturating_duration_since(now)
            }
            None => Duration::ZERO,
        };
        drop(state);
        if !wait.is_zero() {
            std::thread::sleep(wait);
        }
        Permit { limiter: self }
    }
}

struct Permit<'a> {
    limiter: &'a Limiter,
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut state = self.limiter.state.lock().expect("limiter lock");
        state.in_flight -= 1;
        self.limiter.freed.notify_one();
    }
}

#[derive(Default)]
struct BudgetState {
    requests: u64,
    tokens: u64,
}

/// Counters observable by callers and tests.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GatewayStats {
    pub provider_calls: usize,
    pub cache_hits: usize,
    pub retries: usize,
    pub peak_in_flight: usize,
}

type Sleeper = dyn Fn(Duration) + Send + Sync;

pub struct Gateway {
    provider: Arc<dyn Provider>,
    cache: ResponseCache,
    limiter: Limiter,
    limits: Limits,
    budget: Mutex<BudgetState>,
    retry: RetryPolicy,
    sleeper: Arc<Sleeper>,
    single_flight: Mutex<HashMap<String, Arc<Mutex<()>>>>,
    provider_calls: AtomicUsize,
    cache_hits: AtomicUsize,
    retries: AtomicUsize,
}

impl Gateway {
    pub fn new(provider: Arc<dyn Provider>) -> Self {
        Gateway {
            provider,
            cache: ResponseCache::in_memory(),
            limiter: Limiter::new(&Limits::default()),
            limits: Limits::default(),
            budget: Mutex::new(BudgetState::default()),
            retry: RetryPolicy::default(),
            sleeper: Arc::new(std::thread::sleep),
            single_flight: Mutex::new(HashMap::new()),
            provider_calls: AtomicUsize::new(0),
            cache_hits: AtomicUsize::new(0),
            retries: AtomicUsize::new(0),
        }
    }

    pub fn with_limits(mut self, limits: Limits) -> Self {
        self.limiter = Limiter::new(&limits);
        self.limits = limits;
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_cache(mut self, cache: ResponseCache) -> Self {
        self.cache = cache;
        self
    }

    pub fn with_cache_file(self, path: &Path) -> std::io::Result<Self> {
        Ok(self.with_cache(ResponseCache::open(path)?))
    }

    /// Replace `thread::sleep` for backoff waits (tests record instead of sleeping).
    pub fn with_sleeper(mut self, sleeper: impl Fn(Duration) + Send + Sync + 'static) -> Self {
        self.sleeper = Arc::new(sleeper);
        self
    }

    pub fn provider_id(&self) -> String {
        self.provider.id()
    }

    pub fn stats(&self) -> GatewayStats {
        GatewayStats {
            provider_calls: self.provider_calls.load(Ordering::SeqCst),
            cache_hits: self.cache_hits.load(Ordering::SeqCst),
            retries: self.retries.load(Ordering::SeqCst),
            peak_in_flight: self.limiter.peak.load(Ordering::SeqCst),
        }
    }

    fn cache_key(&self, namespace: &str, content_hash: &str) -> String {
        let mut h = Sha256::new();
        h.update(self.provider.id().as_bytes());
        h.update([0u8]);
        h.update(namespace.as_bytes());
        h.update([0u8]);
        h.update(content_hash.as_bytes());
        hex::encode(h.finalize())
    }

    fn reserve(&self, estimated_tokens: u64) -> Result<(), GatewayError> {
        let mut budget = self.budget.lock().expect("budget lock");
        if let Some(max) = self.limits.max_requests {
            if budget.requests + 1 > max {
                return Err(GatewayError::BudgetExceeded(format!("request budget of {max} used up")));
            }
        }
        if let Some(max) = self.limits.max_tokens {
            if budget.tokens + estimated_tokens > max {
                return Err(GatewayError::BudgetExceeded(format!(
                    "token budget of {max} would be exceeded ({} used, {estimated_tokens} requested)",
                    budget.tokens
                )));
            }
        }
        budget.requests += 1;
        budget.tokens += estimated_tokens;
        Ok(())
    }

    fn charge_output(&self, tokens: u64) {
        self.budget.lock().expect("budget lock").tokens += tokens;
    }

    /// Run `call` with retries, or return the cached value for `key`.
    fn cached_call<F>(&self, key: &str, estimated_tokens: u64, call: F) -> Result<String, GatewayError>
    where
        F: Fn() -> Result<String, ProviderFailure>,
    {
        if let Some(hit) = self.cache.get(key) {
            self.cache_hits.fetch_add(1, Ordering::SeqCst);
            return Ok(hit);
        }
        let slot = self
            .single_flight
            .lock()
            .expect("single-flight lock")
            .entry(key.to_string())
            .or_default()
            .clone();
        let _guard = slot.lock().expect("single-flight slot");
        if let Some(hit) = self.cache.get(key) {
            self.cache_hits.fetch_add(1, Ordering::SeqCst);
            return Ok(hit);
        }

        self.reserve(estimated_tokens)?;
        let mut attempt = 0u32;
        loop {
            let result = {
                let _permit = self.limiter.acquire();
                self.provider_calls.fetch_add(1, Ordering::SeqCst);
                call()
            };
            match result {
                Ok(value) => {
                    self.cache.put(key, &value).map_err(|e| GatewayError::Cache(e.to_string()))?;
                    return Ok(value);
                }
                Err(f) => match f.kind {
                    FailureKind::NoLogprobSupport => return Err(GatewayError::NoLogprobSupport),
                    FailureKind::Transient { .. } if attempt < self.retry.max_retries => {
                        log::debug!("transient provider failure ({}), retry {}", f.message, attempt + 1);
                        (self.sleeper)(self.retry.delay(attempt));
                        self.retries.fetch_add(1, Ordering::SeqCst);
                        attempt += 1;
                    }
                    _ => return Err(GatewayError::Provider { attempts: attempt + 1, message: f.message }),
                },
            }
        }
    }

    /// Chat completion through cache, budget, limiter and retry policy.
    pub fn complete(&self, request: &ChatRequest) -> Result<String, GatewayError> {
        request.validate().map_err(GatewayError::InvalidRequest)?;
        let key = self.cache_key(request.tag.as_str(), &request.content_hash());
        let prompt_tokens: u64 = request.messages().iter().map(|t| tokens_for_budget(&t.content)).sum();
        let text = self.cached_call(&key, prompt_tokens, || self.provider.complete(request))?;
        self.charge_output(tokens_for_budget(&text));
        Ok(text)
    }

    /// Token logprobs of `prefix ⊕ continuation`, boundary at the split.
    pub fn score_logprobs(&self, prefix: &str, continuation: &str) -> Result<TokenLogprobs, GatewayError> {
        let content = serde_json::to_string(&(prefix, continuation)).expect("strings serialize");
        let key = self.cache_key("logprobs", &hex::encode(Sha256::digest(content.as_bytes())));
        let tokens = tokens_for_budget(prefix) + tokens_for_budget(continuation);
        let json = self.cached_call(&key, tokens, || {
            let scored = self.provider.score_logprobs(prefix, continuation)?;
            if !scored.is_consistent() {
                return Err(ProviderFailure::fatal("inconsistent logprob payload"));
            }
            Ok(serde_json::to_string(&scored).expect("logprobs serialize"))
        })?;
        serde_json::from_str(&json).map_err(|e| GatewayError::Cache(format!("corrupt cached logprobs: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn quiet(provider: Arc<dyn Provider>) -> Gateway {
        Gateway::new(provider).with_sleeper(|_| {})
    }

    #[test]
    fn scripted_hash_map_then_cache() {
        let request = ChatRequest::new(Purpose::Judge, "rate this");
        let mut script = HashMap::new();
        script.insert(request.content_hash(), "ok".to_string());
        let mock = Arc::new(MockProvider::scripted(script));
        let gw = quiet(mock.clone());
        assert_eq!(gw.complete(&request).unwrap(), "ok");
        assert_eq!(gw.complete(&request).unwrap(), "ok");
        assert_eq!(mock.calls(), 1);
        assert_eq!(gw.stats().cache_hits, 1);
    }

    #[test]
    fn transient_failures_back_off_then_succeed() {
        let mock = Arc::new(MockProvider::sequence(vec!["fine".into()]));
        mock.fail_next(ProviderFailure::transient(Some(429), "slow down"));
        mock.fail_next(ProviderFailure::transient(Some(429), "slow down"));
        let waits = Arc::new(Mutex::new(Vec::new()));
        let recorded = waits.clone();
        let gw = Gateway::new(mock.clone())
            .with_retry(RetryPolicy { max_retries: 3, base_delay_ms: 100, max_delay_ms: 1000 })
            .with_sleeper(move |d| recorded.lock().unwrap().push(d));
        assert_eq!(gw.complete(&ChatRequest::new(Purpose::Review, "x")).unwrap(), "fine");
        assert_eq!(*waits.lock().unwrap(), vec![Duration::from_millis(100), Duration::from_millis(200)]);
        assert_eq!(gw.stats().retries, 2);
        assert_eq!(mock.calls(), 3);
    }

    #[test]
    fn retry_budget_exhausted() {
        let mock = Arc::new(MockProvider::sequence(vec!["never".into()]));
        for _ in 0..3 {
            mock.fail_next(ProviderFailure::transient(Some(503), "down"));
        }
        let gw = quiet(mock).with_retry(RetryPolicy { max_retries: 2, base_delay_ms: 1, max_delay_ms: 1 });
        let err = gw.complete(&ChatRequest::new(Purpose::Review, "x")).unwrap_err();
        assert_eq!(err, GatewayError::Provider { attempts: 3, message: "down".into() });
    }

    #[test]
    fn fatal_failures_do_not_retry() {
        let mock = Arc::new(MockProvider::sequence(vec!["x".into()]));
        mock.fail_next(ProviderFailure::fatal("bad request"));
        let gw = quiet(mock.clone());
        assert!(matches!(gw.complete(&ChatRequest::new(Purpose::Review, "x")), Err(GatewayError::Provider { attempts: 1, .. })));
        assert_eq!(mock.calls(), 1);
    }

    #[test]
    fn request_budget() {
        let mock = Arc::new(MockProvider::sequence(vec!["a".into(), "b".into()]));
        let gw = quiet(mock).with_limits(Limits { max_requests: Some(1), ..Limits::default() });
        assert!(gw.complete(&ChatRequest::new(Purpose::Judge, "one")).is_ok());
        assert!(matches!(gw.complete(&ChatRequest::new(Purpose::Judge, "two")), Err(GatewayError::BudgetExceeded(_))));
        // cached repeats cost nothing
        assert!(gw.complete(&ChatRequest::new(Purpose::Judge, "one")).is_ok());
    }

    #[test]
    fn token_budget() {
        let mock = Arc::new(MockProvider::sequence(vec!["a b c d e f g h".into(), "z".into()]));
        let gw = quiet(mock).with_limits(Limits { max_tokens: Some(14), ..Limits::default() });
        // 3 prompt words -> 4 tokens, 8 output words -> 10 tokens
        assert!(gw.complete(&ChatRequest::new(Purpose::Judge, "one two three")).is_ok());
        assert!(matches!(gw.complete(&ChatRequest::new(Purpose::Judge, "four")), Err(GatewayError::BudgetExceeded(_))));
    }

    #[test]
    fn attempt_counter_bypasses_cache() {
        let mock = Arc::new(MockProvider::sequence(vec!["first".into(), "second".into()]));
        let gw = quiet(mock);
        let r = ChatRequest::new(Purpose::Alchemist, "p");
        assert_eq!(gw.complete(&r).unwrap(), "first");
        assert_eq!(gw.complete(&r.clone().with_attempt(1)).unwrap(), "second");
    }

    #[test]
    fn invalid_request_rejected() {
        let gw = quiet(Arc::new(MockProvider::sequence(vec![])));
        let mut r = ChatRequest::new(Purpose::Judge, "x");
        r.turns.push(Turn { role: Role::Assistant, content: "y".into() });
        assert!(matches!(gw.complete(&r), Err(GatewayError::InvalidRequest(_))));
    }

    #[test]
    fn logprob_cases() {
        let gw = quiet(Arc::new(MockProvider::sequence(vec![]).with_logprobs(LogprobModel::Uniform { vocab: 100 })));
        let lp = gw.score_logprobs("a b", "c d e").unwrap();
        assert_eq!(lp.tokens.len(), 5);
        assert_eq!(lp.boundary, 2);
        assert!(lp.logprobs.iter().all(|&l| (l - (1.0f64 / 100.0).ln()).abs() < 1e-15));
        let lp = gw.score_logprobs("a b", "").unwrap();
        assert_eq!(lp.boundary, lp.tokens.len());

        let gw = quiet(Arc::new(
            MockProvider::sequence(vec![]).with_logprobs(LogprobModel::Conditional { alone: 0.5, conditioned: 0.5 }),
        ));
        let lp = gw.score_logprobs("ctx", "w x y z").unwrap();
        let total: f64 = lp.continuation().iter().sum();
        assert!((total - 4.0 * 0.5f64.ln()).abs() < 1e-12);

        let gw = quiet(Arc::new(MockProvider::sequence(vec![])));
        assert_eq!(gw.score_logprobs("a", "b"), Err(GatewayError::NoLogprobSupport));
    }

    #[test]
    fn in_flight_cap_holds_under_contention() {
        let mock = Arc::new(MockProvider::offline().with_delay(Duration::from_millis(5)));
        let gw = Arc::new(quiet(mock.clone()).with_limits(Limits { max_in_flight: 3, ..Limits::default() }));
        std::thread::scope(|scope| {
            for t in 0..8 {
                let gw = gw.clone();
                scope.spawn(move || {
                    for i in 0..5 {
                        gw.complete(&ChatRequest::new(Purpose::Judge, format!("q {t} {i}"))).unwrap();
                    }
                });
            }
        });
        assert!(mock.peak_in_flight() <= 3, "peak {}", mock.peak_in_flight());
        assert!(gw.stats().peak_in_flight <= 3);
        assert_eq!(mock.calls(), 40);
    }

    #[test]
    fn concurrent_identical_requests_call_once() {
        let mock = Arc::new(MockProvider::offline().with_delay(Duration::from_millis(10)));
        let gw = Arc::new(quiet(mock.clone()));
        std::thread::scope(|scope| {
            for _ in 0..6 {
                let gw = gw.clone();
                scope.spawn(move || gw.complete(&ChatRequest::new(Purpose::Judge, "same")).unwrap());
            }
        });
        assert_eq!(mock.calls(), 1);
    }
}
