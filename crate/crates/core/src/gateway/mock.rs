//! Deterministic in-process provider for offline runs and tests.

use std::collections::{HashMap, VecDeque};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use super::offline::offline_responder;
use super::{ChatRequest, Provider, ProviderFailure, TokenLogprobs};

type Responder = dyn Fn(&ChatRequest) -> Result<String, ProviderFailure> + Send + Sync;

/// Token probability model used by [`MockProvider::score_logprobs`].
/// Tokens are whitespace-separated words.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LogprobModel {
    /// Every token has probability `1 / vocab`.
    Uniform { vocab: usize },
    /// Prefix tokens get `alone`; continuation tokens get `conditioned` when the
    /// prefix is non-empty and `alone` otherwise.
    Conditional { alone: f64, conditioned: f64 },
    /// Add-one unigram cache model over a vocabulary of `vocab` words: token `i`
    /// has probability `(1 + boost·c) / (vocab + boost·i)`, where `c` counts
    /// earlier occurrences of the same word. Context that mentions the
    /// response's words lowers its perplexity.
    Cache { vocab: usize, boost: f64 },
}

impl LogprobModel {
    fn score(&self, prefix: &[&str], continuation: &[&str]) -> Vec<f64> {
        match *self {
            LogprobModel::Uniform { vocab } => {
                vec![(1.0 / vocab as f64).ln(); prefix.len() + continuation.len()]
            }
            LogprobModel::Conditional { alone, conditioned } => {
                let cont = if prefix.is_empty() { alone } else { conditioned };
                let mut out = vec![alone.ln(); prefix.len()];
                out.extend(std::iter::repeat_n(cont.ln(), continuation.len()));
                out
            }
            LogprobModel::Cache { vocab, boost } => {
                let mut counts: HashMap<&str, usize> = HashMap::new();
                prefix
                    .iter()
                    .chain(continuation)
                    .enumerate()
                    .map(|(i, tok)| {
                        let c = counts.get(tok).copied().unwrap_or(0);
                        *counts.entry(tok).or_default() += 1;
                        ((1.0 + boost * c as f64) / (vocab as f64 + boost * i as f64)).ln()
                    })
                    .collect()
            }
        }
    }
}

pub struct MockProvider {
    id: String,
    responder: Box<Responder>,
    logprobs: Option<LogprobModel>,
    failures: Mutex<VecDeque<ProviderFailure>>,
    delay: Duration,
    calls: AtomicUsize,
    in_flight: AtomicUsize,
    peak: AtomicUsize,
}

impl MockProvider {
    pub fn with_responder(
        id: impl Into<String>,
        responder: impl Fn(&ChatRequest) -> Result<String, ProviderFailure> + Send + Sync + 'static,
    ) -> Self {
        MockProvider {
            id: id.into(),
            responder: Box::new(responder),
            logprobs: None,
            failures: Mutex::new(VecDeque::new()),
            delay: Duration::ZERO,
            calls: AtomicUsize::new(0),
            in_flight: AtomicUsize::new(0),
            peak: AtomicUsize::new(0),
        }
    }

    /// Answers requests whose [`ChatRequest::content_hash`] is in `script`.
    pub fn scripted(script: HashMap<String, String>) -> Self {
        Self::with_responder("mock-scripted", move |req| {
            script
                .get(&req.content_hash())
                .cloned()
                .ok_or_else(|| ProviderFailure::fatal(format!("no scripted response for {}", req.content_hash())))
        })
    }

    /// Returns `responses` in order, one per call.
    pub fn sequence(responses: Vec<String>) -> Self {
        let queue = Mutex::new(VecDeque::from(responses));
        Self::with_responder("mock-sequence", move |_| {
            queue
                .lock()
                .expect("queue lock")
                .pop_front()
                .ok_or_else(|| ProviderFailure::fatal("mock response sequence exhausted"))
        })
    }

    /// Rule-based stand-in for every pipeline prompt, with a cache logprob model.
    pub fn offline() -> Self {
        Self::with_responder("mock-offline", |req| Ok(offline_responder(req)))
            .with_logprobs(LogprobModel::Cache { vocab: 50_000, boost: 2000.0 })
    }

    pub fn with_logprobs(mut self, model: LogprobModel) -> Self {
        self.logprobs = Some(model);
        self
    }

    pub fn with_delay(mut self, delay: Duration) -> Self {
        self.delay = delay;
        self
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    /// Queue a failure returned by the next call before any real answer.
    pub fn fail_next(&self, failure: ProviderFailure) {
        self.failures.lock().expect("failure lock").push_back(failure);
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn peak_in_flight(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }

    fn enter(&self) -> Result<(), ProviderFailure> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak.fetch_max(now, Ordering::SeqCst);
        if !self.delay.is_zero() {
            std::thread::sleep(self.delay);
        }
        let injected = self.failures.lock().expect("failure lock").pop_front();
        match injected {
            Some(f) => {
                self.in_flight.fetch_sub(1, Ordering::SeqCst);
                Err(f)
            }
            None => Ok(()),
        }
    }

    fn leave(&self) {
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
    }
}

impl Provider for MockProvider {
    fn id(&self) -> String {
        self.id.clone()
    }

    fn complete(&self, request: &ChatRequest) -> Result<String, ProviderFailure> {
        self.enter()?;
        let out = (self.responder)(request);
        self.leave();
        out
    }

    fn score_logprobs(&self, prefix: &str, continuation: &str) -> Result<TokenLogprobs, ProviderFailure> {
        let model = self.logprobs.ok_or_else(ProviderFailure::no_logprobs)?;
        self.enter()?;
        let p: Vec<&str> = prefix.split_whitespace().collect();
        let c: Vec<&str> = continuation.split_whitespace().collect();
        let logprobs = model.score(&p, &c);
        self.leave();
        Ok(TokenLogprobs {
            tokens: p.iter().chain(&c).map(|t| t.to_string()).collect(),
            logprobs,
            boundary: p.len(),
        })
    }
}
