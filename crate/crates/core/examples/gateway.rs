//! The model gateway: caching, single-flight, retries and budgets.
//!
//! Runs against mock providers by default. With `ALCHEMIST_ENDPOINT` and
//! `ALCHEMIST_MODEL` set (and `ALCHEMIST_API_KEY` for auth) it also sends one
//! request to a real chat-completions endpoint.
//!
//! cargo run --example gateway

use std::sync::Arc;

use alchemist::gateway::{
    ChatRequest, Gateway, HttpProvider, HttpProviderConfig, Limits, MockProvider, ProviderFailure, Purpose, RetryPolicy,
};

fn main() {
    let mock = Arc::new(MockProvider::offline());
    let gateway = Gateway::new(mock.clone())
        .with_retry(RetryPolicy { max_retries: 3, base_delay_ms: 10, max_delay_ms: 100 })
        .with_limits(Limits { max_requests: Some(10), ..Limits::default() });

    mock.fail_next(ProviderFailure::transient(Some(429), "rate limited"));
    let request = ChatRequest::new(Purpose::Review, "Review this code:\n```python\ndef f(x):\n    return x\n```");
    let first = gateway.complete(&request).expect("retried past the 429");
    let again = gateway.complete(&request).expect("cached");
    assert_eq!(first, again);
    println!("{first}\n");
    println!("{:?}", gateway.stats());

    let lp = gateway.score_logprobs("Write a sorting function.\n\n", "def sort(xs):\n    return sorted(xs)").unwrap();
    println!("{} continuation tokens, mean logprob {:.3}", lp.continuation().len(), lp.continuation().iter().sum::<f64>() / lp.continuation().len() as f64);

    if let (Ok(endpoint), Ok(model)) = (std::env::var("ALCHEMIST_ENDPOINT"), std::env::var("ALCHEMIST_MODEL")) {
        let http = Gateway::new(Arc::new(HttpProvider::new(HttpProviderConfig {
            endpoint,
            model,
            logprob_endpoint: None,
            timeout_secs: 60,
        })));
        match http.complete(&ChatRequest::new(Purpose::Judge, "Say hello in one word.")) {
            Ok(text) => println!("\nremote: {text}"),
            Err(e) => println!("\nremote call failed: {e}"),
        }
    }
}
