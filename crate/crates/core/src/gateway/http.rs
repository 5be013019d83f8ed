//! Chat-completions-style HTTP provider.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{ChatRequest, Provider, ProviderFailure, TokenLogprobs};

/// Environment variable holding the bearer token.
pub const API_KEY_ENV: &str = "ALCHEMIST_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HttpProviderConfig {
    /// Chat endpoint, e.g. `https://host/v1/chat/completions`.
    pub endpoint: String,
    pub model: String,
    /// Completions endpoint accepting `echo` + `logprobs`, used for prompt scoring.
    #[serde(default)]
    pub logprob_endpoint: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

fn default_timeout() -> u64 {
    120
}

pub struct HttpProvider {
    config: HttpProviderConfig,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

impl HttpProvider {
    /// Build a provider reading the API key from [`API_KEY_ENV`].
    pub fn new(config: HttpProviderConfig) -> Self {
        let api_key = std::env::var(API_KEY_ENV).ok();
        Self::with_key(config, api_key)
    }

    pub fn with_key(config: HttpProviderConfig, api_key: Option<String>) -> Self {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .expect("http client");
        HttpProvider { config, api_key, client }
    }

    fn post(&self, url: &str, body: &Value) -> Result<Value, ProviderFailure> {
        let mut req = self.client.post(url).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| ProviderFailure::transient(None, e.to_string()))?;
        let status = resp.status();
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(ProviderFailure::transient(Some(status.as_u16()), format!("HTTP {status}")));
        }
        if !status.is_success() {
            let text = resp.text().unwrap_or_default();
            return Err(ProviderFailure::fatal(format!("HTTP {status}: {}", text.chars().take(300).collect::<String>())));
        }
        resp.json().map_err(|e| ProviderFailure::fatal(format!("invalid JSON body: {e}")))
    }
}

/// Request body for a chat completion.
pub(crate) fn chat_body(model: &str, request: &ChatRequest) -> Value {
    let messages: Vec<Value> = request
        .messages()
        .iter()
        .map(|t| json!({"role": t.role.as_str(), "content": t.content}))
        .collect();
    json!({
        "model": model,
        "messages": messages,
        "temperature": request.temperature,
        "max_tokens": request.max_output,
    })
}

/// Turn an echo+logprobs completions payload into [`TokenLogprobs`].
/// Tokens without a logprob (the first token of the prompt) are dropped.
pub(crate) fn parse_echo_logprobs(body: &Value, prefix_chars: usize) -> Result<TokenLogprobs, ProviderFailure> {
    let lp = &body["choices"][0]["logprobs"];
    let (Some(tokens), Some(values), Some(offsets)) =
        (lp["tokens"].as_array(), lp["token_logprobs"].as_array(), lp["text_offset"].as_array())
    else {
        return Err(ProviderFailure::no_logprobs());
    };
    if tokens.len() != values.len() || tokens.len() != offsets.len() {
        return Err(ProviderFailure::fatal("logprob arrays differ in length"));
    }
    let mut out = TokenLogprobs { tokens: Vec::new(), logprobs: Vec::new(), boundary: 0 };
    let mut boundary = None;
    for ((tok, val), off) in tokens.iter().zip(values).zip(offsets) {
        let Some(val) = val.as_f64() else { continue };
        let offset = off.as_u64().unwrap_or(0) as usize;
        if boundary.is_none() && offset >= prefix_chars {
            boundary = Some(out.tokens.len());
        }
        out.tokens.push(tok.as_str().unwrap_or_default().to_string());
        out.logprobs.push(val);
    }
    out.boundary = boundary.unwrap_or(out.tokens.len());
    Ok(out)
}

impl Provider for HttpProvider {
    fn id(&self) -> String {
        format!("http:{}:{}", self.config.endpoint, self.config.model)
    }

    fn complete(&self, request: &ChatRequest) -> Result<String, ProviderFailure> {
        let body = self.post(&self.config.endpoint, &chat_body(&self.config.model, request))?;
        body["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| ProviderFailure::fatal("response lacks choices[0].message.content"))
    }

    fn score_logprobs(&self, prefix: &str, continuation: &str) -> Result<TokenLogprobs, ProviderFailure> {
        let url = self.config.logprob_endpoint.as_ref().ok_or_else(ProviderFailure::no_logprobs)?;
        let body = json!({
            "model": self.config.model,
            "prompt": format!("{prefix}{continuation}"),
            "max_tokens": 0,
            "echo": true,
            "logprobs": 0,
            "temperature": 0.0,
        });
        let resp = self.post(url, &body)?;
        parse_echo_logprobs(&resp, prefix.chars().count())
    }
}
