use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn as_str(&self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

/// What a request is for; also the cache namespace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Purpose {
    Alchemist,
    Evolve,
    Review,
    Judge,
}

impl Purpose {
    pub fn as_str(&self) -> &'static str {
        match self {
            Purpose::Alchemist => "alchemist",
            Purpose::Evolve => "evolve",
            Purpose::Review => "review",
            Purpose::Judge => "judge",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub system: Option<String>,
    pub turns: Vec<Turn>,
    pub temperature: f64,
    pub max_output: u32,
    pub tag: Purpose,
    /// Regeneration counter. Part of the cache key, so a retry after a
    /// rejected answer reaches the provider instead of the cache.
    pub attempt: u32,
}

impl ChatRequest {
    pub fn new(tag: Purpose, user: impl Into<String>) -> Self {
        ChatRequest {
            system: None,
            turns: vec![Turn { role: Role::User, content: user.into() }],
            temperature: 0.0,
            max_output: 512,
            tag,
            attempt: 0,
        }
    }

    pub fn with_system(mut self, system: impl Into<String>) -> Self {
        self.system = Some(system.into());
        self
    }

    pub fn with_attempt(mut self, attempt: u32) -> Self {
        self.attempt = attempt;
        self
    }

    pub fn with_max_output(mut self, max_output: u32) -> Self {
        self.max_output = max_output;
        self
    }

    pub fn last_user(&self) -> &str {
        self.turns
            .iter()
            .rev()
            .find(|t| t.role == Role::User)
            .map_or("", |t| t.content.as_str())
    }

    pub fn validate(&self) -> Result<(), String> {
        match self.turns.last() {
            Some(t) if t.role == Role::User => {}
            Some(_) => return Err("last turn must come from the user".into()),
            None => return Err("request has no turns".into()),
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(format!("temperature {} must be >= 0", self.temperature));
        }
        Ok(())
    }

    /// Hex SHA-256 of the request's canonical JSON.
    pub fn content_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("request serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// Messages in chat-completions order, system first.
    pub fn messages(&self) -> Vec<Turn> {
        let mut out = Vec::with_capacity(self.turns.len() + 1);
        if let Some(system) = &self.system {
            out.push(Turn { role: Role::System, content: system.clone() });
        }
        out.extend(self.turns.iter().cloned());
        out
    }
}

/// Per-token natural-log probabilities over `prefix ⊕ continuation`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprobs {
    pub tokens: Vec<String>,
    pub logprobs: Vec<f64>,
    /// Index of the first continuation token.
    pub boundary: usize,
}

impl TokenLogprobs {
    pub fn is_consistent(&self) -> bool {
        self.tokens.len() == self.logprobs.len() && self.boundary <= self.tokens.len()
    }

    pub fn continuation(&self) -> &[f64] {
        &self.logprobs[self.boundary..]
    }
}
