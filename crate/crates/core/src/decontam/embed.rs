//! Code embeddings and cosine similarity.

use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::hash::{Hash, Hasher};
use std::time::Duration;

use serde_json::{json, Value};
use thiserror::Error;

use super::ngram::normalize_tokens;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmbedError {
    #[error("vector dimensions differ: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("cosine undefined for a zero vector")]
    ZeroVector,
    #[error("embedder unavailable: {0}")]
    EmbedderUnavailable(String),
}

/// Cosine similarity of two equal-length, non-zero vectors.
pub fn embedding_cosine(a: &[f32], b: &[f32]) -> Result<f64, EmbedError> {
    if a.len() != b.len() {
        return Err(EmbedError::DimensionMismatch(a.len(), b.len()));
    }
    let (mut dot, mut na, mut nb) = (0f64, 0f64, 0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (f64::from(x), f64::from(y));
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(EmbedError::ZeroVector);
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

pub trait Embedder: Send + Sync {
    fn id(&self) -> &str;
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Vec<f32>, EmbedError>;
}

/// Offline embedder: signed feature hashing of normalized tokens and token bigrams.
#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    dim: usize,
}

impl HashingEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0);
        HashingEmbedder { dim }
    }

    fn bucket(&self, feature: &str) -> (usize, f32) {
        let mut h = DefaultHasher::new();
        feature.hash(&mut h);
        let v = h.finish();
        ((v % self.dim as u64) as usize, if v >> 63 == 0 { 1.0 } else { -1.0 })
    }
}

impl Embedder for HashingEmbedder {
    fn id(&self) -> &str {
        "hashing"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f32>, EmbedError> {
        let tokens = normalize_tokens(text);
        let mut v = vec![0f32; self.dim];
        for t in &tokens {
            let (i, s) = self.bucket(t);
            v[i] += s;
        }
        for w in tokens.windows(2) {
            let (i, s) = self.bucket(&format!("{} {}", w[0], w[1]));
            v[i] += s;
        }
        Ok(v)
    }
}

/// Looks texts up in a fixed table; unknown texts are an error.
#[derive(Debug, Clone, Default)]
pub struct FixedEmbedder {
    pub dim: usize,
    pub table: HashMap<String, Vec<f32>>,
}

impl Embedder for FixedEmbedder {
    fn id(&self) -> &str {
        "fixed"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f32>, EmbedError> {
        self.table
            .get(text)
            .cloned()
            .ok_or_else(|| EmbedError::EmbedderUnavailable(format!("no fixture vector for {text:?}")))
    }
}

/// Embeddings endpoint speaking the common `{model, input}` → `{data: [{embedding}]}` contract.
pub struct HttpEmbedder {
    endpoint: String,
    model: String,
    dim: usize,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

impl HttpEmbedder {
    pub fn new(endpoint: &str, model: &str, dim: usize, api_key: Option<String>) -> Self {
        HttpEmbedder {
            endpoint: endpoint.to_string(),
            model: model.to_string(),
            dim,
            api_key,
            client: reqwest::blocking::Client::builder()
                .timeout(Duration::from_secs(60))
                .build()
                .expect("http client"),
        }
    }
}

impl Embedder for HttpEmbedder {
    fn id(&self) -> &str {
        &self.model
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f32>, EmbedError> {
        let mut req = self.client.post(&self.endpoint).json(&json!({"model": self.model, "input": text}));
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let unavailable = |e: String| EmbedError::EmbedderUnavailable(e);
        let resp = req.send().map_err(|e| unavailable(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(unavailable(format!("HTTP {}", resp.status())));
        }
        let body: Value = resp.json().map_err(|e| unavailable(e.to_string()))?;
        let vector: Vec<f32> = body["data"][0]["embedding"]
            .as_array()
            .ok_or_else(|| unavailable("response lacks data[0].embedding".into()))?
            .iter()
            .map(|x| x.as_f64().unwrap_or(0.0) as f32)
            .collect();
        if vector.len() != self.dim {
            return Err(EmbedError::DimensionMismatch(vector.len(), self.dim));
        }
        Ok(vector)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_cases() {
        let v = [0.3f32, -1.2, 4.0];
        assert!((embedding_cosine(&v, &v).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f32> = v.iter().map(|x| -x).collect();
        assert!((embedding_cosine(&v, &neg).unwrap() + 1.0).abs() < 1e-12);
        let c = embedding_cosine(&[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-6);
        assert_eq!(embedding_cosine(&[1.0], &[1.0, 2.0]), Err(EmbedError::DimensionMismatch(1, 2)));
        assert_eq!(embedding_cosine(&[0.0, 0.0], &[1.0, 2.0]), Err(EmbedError::ZeroVector));
    }

    #[test]
    fn cosine_symmetric() {
        let a = [1.0f32, 2.0, 3.0];
        let b = [-2.0f32, 0.5, 1.0];
        assert_eq!(embedding_cosine(&a, &b), embedding_cosine(&b, &a));
    }

    #[test]
    fn hashing_embedder_is_deterministic() {
        let e = HashingEmbedder::new(64);
        assert_eq!(e.embed("def f(x): return x").unwrap(), e.embed("def f(x): return x").unwrap());
        assert_eq!(e.embed("x").unwrap().len(), 64);
    }
}
