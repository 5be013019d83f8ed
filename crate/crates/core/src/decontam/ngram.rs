//! Word n-gram shingling, Jaccard similarity and an inverted n-gram index.

use std::collections::hash_map::DefaultHasher;
use std::collections::{HashMap, HashSet};
use std::hash::{Hash, Hasher};

/// Lowercase, replace every non-alphanumeric character (except `_`) with a
/// space, and split on whitespace.
pub fn normalize_tokens(text: &str) -> Vec<String> {
    let cleaned: String = text
        .chars()
        .map(|c| if c.is_alphanumeric() || c == '_' { c } else { ' ' })
        .collect::<String>()
        .to_lowercase();
    cleaned.split_whitespace().map(str::to_string).collect()
}

fn hash_gram<S: AsRef<str>>(gram: &[S]) -> u64 {
    // DefaultHasher::new() uses fixed keys, so hashes are stable across runs
    let mut h = DefaultHasher::new();
    for token in gram {
        token.as_ref().hash(&mut h);
        0xffu8.hash(&mut h);
    }
    h.finish()
}

/// Hashed set of the `n`-token windows of `tokens`. Empty when `tokens.len() < n`.
pub fn ngram_set<S: AsRef<str>>(tokens: &[S], n: usize) -> HashSet<u64> {
    assert!(n >= 1, "n-gram size must be at least 1");
    if tokens.len() < n {
        return HashSet::new();
    }
    tokens.windows(n).map(hash_gram).collect()
}

pub fn jaccard_sets(a: &HashSet<u64>, b: &HashSet<u64>) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let (small, large) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    let inter = small.iter().filter(|g| large.contains(g)).count();
    let union = a.len() + b.len() - inter;
    inter as f64 / union as f64
}

/// Word-level n-gram Jaccard similarity of two texts after normalization.
pub fn ngram_jaccard(a: &str, b: &str, n: usize) -> f64 {
    jaccard_sets(&ngram_set(&normalize_tokens(a), n), &ngram_set(&normalize_tokens(b), n))
}

/// Maps n-gram hashes to the documents containing them.
#[derive(Debug, Default)]
pub struct NgramIndex {
    postings: HashMap<u64, Vec<u32>>,
}

impl NgramIndex {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, doc: u32, grams: &HashSet<u64>) {
        for &g in grams {
            self.postings.entry(g).or_default().push(doc);
        }
    }

    /// Documents sharing at least one n-gram with `grams`, ascending and unique.
    pub fn candidates(&self, grams: &HashSet<u64>) -> Vec<u32> {
        let mut docs: Vec<u32> = grams
            .iter()
            .filter_map(|g| self.postings.get(g))
            .flatten()
            .copied()
            .collect();
        docs.sort_unstable();
        docs.dedup();
        docs
    }

    pub fn len(&self) -> usize {
        self.postings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.postings.is_empty()
    }
}
