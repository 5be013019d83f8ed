//! Token counting.

use std::collections::HashMap;
use std::sync::Arc;

use thiserror::Error;

/// Identifier of the default estimator, recorded in manifests.
pub const WHITESPACE_X13: &str = "whitespace-x1.3";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TokenizerError {
    #[error("tokenizer `{0}` is not registered")]
    Unavailable(String),
}

pub trait Tokenizer: Send + Sync {
    fn id(&self) -> &str;
    fn count(&self, text: &str) -> u64;
}

/// Whitespace word count scaled by 1.3, rounded half away from zero.
#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceHeuristic;

impl Tokenizer for WhitespaceHeuristic {
    fn id(&self) -> &str {
        WHITESPACE_X13
    }

    fn count(&self, text: &str) -> u64 {
        scaled_word_count(text.split_whitespace().count() as u64)
    }
}

pub(crate) fn scaled_word_count(words: u64) -> u64 {
    (words as f64 * 1.3).round() as u64
}

/// Named tokenizers. External tokenizers are plugged in with [`TokenizerRegistry::register`].
#[derive(Clone)]
pub struct TokenizerRegistry {
    tokenizers: HashMap<String, Arc<dyn Tokenizer>>,
}

impl Default for TokenizerRegistry {
    fn default() -> Self {
        let mut registry = TokenizerRegistry { tokenizers: HashMap::new() };
        registry.register(Arc::new(WhitespaceHeuristic));
        registry
    }
}

impl TokenizerRegistry {
    pub fn register(&mut self, tokenizer: Arc<dyn Tokenizer>) {
        self.tokenizers.insert(tokenizer.id().to_string(), tokenizer);
    }

    pub fn get(&self, id: &str) -> Result<Arc<dyn Tokenizer>, TokenizerError> {
        self.tokenizers
            .get(id)
            .cloned()
            .ok_or_else(|| TokenizerError::Unavailable(id.to_string()))
    }
}

/// Count tokens of `text` with the tokenizer registered under `tokenizer`.
pub fn estimate_tokens(text: &str, tokenizer: &str, registry: &TokenizerRegistry) -> Result<u64, TokenizerError> {
    Ok(registry.get(tokenizer)?.count(text))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn basic_counts() {
        let registry = TokenizerRegistry::default();
        assert_eq!(estimate_tokens("", WHITESPACE_X13, &registry).unwrap(), 0);
        assert_eq!(estimate_tokens("a b c", WHITESPACE_X13, &registry).unwrap(), 4);
        assert_eq!(
            estimate_tokens("x", "bpe-cl100k", &registry),
            Err(TokenizerError::Unavailable("bpe-cl100k".into()))
        );
    }

    #[test]
    fn thousand_words_match_independent_count() {
        let text: String = (0..1000).map(|i| format!("w{} ", i % 37)).collect();
        // independent oracle: count space-separated words by hand, scale by 13/10
        let words = text.matches(' ').count() as u64;
        assert_eq!(words, 1000);
        assert_eq!(WhitespaceHeuristic.count(&text), words * 13 / 10);
    }

    struct CharCount;
    impl Tokenizer for CharCount {
        fn id(&self) -> &str {
            "chars"
        }
        fn count(&self, text: &str) -> u64 {
            text.chars().count() as u64
        }
    }

    #[test]
    fn external_tokenizer_plugs_in() {
        let mut registry = TokenizerRegistry::default();
        registry.register(Arc::new(CharCount));
        assert_eq!(estimate_tokens("abc", "chars", &registry).unwrap(), 3);
    }

    proptest! {
        #[test]
        fn concatenation_monotone_within_one(a in "[a-z ]{0,80}", b in "[a-z ]{0,80}") {
            let joined = format!("{a} {b}");
            let whole = WhitespaceHeuristic.count(&joined) as i64;
            let parts = WhitespaceHeuristic.count(&a) as i64 + WhitespaceHeuristic.count(&b) as i64;
            prop_assert!((whole - parts).abs() <= 1);
            prop_assert!(whole >= WhitespaceHeuristic.count(&a) as i64);
        }
    }
}
