use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::code::{extract_code_blocks, CodeBlock};
use super::tokens::{Tokenizer, WhitespaceHeuristic};

/// Meta key set when a response contains a code fence that is never closed.
pub const META_UNTERMINATED_FENCE: &str = "warning_unterminated_fence";

/// One instruction/response record.
///
/// `code_blocks` and `languages` are derived from the response and kept in
/// sync by construction; use [`Sample::set_response`] to change the response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "SampleRecord", from = "SampleRecord")]
pub struct Sample {
    pub id: String,
    pub source: String,
    pub instruction: String,
    response: String,
    pub alchemist_prompt: Option<String>,
    languages: BTreeSet<String>,
    pub token_estimate: u64,
    pub meta: BTreeMap<String, String>,
    code_blocks: Vec<CodeBlock>,
}

impl Sample {
    /// Build a sample, deriving code blocks and a whitespace-x1.3 token estimate.
    pub fn new(id: impl Into<String>, source: impl Into<String>, instruction: impl Into<String>, response: impl Into<String>) -> Self {
        let mut sample = Sample {
            id: id.into(),
            source: source.into(),
            instruction: instruction.into(),
            response: String::new(),
            alchemist_prompt: None,
            languages: BTreeSet::new(),
            token_estimate: 0,
            meta: BTreeMap::new(),
            code_blocks: Vec::new(),
        };
        sample.set_response(response.into());
        sample.recount_tokens(&WhitespaceHeuristic);
        sample
    }

    pub fn response(&self) -> &str {
        &self.response
    }

    pub fn code_blocks(&self) -> &[CodeBlock] {
        &self.code_blocks
    }

    pub fn languages(&self) -> &BTreeSet<String> {
        &self.languages
    }

    pub fn set_response(&mut self, response: String) {
        self.code_blocks = extract_code_blocks(&response);
        self.languages = self
            .code_blocks
            .iter()
            .map(|b| b.language.clone())
            .filter(|l| l != "unknown")
            .collect();
        if self.code_blocks.iter().any(|b| !b.terminated) {
            self.meta.insert(META_UNTERMINATED_FENCE.to_string(), "true".to_string());
        }
        self.response = response;
    }

    pub fn recount_tokens(&mut self, tokenizer: &dyn Tokenizer) {
        self.token_estimate = tokenizer.count(&format!("{}\n{}", self.instruction, self.response));
    }

    /// Language with the most code lines, ties broken alphabetically.
    pub fn dominant_language(&self) -> Option<&str> {
        let mut lines: BTreeMap<&str, usize> = BTreeMap::new();
        for block in &self.code_blocks {
            *lines.entry(block.language.as_str()).or_default() += block.line_count;
        }
        let mut best: Option<(&str, usize)> = None;
        for (language, count) in lines {
            if best.is_none_or(|(_, c)| count > c) {
                best = Some((language, count));
            }
        }
        best.map(|(language, _)| language)
    }

    /// Concatenated code of every block.
    pub fn code_text(&self) -> String {
        self.code_blocks.iter().map(|b| b.code.as_str()).collect::<Vec<_>>().join("\n")
    }

    /// Response text outside fenced code blocks.
    pub fn prose(&self) -> String {
        let chars: Vec<char> = self.response.chars().collect();
        let mut prose = String::new();
        let mut cursor = 0;
        for block in &self.code_blocks {
            prose.extend(&chars[cursor..block.span.0]);
            cursor = block.span.1;
        }
        prose.extend(&chars[cursor.min(chars.len())..]);
        prose
    }
}

/// Canonical on-disk record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub source: String,
    pub instruction: String,
    pub response: String,
    pub alchemist_prompt: Option<String>,
    #[serde(default)]
    pub languages: Vec<String>,
    #[serde(default)]
    pub token_estimate: u64,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

impl From<Sample> for SampleRecord {
    fn from(sample: Sample) -> Self {
        SampleRecord {
            id: sample.id,
            source: sample.source,
            instruction: sample.instruction,
            response: sample.response,
            alchemist_prompt: sample.alchemist_prompt,
            languages: sample.languages.into_iter().collect(),
            token_estimate: sample.token_estimate,
            meta: sample.meta,
        }
    }
}

impl From<SampleRecord> for Sample {
    fn from(record: SampleRecord) -> Self {
        let mut sample = Sample {
            id: record.id,
            source: record.source,
            instruction: record.instruction,
            response: String::new(),
            alchemist_prompt: record.alchemist_prompt,
            languages: BTreeSet::new(),
            token_estimate: record.token_estimate,
            meta: record.meta,
            code_blocks: Vec::new(),
        };
        sample.set_response(record.response);
        sample
    }
}
