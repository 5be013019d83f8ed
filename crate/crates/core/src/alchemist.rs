//! Hindsight, data-specific instruction prefixes ("AlchemistPrompts").
//!
//! A small seeded fraction of the corpus is shown to a chat model together
//! with its response; the model writes a short prefix naming the response's
//! language and characteristics, which is fused in front of the original
//! instruction. Responses are never touched.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{ChatRequest, Gateway, GatewayError, Purpose};
use crate::ingest::{display_name, language_aliases, Sample, WhitespaceHeuristic};

/// Source tag carried by customized samples.
pub const SOURCE_ALCHEMIST: &str = "alchemist";
pub const DEFAULT_RATIO: f64 = 0.05;
pub const MAX_PROMPT_WORDS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    #[default]
    Augment,
    Replace,
}

impl std::str::FromStr for Strategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "augment" => Ok(Strategy::Augment),
            "replace" => Ok(Strategy::Replace),
            other => Err(format!("unknown strategy `{other}` (expected augment or replace)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Validation {
    pub passed: bool,
    /// Reasons from the last rejected attempt; empty when passed.
    pub reasons: Vec<String>,
    pub attempts: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub sample_id: String,
    pub prompt_text: String,
    pub customized_instruction: String,
    pub strategy: Strategy,
    pub validation: Validation,
}

#[derive(Debug, Error)]
pub enum AlchemistError {
    #[error(transparent)]
    Provider(#[from] GatewayError),
    #[error("sample `{0}` has an empty response")]
    EmptyResponse(String),
    #[error("unknown sample id `{0}`")]
    UnknownSampleId(String),
    #[error("record for `{0}` did not pass validation")]
    NotValidated(String),
    #[error("{path}: {message}")]
    Records { path: String, message: String },
}

/// Prompt used to ask for an AlchemistPrompt. `{instruction}` and
/// `{response}` are substituted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptTemplate {
    pub system: String,
    pub user: String,
    pub max_words: usize,
    /// Generation attempts before a sample is marked as failed.
    pub max_attempts: u32,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate {
            system: "You are an Alchemist. You read an instruction together with the response that answers it and write a short prefix for the instruction so that the instruction matches the response it already has.".into(),
            user: "Write one instruction prefix of fewer than 50 words for the pair below. Name the programming language of the response and its key characteristics, such as the algorithm or concept it uses, its coding style or its structure. Do not reveal the solution. Answer with the prefix only.\n\n### Instruction\n{instruction}\n\n### Response\n{response}".into(),
            max_words: MAX_PROMPT_WORDS,
            max_attempts: 3,
        }
    }
}

impl PromptTemplate {
    pub fn render(&self, sample: &Sample) -> ChatRequest {
        let user = self.user.replace("{instruction}", &sample.instruction).replace("{response}", sample.response());
        ChatRequest::new(Purpose::Alchemist, user).with_system(self.system.clone()).with_max_output(128)
    }

    pub fn validate(&self) -> Result<(), (String, String)> {
        if !self.user.contains("{instruction}") || !self.user.contains("{response}") {
            return Err(("user".into(), "template must contain {instruction} and {response}".into()));
        }
        if self.max_attempts == 0 {
            return Err(("max_attempts".into(), "must be at least 1".into()));
        }
        Ok(())
    }
}

/// Pick exactly `round(ratio * |corpus|)` sample ids, uniformly without
/// replacement, deterministically for a given corpus order and seed.
pub fn select_candidates(corpus: &[Sample], ratio: f64, seed: u64) -> BTreeSet<String> {
    let ratio = ratio.clamp(0.0, 1.0);
    let k = (ratio * corpus.len() as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_indices(&mut rng, corpus.len(), k.min(corpus.len()))
        .into_iter()
        .map(|i| corpus[i].id.clone())
        .collect()
}

/// Same as [`select_candidates`] but applied within each source tag.
pub fn select_candidates_per_source(corpus: &[Sample], ratio: f64, seed: u64) -> BTreeSet<String> {
    let mut by_source: BTreeMap<&str, Vec<Sample>> = BTreeMap::new();
    for sample in corpus {
        by_source.entry(sample.source.as_str()).or_default().push(sample.clone());
    }
    by_source
        .into_iter()
        .enumerate()
        .flat_map(|(i, (_, group))| select_candidates(&group, ratio, seed.wrapping_add(i as u64)))
        .collect()
}

fn mentions(text: &str, alias: &str) -> bool {
    let lower = text.to_lowercase();
    let is_word = |c: Option<char>| c.is_some_and(|c| c.is_alphanumeric());
    let mut from = 0;
    while let Some(pos) = lower[from..].find(alias) {
        let start = from + pos;
        let end = start + alias.len();
        let before = lower[..start].chars().next_back();
        let after = lower[end..].chars().next();
        // "c" must not match the "c" of "c++" / "c#"
        let glued = alias.chars().all(char::is_alphanumeric) && matches!(after, Some('+') | Some('#'));
        if !is_word(before) && !is_word(after) && !glued {
            return true;
        }
        from = start + alias.len().max(1);
    }
    false
}

/// Reasons a generated prefix is unacceptable; empty when it passes.
pub fn validate_prompt(text: &str, language: Option<&str>, max_words: usize) -> Vec<String> {
    let mut reasons = Vec::new();
    let words = text.split_whitespace().count();
    if words == 0 {
        reasons.push("empty prompt".to_string());
    }
    if words > max_words {
        reasons.push(format!("too long: {words} words (max {max_words})"));
    }
    if let Some(lang) = language.filter(|l| *l != "unknown") {
        if !language_aliases(lang).iter().any(|alias| mentions(text, alias)) {
            reasons.push(format!("language not mentioned: expected {}", display_name(lang)));
        }
    }
    reasons
}

fn clean_answer(raw: &str) -> String {
    let text = raw.trim();
    let text = text.strip_prefix("Prefix:").or_else(|| text.strip_prefix("Prompt:")).unwrap_or(text).trim();
    let quoted = text.len() >= 2
        && ((text.starts_with('"') && text.ends_with('"')) || (text.starts_with('\'') && text.ends_with('\'')));
    if quoted {
        text[1..text.len() - 1].trim().to_string()
    } else {
        text.to_string()
    }
}

/// `"{prompt}\n\n{instruction}"`.
pub fn fuse(prompt: &str, instruction: &str) -> String {
    format!("{prompt}\n\n{instruction}")
}

/// Ask the gateway for a prefix, regenerating up to `template.max_attempts`
/// times. Exhausted validation is recorded in the returned record.
pub fn generate_alchemist_prompt(
    sample: &Sample,
    gateway: &Gateway,
    template: &PromptTemplate,
) -> Result<PromptRecord, AlchemistError> {
    if sample.response().trim().is_empty() {
        return Err(AlchemistError::EmptyResponse(sample.id.clone()));
    }
    let language = sample.dominant_language();
    let request = template.render(sample);
    let mut last = (String::new(), Vec::new());
    let attempts = template.max_attempts.max(1);
    for attempt in 0..attempts {
        let answer = clean_answer(&gateway.complete(&request.clone().with_attempt(attempt))?);
        let reasons = validate_prompt(&answer, language, template.max_words);
        if reasons.is_empty() {
            return Ok(PromptRecord {
                sample_id: sample.id.clone(),
                customized_instruction: fuse(&answer, &sample.instruction),
                prompt_text: answer,
                strategy: Strategy::default(),
                validation: Validation { passed: true, reasons, attempts: attempt + 1 },
            });
        }
        log::debug!("{}: attempt {} rejected: {}", sample.id, attempt + 1, reasons.join("; "));
        last = (answer, reasons);
    }
    Ok(PromptRecord {
        sample_id: sample.id.clone(),
        customized_instruction: fuse(&last.0, &sample.instruction),
        prompt_text: last.0,
        strategy: Strategy::default(),
        validation: Validation { passed: false, reasons: last.1, attempts },
    })
}

fn customized(original: &Sample, record: &PromptRecord) -> Sample {
    let mut sample = original.clone();
    sample.instruction = record.customized_instruction.clone();
    sample.alchemist_prompt = Some(record.prompt_text.clone());
    sample.meta.insert("origin_source".into(), original.source.clone());
    sample.source = SOURCE_ALCHEMIST.into();
    sample.recount_tokens(&WhitespaceHeuristic);
    sample
}

/// Apply passed records. Augment appends customized copies under new ids;
/// replace substitutes the originals in place.
pub fn apply_customization(
    corpus: Vec<Sample>,
    records: &[PromptRecord],
    strategy: Strategy,
) -> Result<Vec<Sample>, AlchemistError> {
    let positions: BTreeMap<&str, usize> = corpus.iter().enumerate().map(|(i, s)| (s.id.as_str(), i)).collect();
    let mut planned = Vec::with_capacity(records.len());
    for record in records {
        let &pos = positions
            .get(record.sample_id.as_str())
            .ok_or_else(|| AlchemistError::UnknownSampleId(record.sample_id.clone()))?;
        if !record.validation.passed {
            return Err(AlchemistError::NotValidated(record.sample_id.clone()));
        }
        planned.push((pos, customized(&corpus[pos], record)));
    }

    match strategy {
        Strategy::Replace => {
            let mut corpus = corpus;
            for (pos, sample) in planned {
                corpus[pos] = sample;
            }
            Ok(corpus)
        }
        Strategy::Augment => {
            let mut taken: HashSet<String> = corpus.iter().map(|s| s.id.clone()).collect();
            let mut corpus = corpus;
            for (_, mut sample) in planned {
                let base = format!("{}-{}", sample.id, SOURCE_ALCHEMIST);
                let mut id = base.clone();
                let mut n = 1;
                while taken.contains(&id) {
                    n += 1;
                    id = format!("{base}{n}");
                }
                sample.meta.insert("origin_id".into(), sample.id.clone());
                sample.id = id.clone();
                taken.insert(id);
                corpus.push(sample);
            }
            Ok(corpus)
        }
    }
}

pub fn write_records(path: &Path, records: &[PromptRecord]) -> Result<(), AlchemistError> {
    let io = |e: std::io::Error| AlchemistError::Records { path: path.display().to_string(), message: e.to_string() };
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    for record in records {
        let line = serde_json::to_string(record).expect("records serialize");
        writeln!(out, "{line}").map_err(io)?;
    }
    out.flush().map_err(io)
}

pub fn read_records(path: &Path) -> Result<Vec<PromptRecord>, AlchemistError> {
    let err = |m: String| AlchemistError::Records { path: path.display().to_string(), message: m };
    let file = std::fs::File::open(path).map_err(|e| err(e.to_string()))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| err(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line).map_err(|e| err(format!("line {}: {e}", i + 1)))?);
    }
    Ok(records)
}
