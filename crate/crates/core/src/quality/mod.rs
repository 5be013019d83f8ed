//! Low-quality sample detection and the keep/remove/recycle policy.
//!
//! Only responses that are too short and code-free, or whose code fails to
//! compile or fails its tests, are removed. Every other flagged sample is
//! recycled as a counterexample for the data-filtering task.

mod exec;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::gateway::{ChatRequest, Gateway, Purpose};
use crate::ingest::Sample;
use crate::syntax::{self, SyntaxError};

pub use exec::{
    execute_code, CodeExecutor, ExecStatus, ExecutionResult, ExecutorConfig, ExecutorRegistry, ExecutorSpec,
    ResourceLimits,
};

/// Meta key holding a JSON array of assertion strings for a sample.
pub const META_TESTS: &str = "tests";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum QualityFlag {
    TooShortNoCode,
    CompileFailure,
    TestCaseFailure,
    PoorClarity,
    NotFunctionForm,
    NotebookForm,
    ExcessiveProse,
    TooLong,
    InsufficientCode,
}

impl QualityFlag {
    pub const ALL: [QualityFlag; 9] = [
        QualityFlag::TooShortNoCode,
        QualityFlag::CompileFailure,
        QualityFlag::TestCaseFailure,
        QualityFlag::PoorClarity,
        QualityFlag::NotFunctionForm,
        QualityFlag::NotebookForm,
        QualityFlag::ExcessiveProse,
        QualityFlag::TooLong,
        QualityFlag::InsufficientCode,
    ];

    /// Flags that remove a sample outright.
    pub fn is_removal_grade(self) -> bool {
        matches!(self, QualityFlag::TooShortNoCode | QualityFlag::CompileFailure | QualityFlag::TestCaseFailure)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Disposition {
    Keep,
    Remove,
    Recycle,
}

impl Disposition {
    pub fn for_flags(flags: &BTreeSet<QualityFlag>) -> Self {
        if flags.iter().any(|f| f.is_removal_grade()) {
            Disposition::Remove
        } else if flags.is_empty() {
            Disposition::Keep
        } else {
            Disposition::Recycle
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityVerdict {
    pub flags: BTreeSet<QualityFlag>,
    pub evidence: BTreeMap<QualityFlag, String>,
    /// Checks that could not be performed (missing executor, judge failures).
    #[serde(default)]
    pub notes: Vec<String>,
    pub disposition: Disposition,
}

impl QualityVerdict {
    pub fn new(evidence: BTreeMap<QualityFlag, String>, notes: Vec<String>) -> Self {
        let flags: BTreeSet<QualityFlag> = evidence.keys().copied().collect();
        let disposition = Disposition::for_flags(&flags);
        QualityVerdict { flags, evidence, notes, disposition }
    }

    pub fn clean() -> Self {
        Self::new(BTreeMap::new(), Vec::new())
    }

    /// Add a flag and recompute the disposition.
    pub fn add_flag(&mut self, flag: QualityFlag, evidence: impl Into<String>) {
        self.flags.insert(flag);
        self.evidence.insert(flag, evidence.into());
        self.disposition = Disposition::for_flags(&self.flags);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    /// Responses shorter than this with no code block are "too short, no code".
    pub min_response_chars: usize,
    pub max_response_chars: usize,
    /// Minimum share of response characters inside code blocks.
    pub min_code_fraction: f64,
    /// Maximum prose characters before the first code block.
    pub max_prose_prefix_chars: usize,
    /// Judge clarity scores below this set PoorClarity.
    pub clarity_threshold: u8,
    /// Run the compile check on code blocks.
    pub check_compile: bool,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            min_response_chars: 120,
            max_response_chars: 12_000,
            min_code_fraction: 0.1,
            max_prose_prefix_chars: 1500,
            clarity_threshold: 5,
            check_compile: true,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<(), (String, String)> {
        if !(0.0..=1.0).contains(&self.min_code_fraction) {
            return Err(("min_code_fraction".into(), "must lie in [0, 1]".into()));
        }
        if self.max_response_chars < self.min_response_chars {
            return Err(("max_response_chars".into(), "must be >= min_response_chars".into()));
        }
        if self.clarity_threshold > 10 {
            return Err(("clarity_threshold".into(), "must lie in [0, 10]".into()));
        }
        Ok(())
    }
}

fn notebook_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r#"(?m)^\s*(In|Out)\s?\[\s*\d*\s*\]:?|"cell_type"\s*:"#).expect("valid regex"))
}

fn function_request_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\b(function|functions|def|method)\b").expect("valid regex"))
}

fn function_definition_fallback() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?m)^\s*(def |async def |function |fn |pub fn |func )|=>").expect("valid regex"))
}

fn judge_score(text: &str) -> Option<u8> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"(?i)clarity\s*[:=]\s*(\d{1,2})").expect("valid regex"));
    re.captures(text).and_then(|c| c[1].parse().ok()).filter(|&s| s <= 10)
}

/// Assertion strings attached to a sample under [`META_TESTS`].
pub fn sample_tests(sample: &Sample) -> Option<Vec<String>> {
    sample.meta.get(META_TESTS).and_then(|raw| serde_json::from_str::<Vec<String>>(raw).ok())
}

/// Build the clarity-judge request for a sample.
pub fn judge_request(sample: &Sample) -> ChatRequest {
    ChatRequest::new(
        Purpose::Judge,
        format!(
            "Rate the clarity of the code in the following response on a scale from 0 to 10, where 10 is perfectly clear. Answer with a single line of the form `Clarity: <0-10>`.\n\n### Response\n{}",
            sample.response()
        ),
    )
    .with_max_output(16)
}

/// Classify a sample against every cleaning rule.
///
/// All rules except PoorClarity are deterministic; PoorClarity is decided only
/// when `judge` is supplied. Checks that cannot run are recorded in `notes` and
/// never raise a flag.
pub fn classify_quality(
    sample: &Sample,
    config: &FilterConfig,
    executor: &dyn CodeExecutor,
    judge: Option<&Gateway>,
) -> QualityVerdict {
    let mut evidence = BTreeMap::new();
    let mut notes = Vec::new();
    let response = sample.response();
    let response_chars = response.chars().count();
    let blocks = sample.code_blocks();

    if blocks.is_empty() && response_chars < config.min_response_chars {
        evidence.insert(
            QualityFlag::TooShortNoCode,
            format!("response has {response_chars} characters (< {}) and no code block", config.min_response_chars),
        );
    }

    if response_chars > config.max_response_chars {
        evidence.insert(
            QualityFlag::TooLong,
            format!("response has {response_chars} characters (> {})", config.max_response_chars),
        );
    }

    let code_chars: usize = blocks.iter().map(|b| b.code.chars().count()).sum();
    if !evidence.contains_key(&QualityFlag::TooShortNoCode) && response_chars > 0 {
        let fraction = code_chars as f64 / response_chars as f64;
        if blocks.is_empty() {
            evidence.insert(QualityFlag::InsufficientCode, "response contains no code block".to_string());
        } else if fraction < config.min_code_fraction {
            evidence.insert(
                QualityFlag::InsufficientCode,
                format!("code is {:.1}% of the response (< {:.1}%)", fraction * 100.0, config.min_code_fraction * 100.0),
            );
        }
    }

    if let Some(first) = blocks.first() {
        let prefix = response.chars().take(first.span.0).filter(|c| !c.is_whitespace()).count();
        if prefix > config.max_prose_prefix_chars {
            evidence.insert(
                QualityFlag::ExcessiveProse,
                format!("{prefix} prose characters precede the first code block (> {})", config.max_prose_prefix_chars),
            );
        }
    }

    if let Some(m) = notebook_pattern().find(response) {
        evidence.insert(QualityFlag::NotebookForm, format!("notebook cell marker `{}`", m.as_str().trim()));
    }

    if !blocks.is_empty() {
        if let Some(m) = function_request_pattern().find(&sample.instruction) {
            let mut any_parsed = false;
            let mut defines = false;
            for block in blocks {
                match syntax::defines_function(&block.code, &block.language) {
                    Ok(found) => {
                        any_parsed = true;
                        defines |= found;
                    }
                    Err(SyntaxError::NoGrammar(_)) => {
                        defines |= function_definition_fallback().is_match(&block.code);
                        any_parsed = true;
                    }
                    Err(SyntaxError::ParseFailure { .. }) => {
                        defines |= function_definition_fallback().is_match(&block.code);
                    }
                }
            }
            if any_parsed && !defines {
                evidence.insert(
                    QualityFlag::NotFunctionForm,
                    format!("instruction asks for a `{}` but no code block defines one", m.as_str()),
                );
            }
        }
    }

    if config.check_compile {
        for (i, block) in blocks.iter().enumerate() {
            if !executor.supports(&block.language) {
                notes.push(format!("block {i} ({}): compile check withheld, no executor", block.language));
                continue;
            }
            let result = executor.execute(block, None);
            match result.status {
                ExecStatus::CompileError => {
                    evidence.entry(QualityFlag::CompileFailure).or_insert_with(|| {
                        format!("block {i} ({}) does not compile: {}", block.language, first_line(&result.stderr_excerpt))
                    });
                }
                ExecStatus::ExecutorUnavailable => notes.push(format!("block {i}: {}", result.exit_info)),
                ExecStatus::Timeout => notes.push(format!("block {i}: compile check {}", result.exit_info)),
                _ => {}
            }
        }
    }

    if let Some(tests) = sample_tests(sample).filter(|t| !t.is_empty()) {
        let target = sample
            .dominant_language()
            .and_then(|lang| blocks.iter().filter(|b| b.language == lang).max_by_key(|b| b.line_count));
        match target {
            Some(block) if executor.supports(&block.language) && !evidence.contains_key(&QualityFlag::CompileFailure) => {
                let result = executor.execute(block, Some(&tests));
                match result.status {
                    ExecStatus::TestFailure | ExecStatus::RuntimeError | ExecStatus::Timeout => {
                        evidence.insert(
                            QualityFlag::TestCaseFailure,
                            format!("{:?} on {} test(s): {}", result.status, tests.len(), first_line(&result.stderr_excerpt)),
                        );
                    }
                    ExecStatus::ExecutorUnavailable => notes.push(format!("tests withheld: {}", result.exit_info)),
                    _ => {}
                }
            }
            Some(block) if !executor.supports(&block.language) => {
                notes.push(format!("tests withheld: no executor for {}", block.language))
            }
            _ => {}
        }
    }

    if let Some(gateway) = judge {
        if !blocks.is_empty() {
            match gateway.complete(&judge_request(sample)) {
                Ok(answer) => match judge_score(&answer) {
                    Some(score) if score < config.clarity_threshold => {
                        evidence.insert(
                            QualityFlag::PoorClarity,
                            format!("judge clarity {score}/10 (< {})", config.clarity_threshold),
                        );
                    }
                    Some(_) => {}
                    None => notes.push("judge answer had no clarity score".into()),
                },
                Err(e) => notes.push(format!("judge unavailable: {e}")),
            }
        }
    }

    QualityVerdict::new(evidence, notes)
}

fn first_line(text: &str) -> String {
    // python tracebacks put the error on the last line
    text.lines().rev().find(|l| !l.trim().is_empty()).unwrap_or("").trim().to_string()
}

/// Samples split by disposition.
#[derive(Debug, Clone, Default)]
pub struct Partition {
    pub kept: Vec<Sample>,
    pub removed: Vec<(Sample, QualityVerdict)>,
    pub recycled: Vec<(Sample, QualityVerdict)>,
}

impl Partition {
    pub fn total(&self) -> usize {
        self.kept.len() + self.removed.len() + self.recycled.len()
    }
}

/// Route each sample by its verdict's disposition, preserving input order.
pub fn apply_removal_policy(verdicts: impl IntoIterator<Item = (Sample, QualityVerdict)>) -> Partition {
    let mut out = Partition::default();
    for (sample, verdict) in verdicts {
        match verdict.disposition {
            Disposition::Keep => out.kept.push(sample),
            Disposition::Remove => out.removed.push((sample, verdict)),
            Disposition::Recycle => out.recycled.push((sample, verdict)),
        }
    }
    out
}
