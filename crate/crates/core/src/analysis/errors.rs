//! Failure-log categorization by exception type.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::ingest::extract_code_blocks;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ErrorCategory {
    SyntaxError,
    NameError,
    ValueError,
    TypeError,
    OtherException,
    WrongAnswer,
    Timeout,
    NoCode,
}

impl ErrorCategory {
    pub const ALL: [ErrorCategory; 8] = [
        ErrorCategory::SyntaxError,
        ErrorCategory::NameError,
        ErrorCategory::ValueError,
        ErrorCategory::TypeError,
        ErrorCategory::OtherException,
        ErrorCategory::WrongAnswer,
        ErrorCategory::Timeout,
        ErrorCategory::NoCode,
    ];
}

/// One line of a run log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub id: String,
    pub response: String,
    #[serde(default)]
    pub exec_output: String,
    #[serde(default)]
    pub test_status: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorCaseTally {
    pub counts: BTreeMap<ErrorCategory, usize>,
    pub total: usize,
}

impl ErrorCaseTally {
    pub fn proportion(&self, category: ErrorCategory) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.counts.get(&category).copied().unwrap_or(0) as f64 / self.total as f64
        }
    }
}

fn exception_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?m)^\s*(?:[A-Za-z_][\w]*\.)*([A-Z][A-Za-z0-9_]*(?:Error|Exception|Exit|Interrupt|Iteration))\b")
            .expect("valid regex")
    })
}

fn is_timeout(record: &FailureRecord) -> bool {
    let status = record.test_status.as_deref().unwrap_or("").to_ascii_lowercase();
    let out = record.exec_output.to_ascii_lowercase();
    status == "timeout" || out.contains("timed out") || out.contains("timeouterror") || out.contains("timeout after")
}

fn is_failed_test(record: &FailureRecord) -> bool {
    matches!(
        record.test_status.as_deref().map(str::to_ascii_lowercase).as_deref(),
        Some("failed" | "fail" | "wrong_answer" | "wrong answer")
    )
}

/// Category of one failure, decided in order: no code, timeout, the last
/// exception named in the output, then a failed test without an exception.
pub fn categorize(record: &FailureRecord) -> ErrorCategory {
    if extract_code_blocks(&record.response).is_empty() {
        return ErrorCategory::NoCode;
    }
    if is_timeout(record) {
        return ErrorCategory::Timeout;
    }
    // the final exception line of a traceback names the raised error
    let last = exception_pattern().captures_iter(&record.exec_output).last().map(|c| c[1].to_string());
    match last.as_deref() {
        Some("SyntaxError" | "IndentationError" | "TabError") => ErrorCategory::SyntaxError,
        Some("NameError" | "UnboundLocalError") => ErrorCategory::NameError,
        Some("ValueError") => ErrorCategory::ValueError,
        Some("TypeError") => ErrorCategory::TypeError,
        Some("AssertionError") => ErrorCategory::WrongAnswer,
        Some(_) => ErrorCategory::OtherException,
        None if is_failed_test(record) => ErrorCategory::WrongAnswer,
        None => ErrorCategory::OtherException,
    }
}

pub fn categorize_errors<'a>(log: impl IntoIterator<Item = &'a FailureRecord>) -> ErrorCaseTally {
    let mut counts: BTreeMap<ErrorCategory, usize> = ErrorCategory::ALL.iter().map(|c| (*c, 0)).collect();
    let mut total = 0;
    for record in log {
        *counts.entry(categorize(record)).or_default() += 1;
        total += 1;
    }
    ErrorCaseTally { counts, total }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(response: &str, output: &str, status: Option<&str>) -> FailureRecord {
        FailureRecord {
            id: "x".into(),
            response: response.into(),
            exec_output: output.into(),
            test_status: status.map(String::from),
        }
    }

    const CODE: &str = "```python\nx = 1\n```";

    #[test]
    fn categories() {
        assert_eq!(categorize(&rec(CODE, "  File \"m.py\", line 1\nSyntaxError: invalid syntax", None)), ErrorCategory::SyntaxError);
        assert_eq!(categorize(&rec("no code", "SyntaxError", None)), ErrorCategory::NoCode);
        assert_eq!(categorize(&rec(CODE, "Traceback ...\nAssertionError", Some("failed"))), ErrorCategory::WrongAnswer);
        assert_eq!(categorize(&rec(CODE, "", Some("failed"))), ErrorCategory::WrongAnswer);
        assert_eq!(categorize(&rec(CODE, "", Some("timeout"))), ErrorCategory::Timeout);
        assert_eq!(categorize(&rec(CODE, "IndentationError: unexpected indent", None)), ErrorCategory::SyntaxError);
        assert_eq!(categorize(&rec(CODE, "KeyError: 'a'", None)), ErrorCategory::OtherException);
        assert_eq!(categorize(&rec(CODE, "", None)), ErrorCategory::OtherException);
        assert_eq!(
            categorize(&rec(CODE, "During handling:\nKeyError: 1\n...\nValueError: bad", None)),
            ErrorCategory::ValueError
        );
    }

    #[test]
    fn tally_partitions() {
        let log = vec![rec(CODE, "NameError: x", None), rec("none", "", None), rec(CODE, "TypeError: y", None)];
        let t = categorize_errors(&log);
        assert_eq!(t.total, 3);
        assert_eq!(t.counts.values().sum::<usize>(), 3);
        assert_eq!(t.counts[&ErrorCategory::NameError], 1);
        assert!((t.proportion(ErrorCategory::NoCode) - 1.0 / 3.0).abs() < 1e-12);
    }
}
