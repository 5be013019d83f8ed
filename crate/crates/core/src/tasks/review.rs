use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::gateway::{ChatRequest, Gateway, Purpose};
use crate::ingest::{extract_code_blocks, CodeBlock, Sample};

use super::{TaskError, TaskKind, TaskRecord};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewRecord {
    pub sample_id: String,
    pub correctness: u8,
    pub clarity: u8,
    pub suggestions: String,
    pub refined_code: String,
    pub selected: bool,
}

/// Keep a review when the average score is above 8 or below 6, or either
/// score is 4 or lower.
pub fn is_selected(correctness: u8, clarity: u8) -> bool {
    // avg > 8 <=> sum > 16, avg < 6 <=> sum < 12
    let sum = correctness as u32 + clarity as u32;
    !(12..=16).contains(&sum) || correctness.min(clarity) <= 4
}

/// Review prompt with labeled answer lines. `{language}` and `{code}` are substituted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReviewTemplate {
    pub user: String,
    pub max_attempts: u32,
}

impl Default for ReviewTemplate {
    fn default() -> Self {
        ReviewTemplate {
            user: "You are a senior software engineer. Review the code below. Score its correctness and its clarity separately on a scale from 0 to 10, give concrete suggestions for improvement, and present the refined code. Answer in exactly this format:\nCorrectness: <0-10>\nClarity: <0-10>\nSuggestions: <text>\nRefined Code:\n<fenced code block>\n\n### Code\n```{language}\n{code}\n```".into(),
            max_attempts: 3,
        }
    }
}

fn score_pattern(label: &str) -> Regex {
    Regex::new(&format!(r"(?i)\b{label}\s*(?:score)?\s*[:=]\s*(\d+)")).expect("valid regex")
}

fn patterns() -> &'static (Regex, Regex, Regex, Regex) {
    static RE: OnceLock<(Regex, Regex, Regex, Regex)> = OnceLock::new();
    RE.get_or_init(|| {
        (
            score_pattern("correctness"),
            score_pattern("clarity"),
            Regex::new(r"(?is)\bsuggestions?\s*:\s*(.*?)\s*(?:refined\s+code\s*:|\z)").expect("valid regex"),
            Regex::new(r"(?is)refined\s+code\s*:\s*(.*)\z").expect("valid regex"),
        )
    })
}

/// Parse `(correctness, clarity, suggestions, refined_code)` from labeled lines.
pub fn parse_review(text: &str) -> Result<(u8, u8, String, String), String> {
    let (correctness_re, clarity_re, suggestions_re, refined_re) = patterns();
    let score = |re: &Regex, label: &str| -> Result<u8, String> {
        let caps = re.captures(text).ok_or_else(|| format!("missing {label} score"))?;
        let value: u32 = caps[1].parse().map_err(|_| format!("bad {label} score"))?;
        if value > 10 {
            return Err(format!("{label} score {value} outside 0-10"));
        }
        Ok(value as u8)
    };
    let correctness = score(correctness_re, "correctness")?;
    let clarity = score(clarity_re, "clarity")?;
    let suggestions = suggestions_re.captures(text).map(|c| c[1].trim().to_string()).unwrap_or_default();
    let refined = refined_re
        .captures(text)
        .map(|c| {
            let rest = &c[1];
            extract_code_blocks(rest).into_iter().next().map(|b| b.code).unwrap_or_else(|| rest.trim().to_string())
        })
        .unwrap_or_default();
    Ok((correctness, clarity, suggestions, refined))
}

fn review_target(sample: &Sample) -> Option<&CodeBlock> {
    let language = sample.dominant_language()?;
    sample.code_blocks().iter().filter(|b| b.language == language).max_by_key(|b| b.line_count)
}

/// Ask for a structured review of the sample's main code block. Unparseable
/// answers are regenerated up to `template.max_attempts` times.
pub fn synth_code_review(sample: &Sample, gateway: &Gateway, template: &ReviewTemplate) -> Result<ReviewRecord, TaskError> {
    let block = review_target(sample).ok_or_else(|| TaskError::NoCode(sample.id.clone()))?;
    let user = template.user.replace("{language}", &block.language).replace("{code}", &block.code);
    let request = ChatRequest::new(Purpose::Review, user).with_max_output(2048);
    let attempts = template.max_attempts.max(1);
    let mut reason = String::new();
    for attempt in 0..attempts {
        let answer = gateway.complete(&request.clone().with_attempt(attempt))?;
        match parse_review(&answer) {
            Ok((correctness, clarity, suggestions, refined_code)) => {
                return Ok(ReviewRecord {
                    sample_id: sample.id.clone(),
                    correctness,
                    clarity,
                    suggestions,
                    refined_code,
                    selected: is_selected(correctness, clarity),
                })
            }
            Err(e) => reason = e,
        }
    }
    Err(TaskError::ParseFailure { id: sample.id.clone(), attempts, reason })
}

/// Turn a review into a code-review task sample.
pub fn review_task(review: &ReviewRecord, sample: &Sample) -> Result<TaskRecord, TaskError> {
    let block = review_target(sample).ok_or_else(|| TaskError::NoCode(sample.id.clone()))?;
    let instruction = format!(
        "Review the following code. Score its correctness and its clarity from 0 to 10, suggest improvements, and present the refined code.\n\n### Code\n```{}\n{}\n```",
        block.language, block.code
    );
    let refined = if review.refined_code.is_empty() { &block.code } else { &review.refined_code };
    let response = format!(
        "Correctness: {}\nClarity: {}\nSuggestions: {}\nRefined Code:\n```{}\n{}\n```",
        review.correctness, review.clarity, review.suggestions, block.language, refined
    );
    Ok(TaskRecord {
        id: format!("task-review-{}", sample.id),
        kind: TaskKind::CodeReview,
        instruction,
        response,
        origin_ids: vec![sample.id.clone()],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::MockProvider;
    use std::sync::Arc;

    fn code_sample() -> Sample {
        Sample::new("s1", "src", "add", "```python\ndef add(a, b):\n    return a + b\n```")
    }

    #[test]
    fn parses_inline_scores() {
        let (c, cl, s, r) = parse_review("correctness: 9, clarity: 9, suggestions: none").unwrap();
        assert_eq!((c, cl), (9, 9));
        assert_eq!(s, "none");
        assert_eq!(r, "");
    }

    #[test]
    fn parses_labeled_lines() {
        let text = "Correctness: 7\nClarity: 8\nSuggestions: rename x.\nRefined Code:\n```python\ny = 1\n```";
        assert_eq!(parse_review(text).unwrap(), (7, 8, "rename x.".into(), "y = 1".into()));
        assert!(parse_review("Correctness: 11\nClarity: 2").is_err());
        assert!(parse_review("looks fine").is_err());
    }

    #[test]
    fn selection_examples() {
        assert!(!is_selected(7, 8));
        assert!(is_selected(9, 4));
        assert!(is_selected(9, 9));
        assert!(is_selected(5, 6));
        assert!(!is_selected(6, 6));
        assert!(!is_selected(8, 8));
    }

    #[test]
    fn selection_truth_table() {
        for c in 0..=10u8 {
            for cl in 0..=10u8 {
                let avg = (c as f64 + cl as f64) / 2.0;
                let expected = !(6.0..=8.0).contains(&avg) || c <= 4 || cl <= 4;
                assert_eq!(is_selected(c, cl), expected, "({c}, {cl})");
            }
        }
    }

    #[test]
    fn review_via_mock_and_retry() {
        let gateway =
            Gateway::new(Arc::new(MockProvider::sequence(vec!["no scores".into(), "correctness: 9, clarity: 9".into()])));
        let rec = synth_code_review(&code_sample(), &gateway, &ReviewTemplate::default()).unwrap();
        assert_eq!((rec.correctness, rec.clarity, rec.selected), (9, 9, true));

        let gateway = Gateway::new(Arc::new(MockProvider::sequence(vec!["?".into(); 3])));
        let err = synth_code_review(&code_sample(), &gateway, &ReviewTemplate::default()).unwrap_err();
        assert!(matches!(err, TaskError::ParseFailure { attempts: 3, .. }));
    }

    #[test]
    fn offline_review_round_trip() {
        let gateway = Gateway::new(Arc::new(MockProvider::offline()));
        let rec = synth_code_review(&code_sample(), &gateway, &ReviewTemplate::default()).unwrap();
        assert_eq!((rec.correctness, rec.clarity), (9, 7));
        let task = review_task(&rec, &code_sample()).unwrap();
        task.validate().unwrap();
        assert!(task.response.contains("Refined Code:\n```python\n"));
    }

    #[test]
    fn no_code_is_error() {
        let gateway = Gateway::new(Arc::new(MockProvider::offline()));
        let s = Sample::new("p", "src", "q", "just prose");
        assert!(matches!(synth_code_review(&s, &gateway, &ReviewTemplate::default()), Err(TaskError::NoCode(_))));
    }
}
