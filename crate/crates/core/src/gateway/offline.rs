//! Rule-based answers to the pipeline's own prompt templates.
//!
//! Used by [`super::MockProvider::offline`] so that a full run needs no
//! network access. Output is a pure function of the request.

use crate::ingest::{display_name, extract_code_blocks, CodeBlock, Sample};
use crate::syntax;

use super::{ChatRequest, Purpose};

/// Text after `marker` up to the next `\n### ` heading (or end).
fn section<'a>(text: &'a str, marker: &str) -> Option<&'a str> {
    let start = text.find(marker)? + marker.len();
    let rest = &text[start..];
    let end = rest.find("\n### ").unwrap_or(rest.len());
    Some(rest[..end].trim())
}

const CONCEPTS: &[(&[&str], &str)] = &[
    (&["bellman", "dp[", "memo", "lru_cache", "dynamic programming", "tabulation"], "Dynamic Programming"),
    (&["heapq", "priority_queue", "priorityqueue", "heappush"], "a Priority Queue"),
    (&["deque", "bfs", "breadth"], "Breadth-First Search"),
    (&["dfs", "visited", "backtrack"], "Depth-First Search"),
    (&["mid =", "mid=", "binary search", "bisect"], "Binary Search"),
    (&["left, right", "while left", "two pointer"], "Two Pointers"),
    (&["recurs"], "Recursion"),
    (&["sorted(", ".sort(", "sort("], "Sorting"),
    (&["dict(", "hashmap", "unordered_map", "counter(", "{}"], "Hash Maps"),
    (&["import re", "regex", "re.match", "re.sub"], "Regular Expressions"),
    (&["class "], "Object-Oriented Design"),
];

fn concept_of(text: &str) -> Option<&'static str> {
    let lower = text.to_lowercase();
    CONCEPTS
        .iter()
        .find(|(keys, _)| keys.iter().any(|k| lower.contains(k)))
        .map(|(_, name)| *name)
}

fn alchemist_answer(user: &str) -> String {
    let instruction = section(user, "### Instruction").unwrap_or("");
    let response = section(user, "### Response").unwrap_or(user);
    let probe = Sample::new("probe", "offline", instruction, response);
    let language = probe.dominant_language().map(display_name).unwrap_or_else(|| "Python".into());
    let code = probe.code_text();
    match concept_of(&format!("{instruction}\n{code}")) {
        Some(concept) => {
            format!("Please generate {language} code for the following task and attempt to use the concept of {concept}.")
        }
        None => {
            let shape = if code.contains("class ") {
                "a class with clearly named methods"
            } else if code.contains("def ") || code.contains("function ") || code.contains("fn ") {
                "a single self-contained function"
            } else {
                "a short, readable script"
            };
            format!("Please generate {language} code for the following task, structured as {shape}.")
        }
    }
}

fn evolve_answer(user: &str) -> String {
    if let Some(given) = section(user, "#Given Prompt#:") {
        let given = given.split("#Rewritten Prompt#").next().unwrap_or(given).trim();
        let lower = user.to_lowercase();
        let addition = if lower.contains("explanation") {
            "Explain each step of your solution in plain words."
        } else if lower.contains("complexity") {
            "The solution must run in O(n log n) time or better and handle inputs of up to one million elements."
        } else {
            "Do not use built-in helper functions, validate the input, and raise a ValueError for invalid arguments."
        };
        return format!("{} {addition}", given.trim_end());
    }
    // answering an evolved instruction
    let name = user
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| w.len() > 3)
        .take(2)
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join("_");
    let name = if name.is_empty() { "solve".to_string() } else { name };
    format!(
        "The function below validates its input and processes it in a single pass.\n\n```python\ndef {name}(data):\n    if data is None:\n        raise ValueError(\"data must not be None\")\n    result = []\n    for item in data:\n        result.append(item)\n    return result\n```\n\nEach element is visited once, so the running time is linear in the input size."
    )
}

/// Deterministic clarity heuristic on a 0-10 scale.
fn clarity_score(code: &str) -> u8 {
    let mut score: i32 = 9;
    let lines: Vec<&str> = code.lines().collect();
    if !code.contains('#') && !code.contains("//") && !code.contains("\"\"\"") {
        score -= 2;
    }
    if lines.iter().any(|l| l.chars().count() > 100) {
        score -= 2;
    }
    let short_names = code
        .split(|c: char| !c.is_alphanumeric() && c != '_')
        .filter(|w| w.len() == 1 && w.chars().all(|c| c.is_ascii_alphabetic()))
        .count();
    if short_names > 6 {
        score -= 3;
    }
    if lines.len() > 60 {
        score -= 1;
    }
    score.clamp(0, 10) as u8
}

fn correctness_score(block: &CodeBlock) -> u8 {
    match syntax::check_syntax(&block.code, &block.language) {
        Ok(()) if block.code.contains("return") || block.code.contains("print") => 9,
        Ok(()) => 7,
        Err(syntax::SyntaxError::NoGrammar(_)) => 6,
        Err(_) => 3,
    }
}

fn review_answer(user: &str) -> String {
    let code_section = section(user, "### Code").unwrap_or(user);
    let Some(block) = extract_code_blocks(code_section).into_iter().next() else {
        return "I could not find any code to review.".to_string();
    };
    let correctness = correctness_score(&block);
    let clarity = clarity_score(&block.code);
    let mut suggestions = Vec::new();
    if clarity < 8 {
        suggestions.push("use descriptive names and add comments that state intent");
    }
    if correctness < 8 {
        suggestions.push("fix the syntax errors and add tests for edge cases");
    }
    if suggestions.is_empty() {
        suggestions.push("add a docstring and a couple of edge-case tests");
    }
    let comment = if block.language == "python" || block.language == "bash" { "#" } else { "//" };
    format!(
        "Correctness: {correctness}\nClarity: {clarity}\nSuggestions: {}.\nRefined Code:\n```{}\n{comment} Reviewed version.\n{}\n```",
        suggestions.join("; "),
        block.language,
        block.code
    )
}

fn judge_answer(user: &str) -> String {
    let response = section(user, "### Response").unwrap_or(user);
    let code: String = extract_code_blocks(response).iter().map(|b| b.code.as_str()).collect::<Vec<_>>().join("\n");
    format!("Clarity: {}", clarity_score(&code))
}

/// Answer a request the way the pipeline's templates expect.
pub fn offline_responder(request: &ChatRequest) -> String {
    let user = request.last_user();
    match request.tag {
        Purpose::Alchemist => alchemist_answer(user),
        Purpose::Evolve => evolve_answer(user),
        Purpose::Review => review_answer(user),
        Purpose::Judge => judge_answer(user),
    }
}
