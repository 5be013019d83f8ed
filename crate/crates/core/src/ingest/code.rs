//! Fenced code-block extraction and language tagging.

use serde::{Deserialize, Serialize};

/// A fenced code region inside a response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeBlock {
    /// Normalized language tag (declared on the fence, or detected).
    pub language: String,
    /// Whether `language` came from the fence info string.
    pub declared: bool,
    pub code: String,
    pub line_count: usize,
    /// Character offsets `[start, end)` of the whole fenced region, fences included.
    pub span: (usize, usize),
    /// False when the closing fence is missing and the block runs to end of text.
    pub terminated: bool,
}

impl CodeBlock {
    /// Build a block from raw code with no fence information.
    pub fn untagged(code: &str) -> Self {
        let mut block = CodeBlock {
            language: String::new(),
            declared: false,
            code: code.to_string(),
            line_count: line_count(code),
            span: (0, code.chars().count()),
            terminated: true,
        };
        block.language = detect_language(&block);
        block
    }

    pub fn tagged(language: &str, code: &str) -> Self {
        let mut block = Self::untagged(code);
        let tag = normalize_language_tag(language);
        if !tag.is_empty() {
            block.language = tag;
            block.declared = true;
        }
        block
    }
}

/// Newline-delimited line count; the empty string counts as one line.
pub fn line_count(code: &str) -> usize {
    code.split('\n').count()
}

fn fence_info(line: &str) -> Option<&str> {
    let indent = line.len() - line.trim_start_matches(' ').len();
    if indent > 3 {
        return None;
    }
    line[indent..].strip_prefix("```").map(str::trim)
}

/// Extract every triple-backtick fenced block from `text`, in order.
///
/// An opening fence must start a line (up to three spaces of indentation) and
/// may carry an info string; a closing fence is a line holding only backticks.
/// A block whose closing fence is missing extends to the end of `text` and is
/// returned with `terminated == false`.
pub fn extract_code_blocks(text: &str) -> Vec<CodeBlock> {
    let mut blocks = Vec::new();
    let mut open: Option<(usize, String, Vec<&str>)> = None;
    let mut offset = 0usize;

    for raw_line in text.split('\n') {
        let line_chars = raw_line.chars().count();
        let line = raw_line.strip_suffix('\r').unwrap_or(raw_line);
        match open.take() {
            None => {
                if let Some(info) = fence_info(line) {
                    let tag = info.split_whitespace().next().unwrap_or("").to_string();
                    open = Some((offset, tag, Vec::new()));
                }
            }
            Some((start, tag, mut lines)) => {
                let closes = fence_info(line).is_some_and(|rest| rest.is_empty());
                if closes {
                    blocks.push(finish_block(start, offset + line_chars, &tag, &lines, true));
                } else {
                    lines.push(line);
                    open = Some((start, tag, lines));
                }
            }
        }
        // +1 for the '\n' consumed by split
        offset += line_chars + 1;
    }

    if let Some((start, tag, lines)) = open {
        blocks.push(finish_block(start, text.chars().count(), &tag, &lines, false));
    }
    blocks
}

fn finish_block(start: usize, end: usize, tag: &str, lines: &[&str], terminated: bool) -> CodeBlock {
    let code = lines.join("\n");
    let normalized = normalize_language_tag(tag);
    let mut block = CodeBlock {
        declared: !normalized.is_empty(),
        language: normalized,
        line_count: line_count(&code),
        code,
        span: (start, end),
        terminated,
    };
    if !block.declared {
        block.language = detect_language(&block);
    }
    block
}

/// Map common fence spellings onto one canonical tag. Unknown tags are lowercased.
pub fn normalize_language_tag(tag: &str) -> String {
    let lower = tag.trim().trim_start_matches('{').trim_end_matches('}').to_ascii_lowercase();
    let canonical = match lower.as_str() {
        "py" | "python" | "python3" | "py3" | "ipython" => "python",
        "cpp" | "c++" | "cc" | "cxx" | "hpp" => "cpp",
        "c" | "h" => "c",
        "js" | "javascript" | "node" | "jsx" | "mjs" => "javascript",
        "ts" | "typescript" | "tsx" => "typescript",
        "java" => "java",
        "rs" | "rust" => "rust",
        "go" | "golang" => "go",
        "sh" | "bash" | "shell" | "zsh" | "console" => "bash",
        "cs" | "csharp" | "c#" => "csharp",
        "rb" | "ruby" => "ruby",
        "kt" | "kotlin" => "kotlin",
        "sql" | "mysql" | "postgresql" => "sql",
        "text" | "txt" | "plaintext" | "output" => "",
        other => other,
    };
    canonical.to_string()
}

/// Human-facing name of a normalized language tag.
pub fn display_name(tag: &str) -> String {
    match tag {
        "python" => "Python",
        "cpp" => "C++",
        "c" => "C",
        "java" => "Java",
        "javascript" => "JavaScript",
        "typescript" => "TypeScript",
        "rust" => "Rust",
        "go" => "Go",
        "bash" => "Bash",
        "sql" => "SQL",
        "csharp" => "C#",
        "ruby" => "Ruby",
        "kotlin" => "Kotlin",
        other => return other.to_string(),
    }
    .to_string()
}

/// Spellings that count as naming `tag` in free text (lowercase).
pub fn language_aliases(tag: &str) -> Vec<String> {
    let mut aliases = vec![tag.to_string(), display_name(tag).to_lowercase()];
    let extra: &[&str] = match tag {
        "cpp" => &["c++", "cplusplus"],
        "javascript" => &["js", "node.js"],
        "typescript" => &["ts"],
        "go" => &["golang"],
        "bash" => &["shell"],
        "csharp" => &["c#"],
        _ => &[],
    };
    aliases.extend(extra.iter().map(|s| s.to_string()));
    aliases.sort();
    aliases.dedup();
    aliases
}

/// Keyword patterns scored per language. Ties resolve to the earlier entry.
const HEURISTICS: &[(&str, &[(&str, u32)])] = &[
    (
        "python",
        &[
            ("def ", 3),
            ("import ", 1),
            ("from ", 1),
            ("elif ", 3),
            ("self.", 2),
            ("print(", 1),
            ("    return", 1),
            ("__init__", 3),
            ("None", 1),
            ("lambda ", 2),
        ],
    ),
    (
        "cpp",
        &[("#include", 2), ("std::", 3), ("cout", 3), ("cin >>", 3), ("template<", 3), ("using namespace", 3), ("vector<", 2)],
    ),
    ("c", &[("#include", 2), ("printf(", 2), ("malloc(", 2), ("int main(", 1), ("scanf(", 2)]),
    (
        "java",
        &[("public class", 4), ("System.out", 4), ("public static void", 3), ("private ", 1), ("import java", 4)],
    ),
    (
        "javascript",
        &[("function ", 2), ("const ", 2), ("let ", 1), ("=>", 2), ("console.log", 4), ("document.", 3), ("require(", 2)],
    ),
    ("rust", &[("fn ", 2), ("let mut", 4), ("println!", 4), ("impl ", 2), ("pub fn", 3), ("-> ", 1), ("::new(", 1)]),
    ("go", &[("package main", 4), ("func ", 3), ("fmt.", 4), (":= ", 2)]),
    ("sql", &[("SELECT ", 3), (" FROM ", 2), ("WHERE ", 2), ("INSERT INTO", 4), ("CREATE TABLE", 4)]),
    ("bash", &[("#!/bin/bash", 5), ("#!/bin/sh", 5), ("echo ", 2), ("fi\n", 2), ("$(", 1)]),
];

/// Language of a block: the declared fence tag when present, otherwise the
/// highest-scoring keyword heuristic, otherwise `"unknown"`.
pub fn detect_language(block: &CodeBlock) -> String {
    if block.declared && !block.language.is_empty() {
        return block.language.clone();
    }
    let code = &block.code;
    let mut best = ("unknown", 0u32);
    for (language, patterns) in HEURISTICS {
        let score: u32 = patterns
            .iter()
            .filter(|(pattern, _)| code.contains(pattern))
            .map(|(_, weight)| weight)
            .sum();
        if score > best.1 {
            best = (language, score);
        }
    }
    best.0.to_string()
}
