//! Grammar-based parsing for the languages with a bundled tree-sitter grammar.
//!
//! Parsed code is reduced to a [`LabeledTree`]: named nodes plus keyword and
//! operator tokens, with comments and bracket punctuation dropped. Identifiers
//! are renamed to positional tokens (`id0`, `id1`, ... in order of first
//! appearance) so that two programs differing only by renaming produce the
//! same tree.

use std::collections::HashMap;

use thiserror::Error;
use tree_sitter::{Language, Node, Parser};

use crate::decontam::LabeledTree;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SyntaxError {
    #[error("no grammar registered for `{0}`")]
    NoGrammar(String),
    #[error("{language} source does not parse")]
    ParseFailure { language: String },
}

pub const SUPPORTED_LANGUAGES: &[&str] = &["python", "c", "cpp", "java", "javascript", "rust", "go"];

pub fn grammar(language: &str) -> Option<Language> {
    let lang = match language {
        "python" => tree_sitter_python::LANGUAGE,
        "c" => tree_sitter_c::LANGUAGE,
        "cpp" => tree_sitter_cpp::LANGUAGE,
        "java" => tree_sitter_java::LANGUAGE,
        "javascript" => tree_sitter_javascript::LANGUAGE,
        "rust" => tree_sitter_rust::LANGUAGE,
        "go" => tree_sitter_go::LANGUAGE,
        _ => return None,
    };
    Some(lang.into())
}

pub fn has_grammar(language: &str) -> bool {
    grammar(language).is_some()
}

fn parse_tree(code: &str, language: &str) -> Result<tree_sitter::Tree, SyntaxError> {
    let grammar = grammar(language).ok_or_else(|| SyntaxError::NoGrammar(language.to_string()))?;
    let mut parser = Parser::new();
    parser.set_language(&grammar).expect("bundled grammar is ABI compatible");
    let tree = parser
        .parse(code, None)
        .ok_or_else(|| SyntaxError::ParseFailure { language: language.to_string() })?;
    if tree.root_node().has_error() {
        return Err(SyntaxError::ParseFailure { language: language.to_string() });
    }
    Ok(tree)
}

/// `Ok(())` when `code` parses cleanly under the grammar for `language`.
pub fn check_syntax(code: &str, language: &str) -> Result<(), SyntaxError> {
    parse_tree(code, language).map(|_| ())
}

const FUNCTION_KINDS: &[&str] = &[
    "function_definition",
    "function_declaration",
    "function_expression",
    "generator_function_declaration",
    "arrow_function",
    "method_definition",
    "method_declaration",
    "constructor_declaration",
    "function_item",
];

/// Whether the code defines at least one function or method.
pub fn defines_function(code: &str, language: &str) -> Result<bool, SyntaxError> {
    let tree = parse_tree(code, language)?;
    let mut cursor = tree.walk();
    let mut stack = vec![tree.root_node()];
    while let Some(node) = stack.pop() {
        if FUNCTION_KINDS.contains(&node.kind()) {
            return Ok(true);
        }
        stack.extend(node.children(&mut cursor));
    }
    Ok(false)
}

fn is_identifier(kind: &str) -> bool {
    kind.ends_with("identifier")
}

fn is_skipped(node: &Node) -> bool {
    let kind = node.kind();
    if kind.contains("comment") {
        return true;
    }
    if node.is_named() {
        return false;
    }
    // keep keywords and operators, drop brackets, separators and quotes
    !kind.chars().any(|c| c.is_alphanumeric() || "+-*/%=<>!&|^~?@".contains(c))
}

/// A leading string statement in a Python module or block.
fn is_docstring(node: &Node) -> bool {
    node.kind() == "expression_statement"
        && node.named_child_count() == 1
        && node.named_child(0).is_some_and(|c| c.kind() == "string")
}

/// Python type hints: parameter and return annotations.
fn is_annotation(parent: &Node, node: &Node) -> bool {
    (node.kind() == "type" && node.is_named()) || (node.kind() == "->" && parent.kind() == "function_definition")
}

struct Canonicalizer<'a> {
    source: &'a [u8],
    names: HashMap<String, usize>,
}

impl Canonicalizer<'_> {
    fn label(&mut self, node: &Node) -> String {
        let kind = node.kind();
        if node.child_count() > 0 || !node.is_named() {
            return kind.to_string();
        }
        let text = node.utf8_text(self.source).unwrap_or("");
        if is_identifier(kind) {
            let next = self.names.len();
            let idx = *self.names.entry(text.to_string()).or_insert(next);
            return format!("id{idx}");
        }
        let text: String = text.chars().take(32).collect();
        format!("{kind}:{text}")
    }

    fn build(&mut self, node: Node) -> LabeledTree {
        let label = self.label(&node);
        let mut cursor = node.walk();
        let kept: Vec<Node> = node.children(&mut cursor).filter(|c| !is_skipped(c)).collect();
        let mut children: Vec<LabeledTree> = kept
            .iter()
            .enumerate()
            .filter(|(i, c)| !(*i == 0 && is_docstring(c)) && !is_annotation(&node, c))
            .map(|(_, c)| self.build(*c))
            .collect();
        // `x: int` compares equal to `x`
        if node.kind() == "typed_parameter" && children.len() == 1 {
            return children.pop().expect("one child");
        }
        LabeledTree::new(label, children)
    }
}

/// Parse `code` into a labeled tree with identifiers canonicalized.
pub fn canonical_tree(code: &str, language: &str) -> Result<LabeledTree, SyntaxError> {
    let tree = parse_tree(code, language)?;
    let mut canon = Canonicalizer { source: code.as_bytes(), names: HashMap::new() };
    Ok(canon.build(tree.root_node()))
}

/// Leaf labels of the canonical tree, in source order.
pub fn canonical_tokens(code: &str, language: &str) -> Result<Vec<String>, SyntaxError> {
    let tree = canonical_tree(code, language)?;
    let mut out = Vec::new();
    fn leaves(t: &LabeledTree, out: &mut Vec<String>) {
        if t.children.is_empty() {
            out.push(t.label.clone());
        }
        for c in &t.children {
            leaves(c, out);
        }
    }
    leaves(&tree, &mut out);
    Ok(out)
}
