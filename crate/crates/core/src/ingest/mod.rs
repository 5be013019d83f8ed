//! Loading heterogeneous source datasets into [`Sample`]s.

mod code;
mod sample;
mod tokens;

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use serde_json::Value;
use thiserror::Error;

pub use code::{detect_language, display_name, extract_code_blocks, language_aliases, line_count, normalize_language_tag, CodeBlock};
pub use sample::{Sample, SampleRecord, META_UNTERMINATED_FENCE};
pub use tokens::{estimate_tokens, Tokenizer, TokenizerError, TokenizerRegistry, WhitespaceHeuristic, WHITESPACE_X13};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("unknown input format `{0}`")]
    UnknownFormat(String),
    #[error("line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Supported input layouts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    /// `{"instruction": .., "output": .., "id"?: .., "meta"?: {..}}`
    InstructionOutput,
    /// `{"messages": [{"role": .., "content": ..}, ..]}`; the last user turn
    /// becomes the instruction and the last assistant turn the response.
    Messages,
    /// The canonical record written by [`write_corpus`].
    Canonical,
}

impl FromStr for Format {
    type Err = IngestError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "jsonl-instruction-output" => Ok(Format::InstructionOutput),
            "jsonl-messages" => Ok(Format::Messages),
            "jsonl-canonical" => Ok(Format::Canonical),
            other => Err(IngestError::UnknownFormat(other.to_string())),
        }
    }
}

impl Format {
    pub fn id(&self) -> &'static str {
        match self {
            Format::InstructionOutput => "jsonl-instruction-output",
            Format::Messages => "jsonl-messages",
            Format::Canonical => "jsonl-canonical",
        }
    }
}

/// Streaming reader yielding one `Sample` or one skip per input line.
///
/// Malformed lines are yielded as `Err(MalformedRecord)` and counted; iteration
/// continues past them. Blank lines are ignored.
pub struct LoadStream<R> {
    lines: std::io::Lines<R>,
    line_no: usize,
    source: String,
    format: Format,
    tokenizer: Arc<dyn Tokenizer>,
    seen_ids: HashSet<String>,
    skipped: usize,
    loaded: usize,
}

impl<R: BufRead> LoadStream<R> {
    pub fn new(reader: R, source: &str, format: Format, tokenizer: Arc<dyn Tokenizer>) -> Self {
        LoadStream {
            lines: reader.lines(),
            line_no: 0,
            source: source.to_string(),
            format,
            tokenizer,
            seen_ids: HashSet::new(),
            skipped: 0,
            loaded: 0,
        }
    }

    pub fn skipped(&self) -> usize {
        self.skipped
    }

    pub fn loaded(&self) -> usize {
        self.loaded
    }

    fn parse_line(&self, line: &str) -> Result<Sample, String> {
        let value: Value = serde_json::from_str(line).map_err(|e| format!("invalid JSON: {e}"))?;
        let Value::Object(mut obj) = value else {
            return Err("record is not a JSON object".into());
        };
        if self.format == Format::Canonical {
            let record: SampleRecord =
                serde_json::from_value(Value::Object(obj)).map_err(|e| format!("invalid canonical record: {e}"))?;
            return Ok(record.into());
        }

        let (instruction, response) = match self.format {
            Format::InstructionOutput => {
                let instruction = take_string(&mut obj, "instruction")?;
                let output = take_string(&mut obj, "output")?;
                (instruction, output)
            }
            _ => take_messages(&mut obj)?,
        };

        let id = match obj.remove("id") {
            None | Some(Value::Null) => format!("{}-{:06}", self.source, self.line_no),
            Some(Value::String(s)) => s,
            Some(other) => other.to_string(),
        };

        let mut meta = BTreeMap::new();
        if let Some(explicit) = obj.remove("meta") {
            match explicit {
                Value::Object(m) => {
                    for (k, v) in m {
                        meta.insert(k, value_to_meta(v));
                    }
                }
                Value::Null => {}
                _ => return Err("`meta` must be an object".into()),
            }
        }
        for (k, v) in obj {
            meta.insert(k, value_to_meta(v));
        }

        let mut sample = Sample::new(id, self.source.clone(), instruction, response);
        sample.meta.extend(meta);
        sample.recount_tokens(self.tokenizer.as_ref());
        Ok(sample)
    }
}

fn value_to_meta(v: Value) -> String {
    match v {
        Value::String(s) => s,
        other => other.to_string(),
    }
}

fn take_string(obj: &mut serde_json::Map<String, Value>, key: &str) -> Result<String, String> {
    match obj.remove(key) {
        Some(Value::String(s)) => Ok(s),
        Some(_) => Err(format!("`{key}` is not a string")),
        None => Err(format!("missing `{key}`")),
    }
}

fn take_messages(obj: &mut serde_json::Map<String, Value>) -> Result<(String, String), String> {
    let Some(Value::Array(messages)) = obj.remove("messages") else {
        return Err("missing `messages` array".into());
    };
    let mut last_user = None;
    let mut last_assistant = None;
    let mut system = None;
    for message in messages {
        let role = message.get("role").and_then(Value::as_str).ok_or("message without `role`")?;
        let content = message
            .get("content")
            .and_then(Value::as_str)
            .ok_or("message without string `content`")?
            .to_string();
        match role {
            "user" | "human" => last_user = Some(content),
            "assistant" | "gpt" => last_assistant = Some(content),
            "system" => system = Some(content),
            _ => {}
        }
    }
    if let Some(system) = system {
        obj.insert("system".into(), Value::String(system));
    }
    match (last_user, last_assistant) {
        (Some(u), Some(a)) => Ok((u, a)),
        (None, _) => Err("no user turn".into()),
        (_, None) => Err("no assistant turn".into()),
    }
}

impl<R: BufRead> Iterator for LoadStream<R> {
    type Item = Result<Sample, IngestError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = self.lines.next()?;
            self.line_no += 1;
            let line = match line {
                Ok(line) => line,
                Err(e) => {
                    self.skipped += 1;
                    return Some(Err(IngestError::MalformedRecord { line: self.line_no, reason: e.to_string() }));
                }
            };
            if line.trim().is_empty() {
                continue;
            }
            let parsed = self.parse_line(&line).and_then(|sample| {
                if self.seen_ids.insert(sample.id.clone()) {
                    Ok(sample)
                } else {
                    Err(format!("duplicate id `{}`", sample.id))
                }
            });
            return Some(match parsed {
                Ok(sample) => {
                    self.loaded += 1;
                    Ok(sample)
                }
                Err(reason) => {
                    self.skipped += 1;
                    Err(IngestError::MalformedRecord { line: self.line_no, reason })
                }
            });
        }
    }
}

/// Open `path` and stream its records as samples tagged with `source`.
pub fn load_dataset(path: &Path, source: &str, format: &str) -> Result<LoadStream<BufReader<File>>, IngestError> {
    let format: Format = format.parse()?;
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    Ok(LoadStream::new(BufReader::new(file), source, format, Arc::new(WhitespaceHeuristic)))
}

/// Load a whole file, logging and counting skips. Returns `(samples, skipped)`.
pub fn load_all(path: &Path, source: &str, format: &str) -> Result<(Vec<Sample>, usize), IngestError> {
    let mut stream = load_dataset(path, source, format)?;
    let mut samples = Vec::new();
    for item in &mut stream {
        match item {
            Ok(sample) => samples.push(sample),
            Err(e) => log::warn!("{}: skipped {e}", path.display()),
        }
    }
    Ok((samples, stream.skipped()))
}

/// Read a canonical JSONL corpus. Any malformed line is an error.
pub fn read_corpus(path: &Path) -> Result<Vec<Sample>, IngestError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    LoadStream::new(BufReader::new(file), "", Format::Canonical, Arc::new(WhitespaceHeuristic)).collect()
}

/// Write samples as canonical JSONL, one record per line.
pub fn write_corpus<'a>(path: &Path, samples: impl IntoIterator<Item = &'a Sample>) -> Result<(), IngestError> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut out = BufWriter::new(file);
    for sample in samples {
        let line = serde_json::to_string(sample).expect("sample serializes");
        writeln!(out, "{line}").map_err(|e| io_err(path, e))?;
    }
    out.flush().map_err(|e| io_err(path, e))
}

pub(crate) fn io_err(path: &Path, source: std::io::Error) -> IngestError {
    IngestError::Io { path: path.display().to_string(), source }
}
