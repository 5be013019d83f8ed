#![allow(dead_code)]

use std::io::BufRead;
use std::path::{Path, PathBuf};

pub fn fixture(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(rel)
}

pub fn count_lines(path: &Path) -> usize {
    let file = std::fs::File::open(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    std::io::BufReader::new(file).lines().count()
}

pub fn synthetic_python(i: usize) -> alchemist::ingest::Sample {
    alchemist::ingest::Sample::new(
        format!("s{i:05}"),
        "synthetic",
        format!("Write a Python function `scale_{i}` that multiplies its argument by {i}."),
        format!(
            "Multiplying by a constant is a one-liner; the function below returns the product.\n\n```python\ndef scale_{i}(value):\n    # constant factor {i}\n    return value * {i}\n```"
        ),
    )
}

/// Instruction-output JSONL of `n` synthetic samples; every `short_every`-th
/// one is a bare short answer with no code.
pub fn write_synthetic_corpus(path: &Path, n: usize, short_every: Option<usize>) -> std::io::Result<()> {
    let mut out = String::new();
    for i in 0..n {
        let record = match short_every {
            Some(k) if i % k == 7 => serde_json::json!({
                "id": format!("s{i:05}"),
                "instruction": format!("What is {i} plus one?"),
                "output": format!("{}", i + 1),
            }),
            _ => {
                let s = synthetic_python(i);
                serde_json::json!({"id": s.id, "instruction": s.instruction, "output": s.response()})
            }
        };
        out.push_str(&record.to_string());
        out.push('\n');
    }
    std::fs::write(path, out)
}
