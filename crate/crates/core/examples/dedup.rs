//! Near-duplicate removal with word n-gram Jaccard.
//!
//! cargo run --example dedup

use std::path::Path;

use alchemist::decontam::{dedup, ngram_jaccard, DedupConfig};
use alchemist::ingest::load_all;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let a = "def add(a, b):\n    return a + b  # sum of both";
    let b = "def add(a, b):\n    return a + b  # sum of the two";
    println!("5-gram jaccard of two near copies: {:.3}", ngram_jaccard(a, b, 5));

    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/corpus");
    let mut corpus = Vec::new();
    for (name, format) in [
        ("evol_instruct", "jsonl-instruction-output"),
        ("oss_instruct", "jsonl-messages"),
        ("code_alpaca", "jsonl-instruction-output"),
    ] {
        corpus.extend(load_all(&fixtures.join(format!("{name}.jsonl")), name, format)?.0);
    }
    let (kept, report) = dedup(corpus, &DedupConfig::default());
    println!("{} in, {} kept, {} removed", report.input, kept.len(), report.removed);
    for cluster in &report.clusters {
        println!("  keep {:<24} drop {:?}", cluster.survivor, cluster.members.iter().filter(|m| **m != cluster.survivor).collect::<Vec<_>>());
    }
    Ok(())
}
