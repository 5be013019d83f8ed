//! Load the three demo corpora and summarize what came in.
//!
//! cargo run --example ingest

use std::path::Path;

use alchemist::analysis::corpus_stats;
use alchemist::ingest::load_all;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/corpus");
    let mut corpus = Vec::new();
    for (name, format) in [
        ("evol_instruct", "jsonl-instruction-output"),
        ("oss_instruct", "jsonl-messages"),
        ("code_alpaca", "jsonl-instruction-output"),
    ] {
        let (samples, skipped) = load_all(&fixtures.join(format!("{name}.jsonl")), name, format)?;
        println!("{name:<14} {:>4} loaded {skipped:>3} skipped", samples.len());
        corpus.extend(samples);
    }

    let stats = corpus_stats(&corpus);
    println!("\n{} samples, {} tokens (whitespace heuristic)", stats.samples, stats.token_total);
    for (lang, n) in &stats.language_histogram {
        println!("  {lang:<12} {n}");
    }

    let s = &corpus[0];
    println!("\nfirst sample {} [{}]: {} code block(s), languages {:?}", s.id, s.source, s.code_blocks().len(), s.languages());
    Ok(())
}
