//! Flag planted benchmark leaks: verbatim copies and renamed rewrites.
//!
//! cargo run --example decontam

use std::path::Path;

use alchemist::decontam::{ast_edit_distance, decontaminate, load_references, DecontamConfig, HashingEmbedder};
use alchemist::ingest::load_all;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    let references = load_references(&fixtures.join("references.jsonl"))?;
    let (planted, _) = load_all(&fixtures.join("planted_contaminants.jsonl"), "planted", "jsonl-instruction-output")?;
    let (clean, _) = load_all(&fixtures.join("corpus/code_alpaca.jsonl"), "code_alpaca", "jsonl-instruction-output")?;

    // renaming every identifier leaves the canonical tree unchanged
    let (d, norm) = ast_edit_distance(
        "def add(a, b):\n    return a + b\n",
        "def plus(x, y):\n    return x + y\n",
        "python",
    )?;
    println!("tree distance after renaming: {d} ({norm:.2})\n");

    let corpus: Vec<_> = planted.into_iter().chain(clean).collect();
    let embedder = HashingEmbedder::new(256);
    let (kept, report) = decontaminate(corpus, &references, Some(&embedder), &DecontamConfig::default());
    for f in &report.flagged {
        let s = &f.scores;
        println!(
            "{:<20} ~ {:<8} by {:?}: jaccard {:.2}, tree {}, cosine {}",
            f.sample_id,
            s.reference_id,
            f.trigger,
            s.ngram_jaccard,
            s.ast_edit_norm.map_or("-".into(), |d| format!("{d:.2}")),
            s.embedding_cosine.map_or("-".into(), |c| format!("{c:.2}")),
        );
    }
    println!("\n{} flagged of {}, {} kept", report.flagged_samples, report.corpus_size, kept.len());
    Ok(())
}
