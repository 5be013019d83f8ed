//! Hindsight prompt customization: read a solution, write the instruction it answers.
//!
//! cargo run --example alchemist_prompts

use std::path::Path;
use std::sync::Arc;

use alchemist::alchemist::{apply_customization, generate_alchemist_prompt, select_candidates, PromptTemplate, Strategy};
use alchemist::gateway::{Gateway, MockProvider};
use alchemist::ingest::{load_all, Sample};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let gateway = Gateway::new(Arc::new(MockProvider::offline()));
    let template = PromptTemplate::default();

    let bellman_ford = Sample::new(
        "demo",
        "demo",
        "Implement shortest paths from a source vertex, allowing negative edge weights.",
        "```python\ndef bellman_ford(n, edges, src):\n    dist = [float('inf')] * n\n    dist[src] = 0\n    for _ in range(n - 1):\n        for u, v, w in edges:\n            if dist[u] + w < dist[v]:\n                dist[v] = dist[u] + w\n    return dist\n```",
    );
    let record = generate_alchemist_prompt(&bellman_ford, &gateway, &template)?;
    println!("customized instruction:\n  {}\n  valid: {}\n", record.customized_instruction, record.validation.passed);

    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/corpus/evol_instruct.jsonl");
    let (corpus, _) = load_all(&path, "evol_instruct", "jsonl-instruction-output")?;
    let chosen = select_candidates(&corpus, 0.05, 42);
    let records = corpus
        .iter()
        .filter(|s| chosen.contains(&s.id))
        .map(|s| generate_alchemist_prompt(s, &gateway, &template))
        .collect::<Result<Vec<_>, _>>()?;
    for r in &records {
        println!("{:<24} {}", r.sample_id, r.customized_instruction);
    }
    let n = corpus.len();
    let augmented = apply_customization(corpus.clone(), &records, Strategy::Augment)?;
    let replaced = apply_customization(corpus, &records, Strategy::Replace)?;
    println!("\n{n} samples: augment gives {}, replace gives {}", augmented.len(), replaced.len());
    Ok(())
}
