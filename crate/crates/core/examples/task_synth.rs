//! Code comprehension tasks: instruction evolution, data filtering and code review.
//!
//! cargo run --example task_synth

use std::path::Path;
use std::sync::Arc;

use alchemist::gateway::{Gateway, MockProvider};
use alchemist::ingest::{load_all, Sample};
use alchemist::quality::{classify_quality, ExecutorConfig, ExecutorRegistry, FilterConfig};
use alchemist::tasks::{
    evolve_instruction, is_selected, review_task, synth_code_review, synth_data_filtering_task,
    synth_instruction_evolution_task, EvolutionTemplates, ReviewTemplate,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let gateway = Gateway::new(Arc::new(MockProvider::offline()));
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/corpus/evol_instruct.jsonl");
    let (corpus, _) = load_all(&path, "evol_instruct", "jsonl-instruction-output")?;
    let sample = corpus.iter().find(|s| s.id.starts_with("py-")).expect("a python sample");

    let evolved = evolve_instruction(sample, &gateway, &EvolutionTemplates::default(), 0)?;
    let task = synth_instruction_evolution_task(sample, &evolved)?;
    println!("## {:?}\n{}\n---\n{}\n", task.kind, task.instruction, task.response);

    let rejected = Sample::new("short", "demo", "Write a function that reverses a string.", "Use slicing.");
    let executor = ExecutorRegistry::new(ExecutorConfig { dry_run: true, ..ExecutorConfig::default() });
    let verdict = classify_quality(&rejected, &FilterConfig::default(), &executor, None);
    let task = synth_data_filtering_task(&rejected, &verdict)?;
    println!("## {:?}\n{}\n---\n{}\n", task.kind, task.instruction, task.response);

    let review = synth_code_review(sample, &gateway, &ReviewTemplate::default())?;
    println!(
        "review scores: correctness {}, clarity {} (kept as a task: {})",
        review.correctness,
        review.clarity,
        is_selected(review.correctness, review.clarity)
    );
    let task = review_task(&review, sample)?;
    println!("## {:?}\n{}", task.kind, task.response);
    Ok(())
}
