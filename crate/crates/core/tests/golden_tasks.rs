//! Evolution and review tasks from the offline provider, pinned to reviewed
//! golden files. Set `UPDATE_GOLDEN=1` to regenerate after an intended change.

mod common;

use std::sync::Arc;

use alchemist::gateway::{Gateway, MockProvider};
use alchemist::ingest::load_all;
use alchemist::tasks::{
    evolve_instruction, review_task, synth_code_review, synth_instruction_evolution_task, EvolutionTemplates,
    ReviewTemplate, TaskRecord,
};

use common::fixture;

fn check_golden(name: &str, records: &[TaskRecord]) {
    let text: String = records.iter().map(|r| serde_json::to_string(r).unwrap() + "\n").collect();
    let path = fixture(&format!("golden/{name}"));
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, &text).unwrap();
    }
    let want = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert_eq!(text, want, "{name} drifted from the golden file");
}

fn samples() -> Vec<alchemist::ingest::Sample> {
    let (corpus, _) = load_all(&fixture("corpus/evol_instruct.jsonl"), "evol_instruct", "jsonl-instruction-output").unwrap();
    corpus.into_iter().filter(|s| s.id.starts_with("py-")).take(3).collect()
}

#[test]
fn instruction_evolution_tasks() {
    let gateway = Gateway::new(Arc::new(MockProvider::offline()));
    let templates = EvolutionTemplates::default();
    let records: Vec<TaskRecord> = samples()
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let evolved = evolve_instruction(s, &gateway, &templates, i).unwrap();
            assert!(evolved.instruction.len() > s.instruction.len());
            synth_instruction_evolution_task(s, &evolved).unwrap()
        })
        .collect();
    check_golden("instruction_evolution.jsonl", &records);
}

#[test]
fn code_review_tasks() {
    let gateway = Gateway::new(Arc::new(MockProvider::offline()));
    let records: Vec<TaskRecord> = samples()
        .iter()
        .map(|s| review_task(&synth_code_review(s, &gateway, &ReviewTemplate::default()).unwrap(), s).unwrap())
        .collect();
    check_golden("code_review.jsonl", &records);
}
