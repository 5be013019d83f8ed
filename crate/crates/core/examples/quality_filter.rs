//! Classify the labeled quality fixture and apply the removal policy.
//!
//! Uses the local Python interpreter for compile and test checks and the
//! offline provider as clarity judge.
//!
//! cargo run --example quality_filter

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use alchemist::gateway::{Gateway, MockProvider};
use alchemist::ingest::load_all;
use alchemist::quality::{apply_removal_policy, classify_quality, ExecutorConfig, ExecutorRegistry, FilterConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/quality_labeled.jsonl");
    let (samples, _) = load_all(&path, "labeled", "jsonl-instruction-output")?;

    let executor = ExecutorRegistry::new(ExecutorConfig::default());
    let judge = Gateway::new(Arc::new(MockProvider::offline()));
    let config = FilterConfig::default();

    let mut per_flag: BTreeMap<String, usize> = BTreeMap::new();
    let verdicts: Vec<_> = samples
        .into_iter()
        .map(|s| {
            let v = classify_quality(&s, &config, &executor, Some(&judge));
            for f in &v.flags {
                *per_flag.entry(format!("{f:?}")).or_default() += 1;
            }
            (s, v)
        })
        .collect();

    for (s, v) in verdicts.iter().filter(|(_, v)| v.flags.len() > 1) {
        println!("{}: {:?}", s.id, v.flags);
        for (flag, why) in &v.evidence {
            println!("    {flag:?}: {why}");
        }
    }
    println!();
    for (flag, n) in &per_flag {
        println!("{flag:<16} {n}");
    }

    let partition = apply_removal_policy(verdicts);
    println!("\nkept {}, removed {}, recycled {}", partition.kept.len(), partition.removed.len(), partition.recycled.len());
    Ok(())
}
