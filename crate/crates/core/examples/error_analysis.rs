//! Categorize failed executions by the error they raised.
//!
//! cargo run --example error_analysis

use std::path::Path;

use alchemist::analysis::{categorize, categorize_errors, FailureRecord};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/failure_log.jsonl");
    let log: Vec<FailureRecord> = std::fs::read_to_string(path)?
        .lines()
        .map(serde_json::from_str)
        .collect::<Result<_, _>>()?;

    for record in log.iter().take(5) {
        let last = record.exec_output.lines().last().unwrap_or("");
        println!("{:<12} {:<16} {last}", record.id, format!("{:?}", categorize(record)));
    }

    let tally = categorize_errors(&log);
    println!("\n{} failures", tally.total);
    for (category, n) in &tally.counts {
        println!("  {:<16} {n:>3}  {:>5.1}%", format!("{category:?}"), 100.0 * tally.proportion(*category));
    }
    Ok(())
}
