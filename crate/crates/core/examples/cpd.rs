//! Conditional perplexity discrepancy: how much the instruction helps predict
//! the response, plus a KDE of its distribution.
//!
//! cargo run --example cpd [-- out.csv]

use std::path::Path;
use std::sync::Arc;

use alchemist::analysis::{compute_cpd, cpd_density, silverman_bandwidth, trapezoid, write_curve_csv, CpdMode, KdeConfig};
use alchemist::gateway::{Gateway, LogprobModel, MockProvider};
use alchemist::ingest::load_all;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/corpus/oss_instruct.jsonl");
    let (corpus, _) = load_all(&path, "oss_instruct", "jsonl-messages")?;

    // uniform logprobs: the instruction carries no information, CPD is zero
    let uniform = Gateway::new(Arc::new(MockProvider::sequence(vec![]).with_logprobs(LogprobModel::Uniform { vocab: 32_000 })));
    let r = compute_cpd(&corpus[0], &uniform, CpdMode::Joint)?;
    println!("uniform model: ppl {:.1}, cpd {:.3}", r.ppl_response, r.cpd);

    // the offline cache model rewards reusing words from the context
    let gateway = Gateway::new(Arc::new(MockProvider::offline()));
    for mode in [CpdMode::Joint, CpdMode::Conditional] {
        let values: Vec<f64> = corpus
            .iter()
            .map(|s| compute_cpd(s, &gateway, mode).map(|r| r.cpd))
            .collect::<Result<_, _>>()?;
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let config = KdeConfig::default();
        let curve = cpd_density(&values, None, &config)?;
        println!(
            "{mode:?}: {} samples, mean cpd {mean:.1}, bandwidth {:.2}, density mass {:.4}",
            values.len(),
            silverman_bandwidth(&values),
            trapezoid(&curve)
        );
        if let Some(out) = std::env::args().nth(1) {
            write_curve_csv(Path::new(&out), &curve)?;
        }
    }
    Ok(())
}
