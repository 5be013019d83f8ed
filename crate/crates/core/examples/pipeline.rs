//! Every stage end to end on the demo corpus, offline.
//!
//! cargo run --example pipeline [-- OUT_DIR]

use std::path::{Path, PathBuf};

use alchemist::pipeline::{run_pipeline, PipelineConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let config = PipelineConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/pipeline.toml"))?;
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("alchemist-demo"));

    let manifest = run_pipeline(&config, &out, true)?;
    let c = &manifest.conservation;
    println!(
        "\n{} ingested = {} kept + {} cleaned + {} deduplicated + {} decontaminated",
        c.ingested, c.kept, c.removed_by_clean, c.deduped_away, c.removed_by_decontam
    );
    for (source, totals) in &manifest.sources {
        println!("  {source:<14} {:>5} samples {:>8} tokens  {:.3}", totals.samples, totals.tokens, manifest.fractions[source]);
    }
    println!("dataset and manifest in {}", out.display());
    Ok(())
}
