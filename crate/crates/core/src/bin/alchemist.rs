use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use alchemist::analysis::{categorize_errors, compute_cpd, cpd_density, write_curve_csv, CpdMode, FailureRecord};
use alchemist::ingest::{read_corpus, Sample};
use alchemist::pipeline::{layout, Pipeline, PipelineConfig, PipelineError, Stage};

#[derive(Parser)]
#[command(name = "alchemist", version, about = "Harmonize code instruction-tuning corpora")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Pipeline config (TOML).
    #[arg(long, global = true, default_value = "alchemist.toml")]
    config: PathBuf,
    /// Override the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Use the offline mock provider for every model call.
    #[arg(long, global = true)]
    dry_run: bool,
    /// Output directory (overrides `output_dir` in the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Load and normalize every configured source.
    Ingest,
    /// Quality-filter the ingested corpus.
    Clean,
    /// Near-duplicate removal, then benchmark decontamination.
    Decontam,
    /// Generate and apply customized prompts.
    Alchemize {
        /// Override `alchemist.ratio`.
        #[arg(long)]
        ratio: Option<f64>,
    },
    /// Synthesize evolution, filtering and review tasks.
    Synth,
    /// Mix all corpora into the final dataset.
    Mix,
    /// Corpus statistics, CPD diagnostics and the manifest.
    Stats,
    /// Score CPD for a corpus file.
    Cpd {
        /// Canonical JSONL corpus; defaults to the mixed dataset.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, default_value = "joint")]
        mode: CpdMode,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Tally a failure log into error categories.
    Errors {
        /// JSONL of {id, response, exec_output, test_status}.
        #[arg(long)]
        input: PathBuf,
    },
    /// Run every stage, optionally starting from a checkpoint.
    Run {
        #[arg(long)]
        from: Option<Stage>,
    },
}

fn load_config(global: &Global) -> Result<(PipelineConfig, PathBuf), PipelineError> {
    let mut config = PipelineConfig::load(&global.config)?;
    if let Some(seed) = global.seed {
        config.seed = seed;
    }
    let out = global.out.clone().or_else(|| config.output_dir.clone()).unwrap_or_else(|| PathBuf::from("out"));
    Ok((config, out))
}

fn stage_failure(stage: Stage, message: impl ToString) -> PipelineError {
    PipelineError::StageFailure { stage, message: message.to_string() }
}

fn write_pretty(path: &Path, value: &impl serde::Serialize) -> Result<(), String> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| e.to_string())?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| e.to_string())?;
    std::fs::write(path, text + "\n").map_err(|e| format!("{}: {e}", path.display()))
}

fn run_cpd(pipeline: &Pipeline, input: Option<PathBuf>, mode: CpdMode, limit: Option<usize>) -> Result<String, PipelineError> {
    let fail = |e: String| stage_failure(Stage::Stats, e);
    let input = input.unwrap_or_else(|| pipeline.path(layout::TRAIN));
    let mut corpus: Vec<Sample> = read_corpus(&input).map_err(|e| fail(format!("{}: {e}", input.display())))?;
    corpus.sort_by(|a, b| a.id.cmp(&b.id));
    corpus.truncate(limit.unwrap_or(pipeline.config().analysis.cpd_samples));
    let gateway = pipeline.gateway().map_err(fail)?;
    let records = corpus
        .iter()
        .filter(|s| !s.response().trim().is_empty())
        .map(|s| compute_cpd(s, gateway, mode))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| fail(e.to_string()))?;
    let values: Vec<f64> = records.iter().map(|r| r.cpd).collect();
    write_pretty(&pipeline.path(layout::CPD).with_extension("json"), &records).map_err(fail)?;
    if values.len() >= 2 {
        let curve = cpd_density(&values, None, &pipeline.config().analysis.kde).map_err(|e| fail(e.to_string()))?;
        write_curve_csv(&pipeline.path(layout::kde(mode)), &curve).map_err(|e| fail(e.to_string()))?;
    }
    let mean = values.iter().sum::<f64>() / values.len().max(1) as f64;
    Ok(format!("{} sample(s), mean CPD {mean:.6}", values.len()))
}

fn run_errors(pipeline: &Pipeline, input: &Path) -> Result<String, PipelineError> {
    let fail = |e: String| stage_failure(Stage::Stats, e);
    let text = std::fs::read_to_string(input).map_err(|e| fail(format!("{}: {e}", input.display())))?;
    let log = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str::<FailureRecord>)
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| fail(format!("{}: {e}", input.display())))?;
    let tally = categorize_errors(&log);
    write_pretty(&pipeline.path("analysis/errors.json"), &tally).map_err(fail)?;
    let lines: Vec<String> =
        tally.counts.iter().map(|(c, n)| format!("{c:?}: {n} ({:.1}%)", 100.0 * tally.proportion(*c))).collect();
    Ok(lines.join("\n"))
}

fn execute(cli: Cli) -> Result<String, PipelineError> {
    let (mut config, out) = load_config(&cli.global)?;
    if let Command::Alchemize { ratio: Some(r) } = cli.command {
        config.alchemist.ratio = r;
        config.validate()?;
    }
    let pipeline = Pipeline::new(config, out, cli.global.dry_run);
    match cli.command {
        Command::Ingest => pipeline.run_stage(Stage::Ingest),
        Command::Clean => pipeline.run_stage(Stage::Clean),
        Command::Decontam => {
            let dedup = pipeline.run_stage(Stage::Dedup)?;
            Ok(format!("{dedup}\n{}", pipeline.run_stage(Stage::Decontam)?))
        }
        Command::Alchemize { .. } => pipeline.run_stage(Stage::Alchemize),
        Command::Synth => pipeline.run_stage(Stage::Synth),
        Command::Mix => pipeline.run_stage(Stage::Mix),
        Command::Stats => pipeline.run_stage(Stage::Stats),
        Command::Cpd { input, mode, limit } => run_cpd(&pipeline, input, mode, limit),
        Command::Errors { input } => run_errors(&pipeline, &input),
        Command::Run { from } => {
            let manifest = pipeline.run_from(from.unwrap_or(Stage::Ingest))?;
            Ok(format!(
                "{} samples, {} tokens; customized {:.4}, tasks {:.4}",
                manifest.total_samples, manifest.total_tokens, manifest.customized_fraction, manifest.task_fraction
            ))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
