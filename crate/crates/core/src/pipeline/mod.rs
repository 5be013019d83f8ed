//! Stage orchestration: ingest → clean → dedup → decontam → alchemize →
//! synth → mix → stats.
//!
//! Every stage reads its inputs from the output directory and writes its
//! outputs there atomically (temp file, then rename), so any stage can be
//! rerun on its own from the checkpoints of the stages before it.

mod config;
mod mix;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alchemist::{
    apply_customization, generate_alchemist_prompt, select_candidates, select_candidates_per_source, AlchemistError,
    PromptRecord, Strategy, SOURCE_ALCHEMIST,
};
use crate::analysis::{compute_cpd, corpus_stats, cpd_density, write_curve_csv, AnalysisError, CpdMode, CpdRecord, CorpusStats};
use crate::decontam::{decontaminate, dedup, load_references, DedupConfig, Embedder, HashingEmbedder, HttpEmbedder};
use crate::gateway::{Gateway, HttpProvider, MockProvider, ResponseCache, API_KEY_ENV};
use crate::ingest::{load_all, Sample, WHITESPACE_X13};
use crate::quality::{apply_removal_policy, classify_quality, ExecutorRegistry, QualityFlag, QualityVerdict};
use crate::tasks::{
    evolve_instruction, review_task, synth_code_review, synth_data_filtering_task, synth_instruction_evolution_task,
    ReviewRecord, TaskError, TaskKind, TaskRecord, SOURCE_TASK,
};

pub use config::{
    AlchemistSection, AnalysisSection, DecontamSection, DedupSection, EmbedderConfig, JudgeConfig, MixSection,
    PipelineConfig, ProviderKind, ProviderSection, SourceConfig, TasksSection, TrainingSection,
};
pub use mix::{balance_fraction, mix};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid config at `{key}`: {reason}")]
    ConfigInvalid { key: String, reason: String },
    #[error("stage {stage} failed: {message}")]
    StageFailure { stage: Stage, message: String },
    #[error("empty mix: {0}")]
    EmptyMix(String),
}

impl PipelineError {
    /// Process exit code: 2 for configuration errors, 3 for stage failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::ConfigInvalid { .. } => 2,
            _ => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Ingest,
    Clean,
    Dedup,
    Decontam,
    Alchemize,
    Synth,
    Mix,
    Stats,
}

impl Stage {
    pub const ALL: [Stage; 8] =
        [Stage::Ingest, Stage::Clean, Stage::Dedup, Stage::Decontam, Stage::Alchemize, Stage::Synth, Stage::Mix, Stage::Stats];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Clean => "clean",
            Stage::Dedup => "dedup",
            Stage::Decontam => "decontam",
            Stage::Alchemize => "alchemize",
            Stage::Synth => "synth",
            Stage::Mix => "mix",
            Stage::Stats => "stats",
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Stage {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL.into_iter().find(|st| st.name() == s).ok_or_else(|| format!("unknown stage `{s}`"))
    }
}

const STAGE_VERSION: &str = "1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceIngest {
    pub loaded: usize,
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub sources: BTreeMap<String, SourceIngest>,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CleanReport {
    pub input: usize,
    pub kept: usize,
    pub removed: usize,
    pub recycled: usize,
    pub flag_counts: BTreeMap<QualityFlag, usize>,
    /// Samples with at least one withheld check.
    pub samples_with_notes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectRecord {
    pub sample: Sample,
    pub verdict: QualityVerdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlchemizeReport {
    pub ratio: f64,
    pub strategy: Strategy,
    pub corpus: usize,
    pub selected: usize,
    pub customized: usize,
    pub validation_failed: usize,
    pub output: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthReport {
    pub evolcode: usize,
    pub evolution_rejected: usize,
    pub instruction_evolution: usize,
    pub data_filtering: usize,
    pub data_filtering_unmappable: usize,
    pub reviews: usize,
    pub code_review: usize,
    pub review_unselected: usize,
    pub review_parse_failures: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conservation {
    pub ingested: usize,
    pub kept: usize,
    /// Removed plus recycled by the quality filter.
    pub removed_by_clean: usize,
    pub clean_removed: usize,
    pub clean_recycled: usize,
    pub deduped_away: usize,
    pub removed_by_decontam: usize,
    pub holds: bool,
}

impl Conservation {
    pub fn new(ingested: usize, kept: usize, clean_removed: usize, clean_recycled: usize, deduped_away: usize, removed_by_decontam: usize) -> Self {
        let removed_by_clean = clean_removed + clean_recycled;
        let holds = ingested == kept + removed_by_clean + deduped_away + removed_by_decontam;
        Conservation { ingested, kept, removed_by_clean, clean_removed, clean_recycled, deduped_away, removed_by_decontam, holds }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceTotals {
    pub samples: usize,
    pub tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixManifest {
    pub crate_version: String,
    pub stage_versions: BTreeMap<String, String>,
    pub seed: u64,
    pub tokenizer: String,
    pub provider: String,
    pub conservation: Conservation,
    pub sources: BTreeMap<String, SourceTotals>,
    pub total_samples: usize,
    pub total_tokens: u64,
    /// Share of the final dataset per source tag.
    pub fractions: BTreeMap<String, f64>,
    pub customized_fraction: f64,
    pub task_fraction: f64,
    pub harmonized_fraction: f64,
    pub alchemist: AlchemizeReport,
    pub tasks: SynthReport,
    /// Line count of every emitted dataset file.
    pub files: BTreeMap<String, usize>,
    pub config: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CpdSummary {
    pub mode: CpdMode,
    pub samples: usize,
    pub mean_cpd: f64,
    pub mean_ppl_joint: f64,
    pub mean_ppl_response: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub corpus: CorpusStats,
    pub cpd: Vec<CpdSummary>,
    pub notes: Vec<String>,
}

/// Files written under the output directory.
/// Last evolved sample (if any round succeeded) and the tasks it produced.
type EvolutionOutcome = (Option<Sample>, Vec<TaskRecord>);

pub mod layout {
    pub const INGEST: &str = "checkpoints/01_ingest.jsonl";
    pub const CLEAN: &str = "checkpoints/02_clean.jsonl";
    pub const REJECTS: &str = "checkpoints/02_rejects.jsonl";
    pub const DEDUP: &str = "checkpoints/03_dedup.jsonl";
    pub const DECONTAM: &str = "checkpoints/04_decontam.jsonl";
    pub const ALCHEMIZE: &str = "checkpoints/05_alchemize.jsonl";
    pub const PROMPTS: &str = "checkpoints/05_prompts.jsonl";
    pub const EVOLCODE: &str = "checkpoints/06_evolcode.jsonl";
    pub const REVIEWS: &str = "checkpoints/06_reviews.jsonl";
    pub const TRAIN: &str = "dataset/train.jsonl";
    pub const TRAIN_INSTRUCTION_OUTPUT: &str = "dataset/train_instruction_output.jsonl";
    pub const TRAIN_MESSAGES: &str = "dataset/train_messages.jsonl";
    pub const MANIFEST: &str = "manifest.json";
    pub const TRAINING_CONFIG: &str = "training_config.json";
    pub const STATS: &str = "stats.json";
    pub const CPD: &str = "analysis/cpd.jsonl";

    pub fn tasks(kind: crate::tasks::TaskKind) -> String {
        format!("checkpoints/06_tasks_{}.jsonl", kind.slug())
    }

    pub fn report(stage: super::Stage) -> String {
        format!("reports/{}.json", stage.name())
    }

    pub fn kde(mode: crate::analysis::CpdMode) -> String {
        let name = match mode {
            crate::analysis::CpdMode::Joint => "joint",
            crate::analysis::CpdMode::Conditional => "conditional",
        };
        format!("analysis/cpd_kde_{name}.csv")
    }
}

fn write_atomic(path: &Path, fill: impl FnOnce(&mut dyn Write) -> std::io::Result<()>) -> std::io::Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    {
        let mut out = BufWriter::new(tmp.as_file_mut());
        fill(&mut out)?;
        out.flush()?;
    }
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

fn write_jsonl<'a, T: Serialize + 'a>(path: &Path, items: impl IntoIterator<Item = &'a T>) -> std::io::Result<usize> {
    let mut count = 0;
    write_atomic(path, |out| {
        for item in items {
            writeln!(out, "{}", serde_json::to_string(item).map_err(std::io::Error::other)?)?;
            count += 1;
        }
        Ok(())
    })?;
    Ok(count)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> std::io::Result<()> {
    write_atomic(path, |out| {
        serde_json::to_writer_pretty(&mut *out, value).map_err(std::io::Error::other)?;
        writeln!(out)
    })
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, String> {
    let file = std::fs::File::open(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| format!("{}: {e}", path.display()))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| format!("{}:{}: {e}", path.display(), i + 1))?);
    }
    Ok(out)
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
}

fn count_lines(path: &Path) -> std::io::Result<usize> {
    Ok(BufReader::new(std::fs::File::open(path)?).lines().count())
}

/// Stage runner bound to one config and output directory.
pub struct Pipeline {
    config: PipelineConfig,
    out: PathBuf,
    dry_run: bool,
    gateway: OnceLock<Gateway>,
}

impl Pipeline {
    /// `dry_run` replaces every provider with the offline mock.
    pub fn new(config: PipelineConfig, out: impl Into<PathBuf>, dry_run: bool) -> Self {
        Pipeline { config, out: out.into(), dry_run, gateway: OnceLock::new() }
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn path(&self, relative: impl AsRef<Path>) -> PathBuf {
        self.out.join(relative)
    }

    fn fail(&self, stage: Stage) -> impl Fn(String) -> PipelineError {
        move |message| PipelineError::StageFailure { stage, message }
    }

    fn write_jsonl<'a, T: Serialize + 'a>(&self, stage: Stage, rel: &str, items: impl IntoIterator<Item = &'a T>) -> Result<usize, PipelineError> {
        write_jsonl(&self.path(rel), items).map_err(|e| self.fail(stage)(format!("{rel}: {e}")))
    }

    fn write_json<T: Serialize>(&self, stage: Stage, rel: &str, value: &T) -> Result<(), PipelineError> {
        write_json(&self.path(rel), value).map_err(|e| self.fail(stage)(format!("{rel}: {e}")))
    }

    fn read_jsonl<T: DeserializeOwned>(&self, stage: Stage, rel: &str) -> Result<Vec<T>, PipelineError> {
        read_jsonl(&self.path(rel)).map_err(|e| self.fail(stage)(format!("missing or unreadable checkpoint: {e}")))
    }

    fn read_report<T: DeserializeOwned>(&self, stage: Stage, of: Stage) -> Result<T, PipelineError> {
        read_json(&self.path(layout::report(of))).map_err(|e| self.fail(stage)(format!("missing report of stage {of}: {e}")))
    }

    fn provider_id(&self) -> String {
        match (&self.config.provider.backend, self.dry_run) {
            (ProviderKind::Http(h), false) => format!("http:{}", h.model),
            _ => "mock-offline".into(),
        }
    }

    /// The shared gateway, built on first use.
    pub fn gateway(&self) -> Result<&Gateway, String> {
        if let Some(g) = self.gateway.get() {
            return Ok(g);
        }
        let section = &self.config.provider;
        let provider: Arc<dyn crate::gateway::Provider> = match (&section.backend, self.dry_run) {
            (ProviderKind::Http(http), false) => Arc::new(HttpProvider::new(http.clone())),
            _ => Arc::new(MockProvider::offline()),
        };
        let mut gateway = Gateway::new(provider).with_limits(section.limits.clone()).with_retry(section.retry.clone());
        if let Some(cache) = &section.cache {
            let path = if cache.is_relative() { self.out.join(cache) } else { cache.clone() };
            if let Some(dir) = path.parent() {
                std::fs::create_dir_all(dir).map_err(|e| e.to_string())?;
            }
            gateway = gateway.with_cache(ResponseCache::open(&path).map_err(|e| format!("{}: {e}", path.display()))?);
        }
        Ok(self.gateway.get_or_init(|| gateway))
    }

    fn embedder(&self) -> Option<Box<dyn Embedder>> {
        match &self.config.decontam.embedder {
            EmbedderConfig::None => None,
            EmbedderConfig::Hashing { dim } => Some(Box::new(HashingEmbedder::new(*dim))),
            EmbedderConfig::Http { dim, .. } if self.dry_run => Some(Box::new(HashingEmbedder::new(*dim))),
            EmbedderConfig::Http { endpoint, model, dim } => {
                Some(Box::new(HttpEmbedder::new(endpoint, model, *dim, std::env::var(API_KEY_ENV).ok())))
            }
        }
    }

    /// Run every stage from `from` through stats.
    pub fn run_from(&self, from: Stage) -> Result<MixManifest, PipelineError> {
        for stage in Stage::ALL.into_iter().filter(|s| *s >= from) {
            let summary = self.run_stage(stage)?;
            log::info!("{stage}: {summary}");
        }
        read_json(&self.path(layout::MANIFEST)).map_err(self.fail(Stage::Stats))
    }

    pub fn run(&self) -> Result<MixManifest, PipelineError> {
        self.run_from(Stage::Ingest)
    }

    /// Run a single stage; returns a one-line summary.
    pub fn run_stage(&self, stage: Stage) -> Result<String, PipelineError> {
        match stage {
            Stage::Ingest => self.ingest(),
            Stage::Clean => self.clean(),
            Stage::Dedup => self.dedup(),
            Stage::Decontam => self.decontam(),
            Stage::Alchemize => self.alchemize(),
            Stage::Synth => self.synth(),
            Stage::Mix => self.mix(),
            Stage::Stats => self.stats(),
        }
    }

    fn ingest(&self) -> Result<String, PipelineError> {
        let stage = Stage::Ingest;
        if self.config.sources.is_empty() {
            return Err(self.fail(stage)("no sources configured".into()));
        }
        let mut corpus = Vec::new();
        let mut sources = BTreeMap::new();
        let mut seen = HashSet::new();
        for source in &self.config.sources {
            let (samples, skipped) = load_all(&source.path, &source.name, &source.format)
                .map_err(|e| self.fail(stage)(format!("source `{}`: {e}", source.name)))?;
            for s in &samples {
                if !seen.insert(s.id.clone()) {
                    return Err(self.fail(stage)(format!("duplicate sample id `{}` across sources", s.id)));
                }
            }
            sources.insert(source.name.clone(), SourceIngest { loaded: samples.len(), skipped });
            corpus.extend(samples);
        }
        self.write_jsonl(stage, layout::INGEST, &corpus)?;
        let report = IngestReport { sources, total: corpus.len() };
        self.write_json(stage, &layout::report(stage), &report)?;
        Ok(format!("{} samples from {} source(s)", corpus.len(), report.sources.len()))
    }

    fn clean(&self) -> Result<String, PipelineError> {
        let stage = Stage::Clean;
        let corpus: Vec<Sample> = self.read_jsonl(stage, layout::INGEST)?;
        let registry = ExecutorRegistry::new(self.config.executor.clone());
        let judge = if self.config.judge.enabled { Some(self.gateway().map_err(self.fail(stage))?) } else { None };
        let verdicts: Vec<QualityVerdict> =
            corpus.par_iter().map(|s| classify_quality(s, &self.config.filter, &registry, judge)).collect();

        let mut flag_counts: BTreeMap<QualityFlag, usize> = BTreeMap::new();
        let samples_with_notes = verdicts.iter().filter(|v| !v.notes.is_empty()).count();
        for v in &verdicts {
            for f in &v.flags {
                *flag_counts.entry(*f).or_default() += 1;
            }
        }
        let input = corpus.len();
        let partition = apply_removal_policy(corpus.into_iter().zip(verdicts));
        let rejects: Vec<RejectRecord> = partition
            .removed
            .iter()
            .chain(&partition.recycled)
            .map(|(sample, verdict)| RejectRecord { sample: sample.clone(), verdict: verdict.clone() })
            .collect();
        self.write_jsonl(stage, layout::CLEAN, &partition.kept)?;
        self.write_jsonl(stage, layout::REJECTS, &rejects)?;
        let report = CleanReport {
            input,
            kept: partition.kept.len(),
            removed: partition.removed.len(),
            recycled: partition.recycled.len(),
            flag_counts,
            samples_with_notes,
        };
        self.write_json(stage, &layout::report(stage), &report)?;
        Ok(format!("kept {}, removed {}, recycled {}", report.kept, report.removed, report.recycled))
    }

    fn dedup(&self) -> Result<String, PipelineError> {
        let stage = Stage::Dedup;
        let corpus: Vec<Sample> = self.read_jsonl(stage, layout::CLEAN)?;
        let section = &self.config.dedup;
        let config = DedupConfig { ngram_n: section.ngram_n, jaccard_threshold: section.jaccard_threshold };
        let (kept, report) = if section.enabled {
            dedup(corpus, &config)
        } else {
            let input = corpus.len();
            (corpus, crate::decontam::DedupReport { thresholds: config, input, removed: 0, clusters: vec![] })
        };
        self.write_jsonl(stage, layout::DEDUP, &kept)?;
        self.write_json(stage, &layout::report(stage), &report)?;
        Ok(format!("{} duplicate(s) removed in {} cluster(s)", report.removed, report.clusters.len()))
    }

    fn decontam(&self) -> Result<String, PipelineError> {
        let stage = Stage::Decontam;
        let corpus: Vec<Sample> = self.read_jsonl(stage, layout::DEDUP)?;
        let references = match &self.config.decontam.references {
            Some(path) => load_references(path).map_err(|e| self.fail(stage)(format!("{}: {e}", path.display())))?,
            None => Vec::new(),
        };
        let embedder = self.embedder();
        let (kept, mut report) =
            decontaminate(corpus, &references, embedder.as_deref(), &self.config.decontam.thresholds());
        if self.config.decontam.references.is_none() {
            report.notes.push("no references configured; nothing to decontaminate against".into());
        }
        self.write_jsonl(stage, layout::DECONTAM, &kept)?;
        self.write_json(stage, &layout::report(stage), &report)?;
        Ok(format!("{} sample(s) flagged against {} reference(s)", report.flagged_samples, report.reference_count))
    }

    fn alchemize(&self) -> Result<String, PipelineError> {
        let stage = Stage::Alchemize;
        let corpus: Vec<Sample> = self.read_jsonl(stage, layout::DECONTAM)?;
        let section = &self.config.alchemist;
        let chosen = if section.per_source {
            select_candidates_per_source(&corpus, section.ratio, self.config.seed)
        } else {
            select_candidates(&corpus, section.ratio, self.config.seed)
        };
        let candidates: Vec<&Sample> = corpus.iter().filter(|s| chosen.contains(&s.id)).collect();
        let gateway = if candidates.is_empty() { None } else { Some(self.gateway().map_err(self.fail(stage))?) };
        let generated: Vec<Result<Option<PromptRecord>, AlchemistError>> = candidates
            .par_iter()
            .map(|s| match generate_alchemist_prompt(s, gateway.expect("gateway for candidates"), &section.template) {
                Ok(mut r) => {
                    r.strategy = section.strategy;
                    Ok(Some(r))
                }
                Err(AlchemistError::EmptyResponse(_)) => Ok(None),
                Err(e) => Err(e),
            })
            .collect();
        let mut records = Vec::new();
        for item in generated {
            if let Some(r) = item.map_err(|e| self.fail(stage)(e.to_string()))? {
                records.push(r);
            }
        }
        let passed: Vec<PromptRecord> = records.iter().filter(|r| r.validation.passed).cloned().collect();
        let corpus_len = corpus.len();
        let output = apply_customization(corpus, &passed, section.strategy).map_err(|e| self.fail(stage)(e.to_string()))?;
        self.write_jsonl(stage, layout::PROMPTS, &records)?;
        self.write_jsonl(stage, layout::ALCHEMIZE, &output)?;
        let report = AlchemizeReport {
            ratio: section.ratio,
            strategy: section.strategy,
            corpus: corpus_len,
            selected: chosen.len(),
            customized: passed.len(),
            validation_failed: records.len() - passed.len(),
            output: output.len(),
        };
        self.write_json(stage, &layout::report(stage), &report)?;
        Ok(format!("{} of {} selected sample(s) customized ({:?})", report.customized, report.selected, report.strategy))
    }

    fn synth(&self) -> Result<String, PipelineError> {
        let stage = Stage::Synth;
        let corpus: Vec<Sample> = self.read_jsonl(stage, layout::DECONTAM)?;
        let rejects: Vec<RejectRecord> = self.read_jsonl(stage, layout::REJECTS)?;
        let tasks = &self.config.tasks;
        let fail = self.fail(stage);
        let mut report = SynthReport::default();
        let mut evolcode = Vec::new();
        let mut evolution_tasks = Vec::new();
        let mut filtering_tasks = Vec::new();
        let mut review_records: Vec<ReviewRecord> = Vec::new();
        let mut review_tasks = Vec::new();

        let needs_gateway = (tasks.instruction_evolution && tasks.evolution_ratio > 0.0)
            || (tasks.code_review && tasks.review_ratio > 0.0);
        let gateway = if needs_gateway && !corpus.is_empty() { Some(self.gateway().map_err(&fail)?) } else { None };

        if tasks.instruction_evolution && tasks.evolution_rounds > 0 {
            if let Some(gateway) = gateway {
                let chosen = select_candidates(&corpus, tasks.evolution_ratio, self.config.seed.wrapping_add(1));
                let picked: Vec<&Sample> = corpus.iter().filter(|s| chosen.contains(&s.id)).collect();
                let results: Vec<Result<EvolutionOutcome, TaskError>> = picked
                    .par_iter()
                    .enumerate()
                    .map(|(i, original)| {
                        let mut current = (*original).clone();
                        let mut records = Vec::new();
                        for round in 0..tasks.evolution_rounds as usize {
                            let index = i + round * picked.len();
                            match evolve_instruction(&current, gateway, &tasks.evolution, index) {
                                Ok(next) => {
                                    records.push(synth_instruction_evolution_task(&current, &next)?);
                                    current = next;
                                }
                                Err(TaskError::EvolutionRejected { .. }) if round > 0 => break,
                                Err(TaskError::EvolutionRejected { .. }) => return Ok((None, records)),
                                Err(e) => return Err(e),
                            }
                        }
                        Ok((Some(current), records))
                    })
                    .collect();
                for result in results {
                    match result.map_err(|e| fail(e.to_string()))? {
                        (Some(evolved), records) => {
                            evolcode.push(evolved);
                            evolution_tasks.extend(records);
                        }
                        (None, _) => report.evolution_rejected += 1,
                    }
                }
            }
        }

        if tasks.data_filtering {
            for reject in &rejects {
                match synth_data_filtering_task(&reject.sample, &reject.verdict) {
                    Ok(record) => filtering_tasks.push(record),
                    Err(TaskError::UnmappableFlag { .. }) => report.data_filtering_unmappable += 1,
                    Err(e) => return Err(fail(e.to_string())),
                }
            }
        }

        if tasks.code_review {
            if let Some(gateway) = gateway {
                let with_code: Vec<Sample> = corpus.iter().filter(|s| !s.code_blocks().is_empty()).cloned().collect();
                let chosen = select_candidates(&with_code, tasks.review_ratio, self.config.seed.wrapping_add(2));
                let picked: Vec<&Sample> = with_code.iter().filter(|s| chosen.contains(&s.id)).collect();
                let results: Vec<Result<ReviewRecord, TaskError>> =
                    picked.par_iter().map(|s| synth_code_review(s, gateway, &tasks.review)).collect();
                for (sample, result) in picked.iter().zip(results) {
                    match result {
                        Ok(review) => {
                            if review.selected {
                                review_tasks.push(review_task(&review, sample).map_err(|e| fail(e.to_string()))?);
                            } else {
                                report.review_unselected += 1;
                            }
                            review_records.push(review);
                        }
                        Err(TaskError::ParseFailure { .. }) => report.review_parse_failures += 1,
                        Err(e) => return Err(fail(e.to_string())),
                    }
                }
            }
        }

        for record in evolution_tasks.iter().chain(&filtering_tasks).chain(&review_tasks) {
            record.validate().map_err(&fail)?;
        }
        report.evolcode = evolcode.len();
        report.instruction_evolution = evolution_tasks.len();
        report.data_filtering = filtering_tasks.len();
        report.reviews = review_records.len();
        report.code_review = review_tasks.len();

        self.write_jsonl(stage, layout::EVOLCODE, &evolcode)?;
        self.write_jsonl(stage, layout::REVIEWS, &review_records)?;
        self.write_jsonl(stage, &layout::tasks(TaskKind::InstructionEvolution), &evolution_tasks)?;
        self.write_jsonl(stage, &layout::tasks(TaskKind::DataFiltering), &filtering_tasks)?;
        self.write_jsonl(stage, &layout::tasks(TaskKind::CodeReview), &review_tasks)?;
        self.write_json(stage, &layout::report(stage), &report)?;
        Ok(format!(
            "{} evolcode, {} evolution, {} filtering, {} review task(s)",
            report.evolcode, report.instruction_evolution, report.data_filtering, report.code_review
        ))
    }

    fn mix(&self) -> Result<String, PipelineError> {
        let stage = Stage::Mix;
        let mut all: Vec<Sample> = self.read_jsonl(stage, layout::ALCHEMIZE)?;
        all.extend(self.read_jsonl::<Sample>(stage, layout::EVOLCODE)?);
        for kind in TaskKind::ALL {
            let records: Vec<TaskRecord> = self.read_jsonl(stage, &layout::tasks(kind))?;
            all.extend(records.iter().map(TaskRecord::to_sample));
        }

        let mut groups: BTreeMap<String, Vec<Sample>> = BTreeMap::new();
        for sample in all {
            groups.entry(sample.source.clone()).or_default().push(sample);
        }
        let section = &self.config.mix;
        let datasets: Vec<(Vec<Sample>, f64)> = groups
            .into_iter()
            .map(|(tag, samples)| {
                let weight = section.weights.get(&tag).copied().unwrap_or(1.0);
                (samples, weight)
            })
            .collect();
        let seed = self.config.seed.wrapping_add(3);
        let mut mixed = mix(datasets, seed, false)?;
        if let Some(target) = section.harmonized_fraction {
            let (harmonized, base): (Vec<Sample>, Vec<Sample>) = mixed.into_iter().partition(is_harmonized);
            let (base, harmonized) = balance_fraction(base, harmonized, target, seed.wrapping_add(1));
            mixed = base.into_iter().chain(harmonized).collect();
        }
        if section.shuffle {
            mixed.shuffle(&mut ChaCha8Rng::seed_from_u64(seed.wrapping_add(2)));
        }
        if mixed.is_empty() {
            return Err(PipelineError::EmptyMix("the mixed dataset is empty".into()));
        }

        self.write_jsonl(stage, layout::TRAIN, &mixed)?;
        let plain: Vec<InstructionOutput> = mixed
            .iter()
            .map(|s| InstructionOutput { id: &s.id, source: &s.source, instruction: &s.instruction, output: s.response() })
            .collect();
        self.write_jsonl(stage, layout::TRAIN_INSTRUCTION_OUTPUT, &plain)?;
        let messages: Vec<Messages> = mixed
            .iter()
            .map(|s| {
                let mut turns = Vec::new();
                if let Some(system) = &section.system_prompt {
                    turns.push(Turn { role: "system", content: system });
                }
                turns.push(Turn { role: "user", content: &s.instruction });
                turns.push(Turn { role: "assistant", content: s.response() });
                Messages { id: &s.id, source: &s.source, messages: turns }
            })
            .collect();
        self.write_jsonl(stage, layout::TRAIN_MESSAGES, &messages)?;
        Ok(format!("{} samples in the final dataset", mixed.len()))
    }

    fn stats(&self) -> Result<String, PipelineError> {
        let stage = Stage::Stats;
        let fail = self.fail(stage);
        let dataset: Vec<Sample> = self.read_jsonl(stage, layout::TRAIN)?;
        let ingest: IngestReport = self.read_report(stage, Stage::Ingest)?;
        let clean: CleanReport = self.read_report(stage, Stage::Clean)?;
        let dedup: crate::decontam::DedupReport = self.read_report(stage, Stage::Dedup)?;
        let decontam: crate::decontam::ContaminationReport = self.read_report(stage, Stage::Decontam)?;
        let alchemist: AlchemizeReport = self.read_report(stage, Stage::Alchemize)?;
        let tasks: SynthReport = self.read_report(stage, Stage::Synth)?;

        let corpus = corpus_stats(&dataset);
        let mut notes = Vec::new();
        let cpd = if self.config.analysis.cpd { self.cpd_diagnostics(&dataset, &mut notes)? } else { Vec::new() };
        self.write_json(stage, layout::STATS, &StatsReport { corpus: corpus.clone(), cpd, notes })?;

        let conservation = Conservation::new(
            ingest.total,
            decontam.corpus_size - decontam.flagged_samples,
            clean.removed,
            clean.recycled,
            dedup.removed,
            decontam.flagged_samples,
        );
        let total = dataset.len();
        let mut sources: BTreeMap<String, SourceTotals> = BTreeMap::new();
        for s in &dataset {
            let entry = sources.entry(s.source.clone()).or_insert(SourceTotals { samples: 0, tokens: 0 });
            entry.samples += 1;
            entry.tokens += s.token_estimate;
        }
        let fraction = |n: usize| if total == 0 { 0.0 } else { n as f64 / total as f64 };
        let fractions = sources.iter().map(|(k, v)| (k.clone(), fraction(v.samples))).collect();
        let customized = sources.get(SOURCE_ALCHEMIST).map_or(0, |t| t.samples);
        let task = sources.get(SOURCE_TASK).map_or(0, |t| t.samples);

        let mut files = BTreeMap::new();
        for rel in [layout::TRAIN, layout::TRAIN_INSTRUCTION_OUTPUT, layout::TRAIN_MESSAGES] {
            files.insert(rel.to_string(), count_lines(&self.path(rel)).map_err(|e| fail(format!("{rel}: {e}")))?);
        }
        let manifest = MixManifest {
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            stage_versions: Stage::ALL.iter().map(|s| (s.name().to_string(), STAGE_VERSION.to_string())).collect(),
            seed: self.config.seed,
            tokenizer: WHITESPACE_X13.to_string(),
            provider: self.provider_id(),
            conservation,
            total_tokens: corpus.token_total,
            sources,
            total_samples: total,
            fractions,
            customized_fraction: fraction(customized),
            task_fraction: fraction(task),
            harmonized_fraction: fraction(customized + task),
            alchemist,
            tasks,
            files,
            config: self.config.snapshot(),
        };
        self.write_json(stage, layout::MANIFEST, &manifest)?;
        self.write_json(stage, layout::TRAINING_CONFIG, &self.training_config(&manifest))?;
        if !manifest.conservation.holds {
            return Err(fail(format!("conservation check failed: {:?}", manifest.conservation)));
        }
        Ok(format!(
            "{} samples, {} tokens, harmonized fraction {:.4}",
            manifest.total_samples, manifest.total_tokens, manifest.harmonized_fraction
        ))
    }

    fn training_config(&self, manifest: &MixManifest) -> serde_json::Value {
        let t = &self.config.training;
        serde_json::json!({
            "note": "recipe metadata for downstream trainers; not executed by this tool",
            "base_model": t.base_model,
            "learning_rate": t.learning_rate,
            "epochs": t.epochs,
            "batch_size_per_gpu": t.batch_size_per_gpu,
            "max_sequence_length": t.max_sequence_length,
            "optimizer": t.optimizer,
            "train_file": layout::TRAIN_MESSAGES,
            "train_samples": manifest.total_samples,
            "train_tokens_estimate": manifest.total_tokens,
        })
    }

    fn cpd_diagnostics(&self, dataset: &[Sample], notes: &mut Vec<String>) -> Result<Vec<CpdSummary>, PipelineError> {
        let stage = Stage::Stats;
        let fail = self.fail(stage);
        let mut ordered: Vec<&Sample> = dataset.iter().collect();
        ordered.sort_by(|a, b| a.id.cmp(&b.id));
        ordered.truncate(self.config.analysis.cpd_samples);
        let gateway = self.gateway().map_err(&fail)?;
        let mut records: Vec<CpdRecord> = Vec::new();
        let mut summaries = Vec::new();
        for mode in [CpdMode::Joint, CpdMode::Conditional] {
            let results: Vec<Result<CpdRecord, AnalysisError>> =
                ordered.par_iter().map(|s| compute_cpd(s, gateway, mode)).collect();
            let mut ok = Vec::new();
            for r in results {
                match r {
                    Ok(rec) => ok.push(rec),
                    Err(AnalysisError::NoLogprobSupport) => {
                        notes.push("provider exposes no logprobs; CPD skipped".into());
                        return Ok(Vec::new());
                    }
                    Err(AnalysisError::EmptyResponse(_)) => {}
                    Err(e) => return Err(fail(e.to_string())),
                }
            }
            if ok.len() >= 2 {
                let values: Vec<f64> = ok.iter().map(|r| r.cpd).collect();
                let curve = cpd_density(&values, None, &self.config.analysis.kde).map_err(|e| fail(e.to_string()))?;
                let path = self.path(layout::kde(mode));
                std::fs::create_dir_all(path.parent().expect("nested path")).map_err(|e| fail(e.to_string()))?;
                write_curve_csv(&path, &curve).map_err(|e| fail(e.to_string()))?;
            }
            let n = ok.len().max(1) as f64;
            summaries.push(CpdSummary {
                mode,
                samples: ok.len(),
                mean_cpd: ok.iter().map(|r| r.cpd).sum::<f64>() / n,
                mean_ppl_joint: ok.iter().map(|r| r.ppl_joint).sum::<f64>() / n,
                mean_ppl_response: ok.iter().map(|r| r.ppl_response).sum::<f64>() / n,
            });
            records.extend(ok);
        }
        self.write_jsonl(stage, layout::CPD, &records)?;
        Ok(summaries)
    }
}

#[derive(Serialize)]
struct InstructionOutput<'a> {
    id: &'a str,
    source: &'a str,
    instruction: &'a str,
    output: &'a str,
}

#[derive(Serialize)]
struct Turn<'a> {
    role: &'static str,
    content: &'a str,
}

#[derive(Serialize)]
struct Messages<'a> {
    id: &'a str,
    source: &'a str,
    messages: Vec<Turn<'a>>,
}

fn is_harmonized(sample: &Sample) -> bool {
    sample.source == SOURCE_ALCHEMIST || sample.source == SOURCE_TASK
}

/// Load nothing, run everything: the full pipeline into `out`.
pub fn run_pipeline(config: &PipelineConfig, out: &Path, dry_run: bool) -> Result<MixManifest, PipelineError> {
    config.validate()?;
    Pipeline::new(config.clone(), out, dry_run).run()
}

/// Ids present in a checkpoint; handy for audits.
pub fn checkpoint_ids(out: &Path, rel: &str) -> Result<BTreeSet<String>, String> {
    Ok(read_jsonl::<Sample>(&out.join(rel))?.into_iter().map(|s| s.id).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_source(dir: &Path, n: usize) -> PathBuf {
        let path = dir.join("src.jsonl");
        let mut lines = Vec::new();
        for i in 0..n {
            let record = serde_json::json!({
                "id": format!("s{i:03}"),
                "instruction": format!("Write a function named f{i} that returns the number {i} plus its argument."),
                "output": format!("This function adds the constant {i} to the value it receives and returns the sum to the caller.\n```python\ndef f{i}(x):\n    return x + {i}\n```"),
            });
            lines.push(record.to_string());
        }
        lines.push(r#"{"id":"short","instruction":"What is 6*7?","output":"42"}"#.to_string());
        std::fs::write(&path, lines.join("\n")).unwrap();
        path
    }

    fn config(dir: &Path) -> PipelineConfig {
        let mut c = PipelineConfig::default();
        c.sources.push(SourceConfig { name: "evol".into(), path: write_source(dir, 40), format: "jsonl-instruction-output".into() });
        c.executor.dry_run = true;
        c.alchemist.ratio = 0.1;
        c.tasks.evolution_ratio = 0.1;
        c.tasks.review_ratio = 0.1;
        c
    }

    #[test]
    fn small_run_conserves_and_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let c = config(dir.path());
        let a = run_pipeline(&c, &dir.path().join("a"), true).unwrap();
        let b = run_pipeline(&c, &dir.path().join("b"), true).unwrap();
        assert!(a.conservation.holds);
        assert_eq!(a.conservation.ingested, 41);
        assert_eq!(a.conservation.clean_removed, 1);
        assert_eq!(a.alchemist.customized, 4);
        assert_eq!(a, b);
        for rel in [layout::TRAIN, layout::TRAIN_MESSAGES, layout::MANIFEST] {
            assert_eq!(
                std::fs::read(dir.path().join("a").join(rel)).unwrap(),
                std::fs::read(dir.path().join("b").join(rel)).unwrap(),
                "{rel}"
            );
        }
        let sum: f64 = a.fractions.values().sum();
        assert!((sum - 1.0).abs() < 1e-9);
        assert_eq!(a.files[layout::TRAIN], a.total_samples);
    }

    #[test]
    fn rerun_from_checkpoint_matches() {
        let dir = tempfile::tempdir().unwrap();
        let c = config(dir.path());
        let out = dir.path().join("run");
        run_pipeline(&c, &out, true).unwrap();
        let before = std::fs::read(out.join(layout::TRAIN)).unwrap();
        let manifest_before = std::fs::read(out.join(layout::MANIFEST)).unwrap();
        Pipeline::new(c, &out, true).run_from(Stage::Alchemize).unwrap();
        assert_eq!(std::fs::read(out.join(layout::TRAIN)).unwrap(), before);
        assert_eq!(std::fs::read(out.join(layout::MANIFEST)).unwrap(), manifest_before);
    }

    #[test]
    fn missing_checkpoint_is_stage_failure() {
        let dir = tempfile::tempdir().unwrap();
        let err = Pipeline::new(config(dir.path()), dir.path().join("empty"), true).run_stage(Stage::Clean).unwrap_err();
        assert!(matches!(err, PipelineError::StageFailure { stage: Stage::Clean, .. }));
        assert_eq!(err.exit_code(), 3);
    }
}
