//! Declarative pipeline configuration (TOML).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::alchemist::{PromptTemplate, Strategy, DEFAULT_RATIO};
use crate::analysis::KdeConfig;
use crate::decontam::{DecontamConfig, DedupConfig};
use crate::gateway::{HttpProviderConfig, Limits, RetryPolicy};
use crate::ingest::Format;
use crate::quality::{ExecutorConfig, FilterConfig};
use crate::tasks::{EvolutionTemplates, ReviewTemplate};

use super::PipelineError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceConfig {
    /// Source tag given to every sample of this dataset.
    pub name: String,
    pub path: PathBuf,
    #[serde(default = "default_format")]
    pub format: String,
}

fn default_format() -> String {
    "jsonl-instruction-output".into()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JudgeConfig {
    /// Ask the provider for clarity scores (sets PoorClarity).
    pub enabled: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum EmbedderConfig {
    None,
    Hashing { dim: usize },
    Http { endpoint: String, model: String, dim: usize },
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig::Hashing { dim: 256 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecontamSection {
    /// Benchmark references (JSONL). No references means no decontamination.
    pub references: Option<PathBuf>,
    pub ngram_n: usize,
    pub jaccard_threshold: f64,
    pub ast_distance_threshold: f64,
    pub cosine_threshold: f64,
    pub code_ngram_n: usize,
    pub embedder: EmbedderConfig,
}

impl Default for DecontamSection {
    fn default() -> Self {
        let d = DecontamConfig::default();
        DecontamSection {
            references: None,
            ngram_n: d.ngram_n,
            jaccard_threshold: d.jaccard_threshold,
            ast_distance_threshold: d.ast_distance_threshold,
            cosine_threshold: d.cosine_threshold,
            code_ngram_n: d.code_ngram_n,
            embedder: EmbedderConfig::default(),
        }
    }
}

impl DecontamSection {
    pub fn thresholds(&self) -> DecontamConfig {
        DecontamConfig {
            ngram_n: self.ngram_n,
            jaccard_threshold: self.jaccard_threshold,
            ast_distance_threshold: self.ast_distance_threshold,
            cosine_threshold: self.cosine_threshold,
            code_ngram_n: self.code_ngram_n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DedupSection {
    pub enabled: bool,
    pub ngram_n: usize,
    pub jaccard_threshold: f64,
}

impl Default for DedupSection {
    fn default() -> Self {
        let d = DedupConfig::default();
        DedupSection { enabled: true, ngram_n: d.ngram_n, jaccard_threshold: d.jaccard_threshold }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlchemistSection {
    pub ratio: f64,
    pub strategy: Strategy,
    /// Sample the ratio within each source instead of over the whole corpus.
    pub per_source: bool,
    pub template: PromptTemplate,
}

impl Default for AlchemistSection {
    fn default() -> Self {
        AlchemistSection { ratio: DEFAULT_RATIO, strategy: Strategy::Augment, per_source: false, template: PromptTemplate::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TasksSection {
    pub instruction_evolution: bool,
    pub data_filtering: bool,
    pub code_review: bool,
    /// Fraction of the clean corpus evolved (EvolCode data and evolution tasks).
    pub evolution_ratio: f64,
    /// Evolution rounds applied to each selected sample.
    pub evolution_rounds: u32,
    /// Fraction of the clean corpus sent for review.
    pub review_ratio: f64,
    pub evolution: EvolutionTemplates,
    pub review: ReviewTemplate,
}

impl Default for TasksSection {
    fn default() -> Self {
        TasksSection {
            instruction_evolution: true,
            data_filtering: true,
            code_review: true,
            evolution_ratio: 0.05,
            evolution_rounds: 1,
            review_ratio: 0.05,
            evolution: EvolutionTemplates::default(),
            review: ReviewTemplate::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixSection {
    pub shuffle: bool,
    /// Per-source-tag weights; unlisted tags weigh 1.
    pub weights: BTreeMap<String, f64>,
    /// When set, subsample so customized + task samples make up this fraction.
    pub harmonized_fraction: Option<f64>,
    /// Optional system turn for the chat-messages output.
    pub system_prompt: Option<String>,
}

impl Default for MixSection {
    fn default() -> Self {
        MixSection { shuffle: true, weights: BTreeMap::new(), harmonized_fraction: None, system_prompt: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ProviderKind {
    /// Offline rule-based provider.
    Mock,
    Http(HttpProviderConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProviderSection {
    pub backend: ProviderKind,
    /// Response cache file; relative paths resolve against the output dir.
    pub cache: Option<PathBuf>,
    pub limits: Limits,
    pub retry: RetryPolicy,
}

impl Default for ProviderSection {
    fn default() -> Self {
        ProviderSection {
            backend: ProviderKind::Mock,
            cache: None,
            limits: Limits { max_in_flight: 8, ..Limits::default() },
            retry: RetryPolicy::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisSection {
    pub cpd: bool,
    /// CPD is computed for at most this many samples (lowest ids first).
    pub cpd_samples: usize,
    pub kde: KdeConfig,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        AnalysisSection { cpd: true, cpd_samples: 200, kde: KdeConfig::default() }
    }
}

/// Recipe emitted for downstream trainers; never executed here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub base_model: String,
    pub learning_rate: f64,
    pub epochs: u32,
    pub batch_size_per_gpu: u32,
    pub max_sequence_length: u32,
    pub optimizer: String,
}

impl Default for TrainingSection {
    fn default() -> Self {
        TrainingSection {
            base_model: "CodeLlama-Python-7B".into(),
            learning_rate: 1e-4,
            epochs: 2,
            batch_size_per_gpu: 2,
            max_sequence_length: 8192,
            optimizer: "Adam".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub sources: Vec<SourceConfig>,
    pub filter: FilterConfig,
    pub judge: JudgeConfig,
    pub executor: ExecutorConfig,
    pub dedup: DedupSection,
    pub decontam: DecontamSection,
    pub alchemist: AlchemistSection,
    pub tasks: TasksSection,
    pub mix: MixSection,
    pub provider: ProviderSection,
    pub analysis: AnalysisSection,
    pub training: TrainingSection,
    /// Directory relative paths were resolved against.
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 42,
            output_dir: None,
            sources: Vec::new(),
            filter: FilterConfig::default(),
            judge: JudgeConfig::default(),
            executor: ExecutorConfig::default(),
            dedup: DedupSection::default(),
            decontam: DecontamSection::default(),
            alchemist: AlchemistSection::default(),
            tasks: TasksSection::default(),
            mix: MixSection::default(),
            provider: ProviderSection::default(),
            analysis: AnalysisSection::default(),
            training: TrainingSection::default(),
            base_dir: None,
        }
    }
}

fn invalid(key: impl Into<String>, reason: impl Into<String>) -> PipelineError {
    PipelineError::ConfigInvalid { key: key.into(), reason: reason.into() }
}

fn unit_interval(key: &str, value: f64) -> Result<(), PipelineError> {
    if (0.0..=1.0).contains(&value) {
        Ok(())
    } else {
        Err(invalid(key, format!("{value} is outside [0, 1]")))
    }
}

impl PipelineConfig {
    /// Parse TOML text. Errors name the offending key.
    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| invalid("", e.message().to_string()))?;
        let config: PipelineConfig = serde_path_to_error::deserialize(table).map_err(|e| {
            let key = e.path().to_string();
            invalid(if key == "." { String::new() } else { key }, e.into_inner().to_string())
        })?;
        config.validate()?;
        Ok(config)
    }

    /// Load a config file; relative source and reference paths resolve
    /// against the file's directory.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| invalid("", format!("cannot read {}: {e}", path.display())))?;
        let mut config = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve_paths(base);
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        self.base_dir = Some(base.to_path_buf());
        for source in &mut self.sources {
            if source.path.is_relative() {
                source.path = base.join(&source.path);
            }
        }
        if let Some(refs) = &mut self.decontam.references {
            if refs.is_relative() {
                *refs = base.join(&*refs);
            }
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let mut names = std::collections::BTreeSet::new();
        for (i, source) in self.sources.iter().enumerate() {
            if source.name.trim().is_empty() {
                return Err(invalid(format!("sources[{i}].name"), "must not be empty"));
            }
            if !names.insert(source.name.as_str()) {
                return Err(invalid(format!("sources[{i}].name"), format!("duplicate source `{}`", source.name)));
            }
            if source.format.parse::<Format>().is_err() {
                return Err(invalid(format!("sources[{i}].format"), format!("unknown format `{}`", source.format)));
            }
        }
        self.filter.validate().map_err(|(k, r)| invalid(format!("filter.{k}"), r))?;
        if self.executor.max_concurrent == 0 {
            return Err(invalid("executor.max_concurrent", "must be at least 1"));
        }
        unit_interval("dedup.jaccard_threshold", self.dedup.jaccard_threshold)?;
        if self.dedup.ngram_n == 0 {
            return Err(invalid("dedup.ngram_n", "must be at least 1"));
        }
        unit_interval("decontam.jaccard_threshold", self.decontam.jaccard_threshold)?;
        unit_interval("decontam.ast_distance_threshold", self.decontam.ast_distance_threshold)?;
        if !(-1.0..=1.0).contains(&self.decontam.cosine_threshold) {
            return Err(invalid("decontam.cosine_threshold", format!("{} is outside [-1, 1]", self.decontam.cosine_threshold)));
        }
        if self.decontam.ngram_n == 0 || self.decontam.code_ngram_n == 0 {
            return Err(invalid("decontam.ngram_n", "n-gram sizes must be at least 1"));
        }
        match &self.decontam.embedder {
            EmbedderConfig::Hashing { dim } | EmbedderConfig::Http { dim, .. } if *dim == 0 => {
                return Err(invalid("decontam.embedder.dim", "must be at least 1"))
            }
            _ => {}
        }
        unit_interval("alchemist.ratio", self.alchemist.ratio)?;
        self.alchemist.template.validate().map_err(|(k, r)| invalid(format!("alchemist.template.{k}"), r))?;
        unit_interval("tasks.evolution_ratio", self.tasks.evolution_ratio)?;
        unit_interval("tasks.review_ratio", self.tasks.review_ratio)?;
        if self.tasks.evolution.methods.is_empty() {
            return Err(invalid("tasks.evolution.methods", "must list at least one method"));
        }
        for (tag, w) in &self.mix.weights {
            if !(*w >= 0.0 && w.is_finite()) {
                return Err(invalid(format!("mix.weights.{tag}"), format!("weight {w} must be finite and >= 0")));
            }
        }
        if let Some(f) = self.mix.harmonized_fraction {
            if !(f > 0.0 && f < 1.0) {
                return Err(invalid("mix.harmonized_fraction", format!("{f} is outside (0, 1)")));
            }
        }
        if self.analysis.kde.points < 2 {
            return Err(invalid("analysis.kde.points", "must be at least 2"));
        }
        Ok(())
    }

    /// JSON snapshot for the manifest, without machine-specific paths.
    pub fn snapshot(&self) -> serde_json::Value {
        let mut portable = self.clone();
        if let Some(base) = &self.base_dir {
            let strip = |p: &mut PathBuf| {
                if let Ok(rel) = p.strip_prefix(base) {
                    *p = rel.to_path_buf();
                }
            };
            portable.sources.iter_mut().for_each(|s| strip(&mut s.path));
            portable.decontam.references.as_mut().map(strip);
        }
        let mut value = serde_json::to_value(&portable).expect("config serializes");
        if let Some(obj) = value.as_object_mut() {
            obj.remove("output_dir");
        }
        value
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_defaults() {
        assert_eq!(PipelineConfig::from_toml("").unwrap(), PipelineConfig::default());
    }

    #[test]
    fn bad_threshold_names_key() {
        let err = PipelineConfig::from_toml("[decontam]\njaccard_threshold = 1.5\n").unwrap_err();
        match err {
            PipelineError::ConfigInvalid { key, .. } => assert_eq!(key, "decontam.jaccard_threshold"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_key_names_path() {
        let err = PipelineConfig::from_toml("[alchemist]\nratoi = 0.1\n").unwrap_err();
        match err {
            PipelineError::ConfigInvalid { key, reason } => {
                assert!(key.starts_with("alchemist"), "{key}");
                assert!(reason.contains("ratoi"), "{reason}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn wrong_type_names_path() {
        let err = PipelineConfig::from_toml("[mix]\nshuffle = \"yes\"\n").unwrap_err();
        assert!(matches!(err, PipelineError::ConfigInvalid { key, .. } if key == "mix.shuffle"));
    }

    #[test]
    fn full_example_parses() {
        let text = r#"
seed = 7
[[sources]]
name = "evol"
path = "a.jsonl"
[alchemist]
ratio = 0.1
strategy = "replace"
[provider.backend]
kind = "http"
endpoint = "http://localhost:1/v1/chat/completions"
model = "m"
[decontam.embedder]
kind = "none"
[mix.weights]
evol = 0.5
"#;
        let c = PipelineConfig::from_toml(text).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.alchemist.strategy, Strategy::Replace);
        assert!(matches!(c.provider.backend, ProviderKind::Http(_)));
        assert_eq!(c.decontam.embedder, EmbedderConfig::None);
    }
}
