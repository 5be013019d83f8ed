//! Near-duplicate removal and benchmark decontamination.
//!
//! Three signals are computed for every candidate (sample, reference) pair:
//! word n-gram Jaccard, code-embedding cosine and normalized syntax-tree edit
//! distance over identifier-canonicalized trees. A sample is flagged when any
//! present signal crosses its threshold. Candidate pairs come from inverted
//! indexes over word n-grams and over canonical code-token n-grams, plus an
//! embedding shortlist when an embedder is configured.

mod embed;
mod ngram;
mod ted;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::Sample;
use crate::syntax::{self, SyntaxError};

pub use embed::{embedding_cosine, EmbedError, Embedder, FixedEmbedder, HashingEmbedder, HttpEmbedder};
pub use ngram::{jaccard_sets, ngram_jaccard, ngram_set, normalize_tokens, NgramIndex};
pub use ted::{normalized_tree_distance, tree_edit_distance, LabeledTree};

#[derive(Debug, Error)]
pub enum DecontamError {
    #[error("references line {line}: {reason}")]
    BadReference { line: usize, reason: String },
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

/// Tree edit distance between two sources after identifier canonicalization.
/// Returns `(raw, raw / max(node count))`.
pub fn ast_edit_distance(code_a: &str, code_b: &str, language: &str) -> Result<(usize, f64), SyntaxError> {
    let a = syntax::canonical_tree(code_a, language)?;
    let b = syntax::canonical_tree(code_b, language)?;
    Ok(normalized_tree_distance(&a, &b))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecontamConfig {
    /// Word n-gram size for the Jaccard channel.
    pub ngram_n: usize,
    /// Flag when Jaccard >= this.
    pub jaccard_threshold: f64,
    /// Flag when normalized tree edit distance <= this.
    pub ast_distance_threshold: f64,
    /// Flag when cosine >= this.
    pub cosine_threshold: f64,
    /// n-gram size over canonical code tokens, used only for candidate generation.
    pub code_ngram_n: usize,
}

impl Default for DecontamConfig {
    fn default() -> Self {
        DecontamConfig {
            ngram_n: 10,
            jaccard_threshold: 0.6,
            ast_distance_threshold: 0.15,
            cosine_threshold: 0.90,
            code_ngram_n: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DedupConfig {
    pub ngram_n: usize,
    pub jaccard_threshold: f64,
}

impl Default for DedupConfig {
    fn default() -> Self {
        DedupConfig { ngram_n: 5, jaccard_threshold: 0.8 }
    }
}

/// One benchmark item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    pub id: String,
    pub prompt: String,
    pub canonical_solution: String,
    #[serde(default = "default_reference_language")]
    pub language: String,
}

fn default_reference_language() -> String {
    "python".to_string()
}

/// Read a references file: JSONL with `id`, `prompt`, `canonical_solution`.
pub fn load_references(path: &Path) -> Result<Vec<Reference>, DecontamError> {
    let reader = BufReader::new(File::open(path)?);
    let mut refs = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut value: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| DecontamError::BadReference { line: i + 1, reason: e.to_string() })?;
        // benchmark dumps use `task_id`
        if value.get("id").is_none() {
            if let Some(task_id) = value.get("task_id").cloned() {
                let id = task_id.as_str().map(str::to_string).unwrap_or_else(|| task_id.to_string());
                value["id"] = serde_json::Value::String(id);
            }
        }
        let reference: Reference =
            serde_json::from_value(value).map_err(|e| DecontamError::BadReference { line: i + 1, reason: e.to_string() })?;
        refs.push(reference);
    }
    Ok(refs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    NgramJaccard,
    AstEdit,
    EmbeddingCosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityScores {
    pub reference_id: String,
    pub ngram_jaccard: f64,
    pub embedding_cosine: Option<f64>,
    pub ast_edit_norm: Option<f64>,
}

impl SimilarityScores {
    /// Channels crossing their thresholds, in the order jaccard, tree, cosine.
    pub fn crossings(&self, config: &DecontamConfig) -> Vec<Metric> {
        let mut out = Vec::new();
        if self.ngram_jaccard >= config.jaccard_threshold {
            out.push(Metric::NgramJaccard);
        }
        if self.ast_edit_norm.is_some_and(|d| d <= config.ast_distance_threshold) {
            out.push(Metric::AstEdit);
        }
        if self.embedding_cosine.is_some_and(|c| c >= config.cosine_threshold) {
            out.push(Metric::EmbeddingCosine);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlaggedPair {
    pub sample_id: String,
    pub scores: SimilarityScores,
    pub trigger: Metric,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelCounts {
    pub ngram_jaccard: usize,
    pub ast_edit: usize,
    pub embedding_cosine: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContaminationReport {
    pub thresholds: DecontamConfig,
    pub corpus_size: usize,
    pub reference_count: usize,
    pub candidate_pairs: usize,
    /// Flagged samples per channel (a sample counts once per channel it crossed).
    pub channel_counts: ChannelCounts,
    pub flagged: Vec<FlaggedPair>,
    pub flagged_samples: usize,
    pub removal_fraction: f64,
    pub notes: Vec<String>,
}

struct Prepared {
    word_grams: HashSet<u64>,
    code_word_grams: HashSet<u64>,
    canon_grams: HashSet<u64>,
    trees: Vec<(String, LabeledTree)>,
    embedding: Option<Vec<f32>>,
}

fn prepare_code(code: &str, language: &str, n: usize, trees: &mut Vec<(String, LabeledTree)>, canon: &mut HashSet<u64>) {
    if let Ok(tree) = syntax::canonical_tree(code, language) {
        let mut leaves = Vec::new();
        collect_leaves(&tree, &mut leaves);
        canon.extend(ngram_set(&leaves, n));
        trees.push((language.to_string(), tree));
    }
}

fn collect_leaves<'a>(t: &'a LabeledTree, out: &mut Vec<&'a str>) {
    if t.children.is_empty() {
        out.push(&t.label);
    }
    for c in &t.children {
        collect_leaves(c, out);
    }
}

fn prepare_reference(r: &Reference, config: &DecontamConfig) -> Prepared {
    let mut trees = Vec::new();
    let mut canon = HashSet::new();
    // function-body solutions are only meaningful together with their signature prompt
    let joined = format!("{}{}", r.prompt, r.canonical_solution);
    if syntax::check_syntax(&joined, &r.language).is_ok() {
        prepare_code(&joined, &r.language, config.code_ngram_n, &mut trees, &mut canon);
    } else {
        prepare_code(&r.canonical_solution, &r.language, config.code_ngram_n, &mut trees, &mut canon);
    }
    Prepared {
        word_grams: ngram_set(&normalize_tokens(&format!("{}\n{}", r.prompt, r.canonical_solution)), config.ngram_n),
        code_word_grams: ngram_set(&normalize_tokens(&r.canonical_solution), config.ngram_n),
        canon_grams: canon,
        trees,
        embedding: None,
    }
}

fn prepare_sample(s: &Sample, config: &DecontamConfig) -> Prepared {
    let mut trees = Vec::new();
    let mut canon = HashSet::new();
    for block in s.code_blocks() {
        if syntax::has_grammar(&block.language) {
            prepare_code(&block.code, &block.language, config.code_ngram_n, &mut trees, &mut canon);
        }
    }
    Prepared {
        word_grams: ngram_set(&normalize_tokens(&format!("{}\n{}", s.instruction, s.response())), config.ngram_n),
        code_word_grams: ngram_set(&normalize_tokens(&s.code_text()), config.ngram_n),
        canon_grams: canon,
        trees,
        embedding: None,
    }
}

fn embedding_text(sample: &Sample) -> String {
    if sample.code_blocks().is_empty() {
        sample.response().to_string()
    } else {
        sample.code_text()
    }
}

fn score_pair(sample: &Prepared, reference: &Prepared, reference_id: &str) -> SimilarityScores {
    let jaccard = jaccard_sets(&sample.word_grams, &reference.word_grams)
        .max(jaccard_sets(&sample.code_word_grams, &reference.code_word_grams));
    let ast = sample
        .trees
        .iter()
        .flat_map(|(lang, st)| {
            reference
                .trees
                .iter()
                .filter(move |(rlang, _)| rlang == lang)
                .map(move |(_, rt)| normalized_tree_distance(st, rt).1)
        })
        .fold(None, |best: Option<f64>, d| Some(best.map_or(d, |b| b.min(d))));
    let cosine = match (&sample.embedding, &reference.embedding) {
        (Some(a), Some(b)) => embedding_cosine(a, b).ok(),
        _ => None,
    };
    SimilarityScores {
        reference_id: reference_id.to_string(),
        ngram_jaccard: jaccard,
        embedding_cosine: cosine,
        ast_edit_norm: ast,
    }
}

/// Remove samples too similar to any benchmark reference.
pub fn decontaminate(
    corpus: Vec<Sample>,
    references: &[Reference],
    embedder: Option<&dyn Embedder>,
    config: &DecontamConfig,
) -> (Vec<Sample>, ContaminationReport) {
    let mut notes = Vec::new();
    let mut prepared_refs: Vec<Prepared> = references.par_iter().map(|r| prepare_reference(r, config)).collect();
    let mut prepared_samples: Vec<Prepared> = corpus.par_iter().map(|s| prepare_sample(s, config)).collect();

    let mut cosine_enabled = false;
    if let Some(embedder) = embedder {
        let embedded = prepared_refs
            .iter_mut()
            .zip(references)
            .try_for_each(|(p, r)| embedder.embed(&r.canonical_solution).map(|v| p.embedding = Some(v)))
            .and_then(|_| {
                prepared_samples
                    .par_iter_mut()
                    .zip(corpus.par_iter())
                    .try_for_each(|(p, s)| embedder.embed(&embedding_text(s)).map(|v| p.embedding = Some(v)))
            });
        match embedded {
            Ok(()) => cosine_enabled = true,
            Err(e) => {
                notes.push(format!("cosine channel skipped: {e}"));
                prepared_refs.iter_mut().for_each(|p| p.embedding = None);
                prepared_samples.iter_mut().for_each(|p| p.embedding = None);
            }
        }
    } else {
        notes.push("cosine channel skipped: no embedder configured".to_string());
    }

    let mut word_index = NgramIndex::new();
    let mut canon_index = NgramIndex::new();
    for (i, p) in prepared_refs.iter().enumerate() {
        word_index.insert(i as u32, &p.word_grams);
        word_index.insert(i as u32, &p.code_word_grams);
        canon_index.insert(i as u32, &p.canon_grams);
    }

    let per_sample: Vec<(usize, Vec<FlaggedPair>)> = prepared_samples
        .par_iter()
        .zip(corpus.par_iter())
        .map(|(p, sample)| {
            let mut candidates: Vec<u32> = word_index.candidates(&p.word_grams);
            candidates.extend(word_index.candidates(&p.code_word_grams));
            candidates.extend(canon_index.candidates(&p.canon_grams));
            if cosine_enabled {
                let own = p.embedding.as_deref().expect("embedded");
                for (i, r) in prepared_refs.iter().enumerate() {
                    let close = r
                        .embedding
                        .as_deref()
                        .and_then(|e| embedding_cosine(own, e).ok())
                        .is_some_and(|c| c >= config.cosine_threshold);
                    if close {
                        candidates.push(i as u32);
                    }
                }
            }
            candidates.sort_unstable();
            candidates.dedup();
            let flagged = candidates
                .iter()
                .filter_map(|&ri| {
                    let r = ri as usize;
                    let scores = score_pair(p, &prepared_refs[r], &references[r].id);
                    let crossing = scores.crossings(config);
                    crossing.first().map(|&trigger| FlaggedPair { sample_id: sample.id.clone(), scores, trigger })
                })
                .collect();
            (candidates.len(), flagged)
        })
        .collect();

    let candidate_pairs = per_sample.iter().map(|(c, _)| c).sum();
    let mut flagged_ids = HashSet::new();
    let mut per_channel: BTreeMap<&'static str, HashSet<String>> = BTreeMap::new();
    let mut flagged: Vec<FlaggedPair> = Vec::new();
    for (_, pairs) in per_sample {
        for pair in pairs {
            for metric in pair.scores.crossings(config) {
                let key = match metric {
                    Metric::NgramJaccard => "jaccard",
                    Metric::AstEdit => "ast",
                    Metric::EmbeddingCosine => "cosine",
                };
                per_channel.entry(key).or_default().insert(pair.sample_id.clone());
            }
            flagged_ids.insert(pair.sample_id.clone());
            flagged.push(pair);
        }
    }
    flagged.sort_by(|a, b| (&a.sample_id, &a.scores.reference_id).cmp(&(&b.sample_id, &b.scores.reference_id)));

    let corpus_size = corpus.len();
    let count = |k: &str| per_channel.get(k).map_or(0, HashSet::len);
    let report = ContaminationReport {
        thresholds: config.clone(),
        corpus_size,
        reference_count: references.len(),
        candidate_pairs,
        channel_counts: ChannelCounts {
            ngram_jaccard: count("jaccard"),
            ast_edit: count("ast"),
            embedding_cosine: count("cosine"),
        },
        flagged_samples: flagged_ids.len(),
        removal_fraction: if corpus_size == 0 { 0.0 } else { flagged_ids.len() as f64 / corpus_size as f64 },
        flagged,
        notes,
    };
    let clean = corpus.into_iter().filter(|s| !flagged_ids.contains(&s.id)).collect();
    (clean, report)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DuplicateCluster {
    pub survivor: String,
    /// All member ids, sorted, survivor included.
    pub members: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DedupReport {
    pub thresholds: DedupConfig,
    pub input: usize,
    pub removed: usize,
    pub clusters: Vec<DuplicateCluster>,
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Collapse near-duplicate clusters to their lowest-id member.
///
/// Two samples are linked when their normalized token sequences are equal or
/// their n-gram Jaccard over instruction + response reaches the threshold;
/// clusters are the connected components of that relation.
pub fn dedup(corpus: Vec<Sample>, config: &DedupConfig) -> (Vec<Sample>, DedupReport) {
    let tokens: Vec<Vec<String>> = corpus
        .par_iter()
        .map(|s| normalize_tokens(&format!("{}\n{}", s.instruction, s.response())))
        .collect();
    let grams: Vec<HashSet<u64>> = tokens.par_iter().map(|t| ngram_set(t, config.ngram_n)).collect();

    let mut index = NgramIndex::new();
    for (i, g) in grams.iter().enumerate() {
        index.insert(i as u32, g);
    }

    let mut parent: Vec<usize> = (0..corpus.len()).collect();
    let mut exact: HashMap<&[String], usize> = HashMap::new();
    for (i, t) in tokens.iter().enumerate() {
        if let Some(&j) = exact.get(t.as_slice()) {
            let (a, b) = (find(&mut parent, i), find(&mut parent, j));
            parent[a] = b;
        } else {
            exact.insert(t, i);
        }
    }

    let links: Vec<(usize, usize)> = grams
        .par_iter()
        .enumerate()
        .flat_map_iter(|(i, g)| {
            index
                .candidates(g)
                .into_iter()
                .map(|j| j as usize)
                .filter(move |&j| j > i)
                .filter(|&j| jaccard_sets(g, &grams[j]) >= config.jaccard_threshold)
                .map(move |j| (i, j))
                .collect::<Vec<_>>()
        })
        .collect();
    for (i, j) in links {
        let (a, b) = (find(&mut parent, i), find(&mut parent, j));
        if a != b {
            parent[a.max(b)] = a.min(b);
        }
    }

    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..corpus.len() {
        let root = find(&mut parent, i);
        groups.entry(root).or_default().push(i);
    }

    let mut keep = vec![true; corpus.len()];
    let mut clusters = Vec::new();
    for members in groups.values().filter(|m| m.len() > 1) {
        let survivor = *members.iter().min_by(|&&a, &&b| corpus[a].id.cmp(&corpus[b].id)).expect("non-empty");
        for &m in members {
            keep[m] = m == survivor;
        }
        let mut ids: Vec<String> = members.iter().map(|&m| corpus[m].id.clone()).collect();
        ids.sort();
        clusters.push(DuplicateCluster { survivor: corpus[survivor].id.clone(), members: ids });
    }
    clusters.sort_by(|a, b| a.survivor.cmp(&b.survivor));

    let input = corpus.len();
    let deduped: Vec<Sample> = corpus.into_iter().zip(keep).filter_map(|(s, k)| k.then_some(s)).collect();
    let report = DedupReport { thresholds: config.clone(), input, removed: input - deduped.len(), clusters };
    (deduped, report)
}
