//! Corpus statistics, CPD diagnostics, error tallies and embedding export.

mod cpd;
mod errors;

use std::collections::BTreeMap;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decontam::{EmbedError, Embedder};
use crate::gateway::GatewayError;
use crate::ingest::Sample;

pub use cpd::{compute_cpd, cpd_density, perplexity, silverman_bandwidth, trapezoid, CpdMode, CpdRecord, KdeConfig};
pub use errors::{categorize, categorize_errors, ErrorCaseTally, ErrorCategory, FailureRecord};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("provider does not support token logprobs")]
    NoLogprobSupport,
    #[error(transparent)]
    Gateway(GatewayError),
    #[error("sample `{0}` has an empty response")]
    EmptyResponse(String),
    #[error("need at least 2 values for a density, got {0}")]
    InsufficientData(usize),
    #[error("bandwidth must be positive and finite, got {0}")]
    InvalidBandwidth(f64),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> AnalysisError + '_ {
    move |source| AnalysisError::Io { path: path.display().to_string(), source }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bin {
    pub lo: usize,
    /// Exclusive upper bound; `None` for the open last bin.
    pub hi: Option<usize>,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Histogram {
    pub bins: Vec<Bin>,
}

impl Histogram {
    /// Bins `[e0, e1), [e1, e2), ..., [e_last, ∞)`.
    pub fn with_edges(edges: &[usize]) -> Self {
        let bins = edges
            .iter()
            .enumerate()
            .map(|(i, &lo)| Bin { lo, hi: edges.get(i + 1).copied(), count: 0 })
            .collect();
        Histogram { bins }
    }

    pub fn add(&mut self, value: usize) {
        if let Some(bin) = self.bins.iter_mut().rev().find(|b| value >= b.lo) {
            bin.count += 1;
        }
    }

    pub fn mass(&self) -> usize {
        self.bins.iter().map(|b| b.count).sum()
    }

    /// Count of the bin containing `value`.
    pub fn count_at(&self, value: usize) -> usize {
        self.bins.iter().rev().find(|b| value >= b.lo).map_or(0, |b| b.count)
    }
}

/// Description length bins, in words.
pub const DESCRIPTION_WORD_EDGES: [usize; 8] = [0, 25, 50, 100, 200, 400, 800, 1600];
/// Code line bins.
pub const CODE_LINE_EDGES: [usize; 8] = [0, 1, 5, 10, 20, 50, 100, 200];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub samples: usize,
    pub source_histogram: BTreeMap<String, usize>,
    /// Dominant language per sample; `none` when the response has no code.
    pub language_histogram: BTreeMap<String, usize>,
    /// Words of response prose outside code blocks.
    pub description_length_histogram: Histogram,
    /// Lines summed over all code blocks of a response.
    pub code_lines_histogram: Histogram,
    pub token_total: u64,
}

pub fn description_words(sample: &Sample) -> usize {
    sample.prose().split_whitespace().count()
}

pub fn code_lines(sample: &Sample) -> usize {
    sample.code_blocks().iter().map(|b| b.line_count).sum()
}

pub fn corpus_stats<'a>(corpus: impl IntoIterator<Item = &'a Sample>) -> CorpusStats {
    let mut stats = CorpusStats {
        samples: 0,
        source_histogram: BTreeMap::new(),
        language_histogram: BTreeMap::new(),
        description_length_histogram: Histogram::with_edges(&DESCRIPTION_WORD_EDGES),
        code_lines_histogram: Histogram::with_edges(&CODE_LINE_EDGES),
        token_total: 0,
    };
    for sample in corpus {
        stats.samples += 1;
        *stats.source_histogram.entry(sample.source.clone()).or_default() += 1;
        let language = sample.dominant_language().unwrap_or("none").to_string();
        *stats.language_histogram.entry(language).or_default() += 1;
        stats.description_length_histogram.add(description_words(sample));
        stats.code_lines_histogram.add(code_lines(sample));
        stats.token_total += sample.token_estimate;
    }
    stats
}

/// Write one embedding row per sample (CSV with a `d0..dN` header) and the
/// sample ids, one per line, to `ids_path`. Returns `(rows, dim)`.
pub fn export_embeddings(
    corpus: &[Sample],
    embedder: &dyn Embedder,
    matrix_path: &Path,
    ids_path: &Path,
) -> Result<(usize, usize), AnalysisError> {
    let dim = embedder.dim();
    let rows: Vec<Vec<f32>> = corpus
        .iter()
        .map(|s| embedder.embed(&format!("{}\n{}", s.instruction, s.response())))
        .collect::<Result<_, _>>()?;

    let mut matrix = BufWriter::new(std::fs::File::create(matrix_path).map_err(io_err(matrix_path))?);
    let header: Vec<String> = (0..dim).map(|i| format!("d{i}")).collect();
    writeln!(matrix, "{}", header.join(",")).map_err(io_err(matrix_path))?;
    for row in &rows {
        if row.len() != dim {
            return Err(EmbedError::DimensionMismatch(row.len(), dim).into());
        }
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(matrix, "{}", cells.join(",")).map_err(io_err(matrix_path))?;
    }
    matrix.flush().map_err(io_err(matrix_path))?;

    let mut ids = BufWriter::new(std::fs::File::create(ids_path).map_err(io_err(ids_path))?);
    for sample in corpus {
        writeln!(ids, "{}", sample.id).map_err(io_err(ids_path))?;
    }
    ids.flush().map_err(io_err(ids_path))?;
    Ok((rows.len(), dim))
}

/// Write a density curve as `x,density` CSV.
pub fn write_curve_csv(path: &Path, curve: &[(f64, f64)]) -> Result<(), AnalysisError> {
    let mut out = BufWriter::new(std::fs::File::create(path).map_err(io_err(path))?);
    writeln!(out, "x,density").map_err(io_err(path))?;
    for (x, d) in curve {
        writeln!(out, "{x},{d}").map_err(io_err(path))?;
    }
    out.flush().map_err(io_err(path))
}
