//! Conditional Perplexity Discrepancy and its kernel density.

use serde::{Deserialize, Serialize};

use crate::gateway::{Gateway, GatewayError};
use crate::ingest::Sample;

use super::AnalysisError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CpdMode {
    /// Perplexity over every token of instruction ⊕ response.
    #[default]
    Joint,
    /// Perplexity over response tokens only, conditioned on the instruction.
    Conditional,
}

impl std::str::FromStr for CpdMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "joint" => Ok(CpdMode::Joint),
            "conditional" => Ok(CpdMode::Conditional),
            other => Err(format!("unknown CPD mode `{other}` (expected joint or conditional)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CpdRecord {
    pub sample_id: String,
    pub ppl_joint: f64,
    pub ppl_response: f64,
    pub cpd: f64,
    pub mode: CpdMode,
}

/// `exp(-(1/N) Σ log p)`; `None` for an empty sequence.
pub fn perplexity(logprobs: &[f64]) -> Option<f64> {
    if logprobs.is_empty() {
        return None;
    }
    let mean = logprobs.iter().sum::<f64>() / logprobs.len() as f64;
    Some((-mean).exp())
}

fn gateway_err(e: GatewayError) -> AnalysisError {
    match e {
        GatewayError::NoLogprobSupport => AnalysisError::NoLogprobSupport,
        other => AnalysisError::Gateway(other),
    }
}

/// Perplexity of the response with and without its instruction, and their difference.
pub fn compute_cpd(sample: &Sample, gateway: &Gateway, mode: CpdMode) -> Result<CpdRecord, AnalysisError> {
    let response = sample.response();
    if response.trim().is_empty() {
        return Err(AnalysisError::EmptyResponse(sample.id.clone()));
    }
    let empty = || AnalysisError::EmptyResponse(sample.id.clone());

    let alone = gateway.score_logprobs("", response).map_err(gateway_err)?;
    let ppl_response = perplexity(&alone.logprobs).ok_or_else(empty)?;

    let prefix = if sample.instruction.is_empty() { String::new() } else { format!("{}\n\n", sample.instruction) };
    let ppl_joint = if prefix.is_empty() {
        ppl_response
    } else {
        let joint = gateway.score_logprobs(&prefix, response).map_err(gateway_err)?;
        let scored = match mode {
            CpdMode::Joint => &joint.logprobs[..],
            CpdMode::Conditional => joint.continuation(),
        };
        perplexity(scored).ok_or_else(empty)?
    };
    Ok(CpdRecord { sample_id: sample.id.clone(), ppl_joint, ppl_response, cpd: ppl_joint - ppl_response, mode })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KdeConfig {
    /// Minimum number of grid points.
    pub points: usize,
    /// Grid padding on each side, in bandwidths.
    pub pad_bandwidths: f64,
}

impl Default for KdeConfig {
    fn default() -> Self {
        KdeConfig { points: 512, pad_bandwidths: 4.0 }
    }
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Silverman's rule of thumb, `0.9 · min(σ, IQR/1.34) · n^(-1/5)`.
///
/// Falls back to σ when the IQR is zero, and to `0.1 · max(1, |mean|)` when
/// all values coincide.
pub fn silverman_bandwidth(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    let sd = var.sqrt();
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let iqr = quantile(&sorted, 0.75) - quantile(&sorted, 0.25);
    let spread = match (sd > 0.0, iqr > 0.0) {
        (true, true) => sd.min(iqr / 1.34),
        (true, false) => sd,
        _ => return 0.1 * mean.abs().max(1.0),
    };
    0.9 * spread * n.powf(-0.2)
}

/// Gaussian-kernel density of `values` on an even grid over
/// `[min - pad·h, max + pad·h]`.
///
/// The grid has at least `config.points` points and is refined so that the
/// spacing never exceeds `h/4`, which keeps the trapezoidal integral within
/// 1e-3 of one.
pub fn cpd_density(values: &[f64], bandwidth: Option<f64>, config: &KdeConfig) -> Result<Vec<(f64, f64)>, AnalysisError> {
    if values.len() < 2 {
        return Err(AnalysisError::InsufficientData(values.len()));
    }
    let h = match bandwidth {
        Some(h) if h > 0.0 && h.is_finite() => h,
        Some(h) => return Err(AnalysisError::InvalidBandwidth(h)),
        None => silverman_bandwidth(values),
    };
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = min - config.pad_bandwidths * h;
    let hi = max + config.pad_bandwidths * h;
    let needed = ((hi - lo) / (h / 4.0)).ceil() as usize + 1;
    let points = config.points.max(needed).clamp(2, 1 << 22);
    let step = (hi - lo) / (points - 1) as f64;
    let norm = 1.0 / (values.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    Ok((0..points)
        .map(|i| {
            let x = lo + step * i as f64;
            let density = values.iter().map(|v| (-0.5 * ((x - v) / h).powi(2)).exp()).sum::<f64>() * norm;
            (x, density)
        })
        .collect())
}

/// Trapezoidal integral of a sampled curve.
pub fn trapezoid(curve: &[(f64, f64)]) -> f64 {
    curve.windows(2).map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0).sum()
}
