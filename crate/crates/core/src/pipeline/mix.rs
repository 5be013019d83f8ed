//! Weighted, seeded mixing of corpora.

use rand::seq::index::sample as sample_indices;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::ingest::Sample;

use super::PipelineError;

fn subsample(samples: Vec<Sample>, count: usize, rng: &mut ChaCha8Rng) -> Vec<Sample> {
    let n = samples.len();
    if n == 0 || count == 0 {
        return Vec::new();
    }
    let full = count / n;
    let rest = count % n;
    let mut picked: Vec<usize> = sample_indices(rng, n, rest).into_vec();
    picked.sort_unstable();
    let mut out = Vec::with_capacity(count);
    for copy in 0..full {
        for sample in &samples {
            let mut s = sample.clone();
            if copy > 0 {
                s.id = format!("{}#{}", s.id, copy);
            }
            out.push(s);
        }
    }
    let mut chosen = vec![false; n];
    for i in picked {
        chosen[i] = true;
    }
    for (i, mut s) in samples.into_iter().enumerate() {
        if chosen[i] {
            if full > 0 {
                s.id = format!("{}#{}", s.id, full);
            }
            out.push(s);
        }
    }
    out
}

/// Keep `round(w·n)` samples of each corpus (seeded; weights above one
/// repeat the corpus with `#k` id suffixes), concatenate, and optionally
/// shuffle. Output order is a function of the inputs and `seed`.
pub fn mix(datasets: Vec<(Vec<Sample>, f64)>, seed: u64, shuffle: bool) -> Result<Vec<Sample>, PipelineError> {
    if let Some((_, w)) = datasets.iter().find(|(_, w)| !(*w >= 0.0 && w.is_finite())) {
        return Err(PipelineError::EmptyMix(format!("invalid weight {w}")));
    }
    if datasets.is_empty() || datasets.iter().all(|(_, w)| *w == 0.0) {
        return Err(PipelineError::EmptyMix("no dataset has a positive weight".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (samples, weight) in datasets {
        let count = (weight * samples.len() as f64).round() as usize;
        out.extend(subsample(samples, count, &mut rng));
    }
    if shuffle {
        out.shuffle(&mut rng);
    }
    Ok(out)
}

/// Subsample one side so that `harmonized` makes up `target` of the union.
pub fn balance_fraction(
    base: Vec<Sample>,
    harmonized: Vec<Sample>,
    target: f64,
    seed: u64,
) -> (Vec<Sample>, Vec<Sample>) {
    let (b, h) = (base.len() as f64, harmonized.len() as f64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let wanted_h = (target / (1.0 - target) * b).round() as usize;
    if wanted_h <= harmonized.len() {
        (base, subsample(harmonized, wanted_h, &mut rng))
    } else {
        let wanted_b = (h * (1.0 - target) / target).round() as usize;
        let wanted_b = wanted_b.min(base.len());
        (subsample(base, wanted_b, &mut rng), harmonized)
    }
}
