//! Acceptance run: one PASS/FAIL line per criterion.

mod common;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use alchemist::alchemist::{apply_customization, generate_alchemist_prompt, select_candidates, PromptTemplate, Strategy, SOURCE_ALCHEMIST};
use alchemist::analysis::{categorize, categorize_errors, compute_cpd, cpd_density, CpdMode, ErrorCategory, FailureRecord, KdeConfig};
use alchemist::decontam::{
    decontaminate, load_references, ngram_jaccard, tree_edit_distance, DecontamConfig, HashingEmbedder, LabeledTree,
};
use alchemist::gateway::{Gateway, LogprobModel, MockProvider};
use alchemist::ingest::{load_all, Sample};
use alchemist::pipeline::{layout, run_pipeline, PipelineConfig, SourceConfig};
use alchemist::quality::{apply_removal_policy, classify_quality, ExecutorConfig, ExecutorRegistry, FilterConfig, QualityFlag};
use alchemist::tasks::is_selected;

use common::{count_lines, fixture, synthetic_python, write_synthetic_corpus};

type Check = fn() -> Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn ratio_fidelity() -> Result<String, String> {
    let corpus: Vec<Sample> = (0..10_000).map(synthetic_python).collect();
    let chosen = select_candidates(&corpus, 0.05, 42);
    ensure(chosen.len() == 500, || format!("selected {} candidates", chosen.len()))?;
    let gateway = Gateway::new(Arc::new(MockProvider::offline()));
    let template = PromptTemplate::default();
    let records = corpus
        .iter()
        .filter(|s| chosen.contains(&s.id))
        .map(|s| generate_alchemist_prompt(s, &gateway, &template))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;
    let passed = records.iter().filter(|r| r.validation.passed).count();
    ensure(passed == 500, || format!("{passed} of 500 prompts validated"))?;

    let augment = apply_customization(corpus.clone(), &records, Strategy::Augment).map_err(|e| e.to_string())?;
    let customized = augment.iter().filter(|s| s.source == SOURCE_ALCHEMIST).count();
    ensure(augment.len() == 10_500 && customized == 500, || format!("augment: {} total, {customized} customized", augment.len()))?;
    let replace = apply_customization(corpus, &records, Strategy::Replace).map_err(|e| e.to_string())?;
    let customized = replace.iter().filter(|s| s.source == SOURCE_ALCHEMIST).count();
    ensure(replace.len() == 10_000 && customized == 500, || format!("replace: {} total, {customized} customized", replace.len()))?;
    Ok("500 customized; augment 10500, replace 10000".into())
}

fn review_truth_table() -> Result<String, String> {
    // selection rule as worded: average above 8 or below 6, or either score at most 4
    let oracle = |c: u8, l: u8| {
        let avg = (c as f64 + l as f64) / 2.0;
        !(6.0..=8.0).contains(&avg) || c <= 4 || l <= 4
    };
    let mut selected = 0;
    for c in 0..=10u8 {
        for l in 0..=10u8 {
            ensure(is_selected(c, l) == oracle(c, l), || format!("mismatch at ({c}, {l})"))?;
            selected += oracle(c, l) as usize;
        }
    }
    Ok(format!("121/121 pairs agree ({selected} selected)"))
}

fn decontamination_recall() -> Result<String, String> {
    let mut clean = Vec::new();
    for (name, format) in [("evol_instruct", "jsonl-instruction-output"), ("code_alpaca", "jsonl-instruction-output")] {
        let (samples, _) = load_all(&fixture(&format!("corpus/{name}.jsonl")), name, format).map_err(|e| e.to_string())?;
        clean.extend(samples.into_iter().filter(|s| ["py-", "js-", "cpp-"].iter().any(|p| s.id.starts_with(p))));
    }
    clean.truncate(100);
    ensure(clean.len() == 100, || format!("only {} clean fixture samples", clean.len()))?;
    let (planted, _) =
        load_all(&fixture("planted_contaminants.jsonl"), "planted", "jsonl-instruction-output").map_err(|e| e.to_string())?;
    ensure(planted.len() == 10, || format!("{} planted samples", planted.len()))?;
    let planted_ids: BTreeSet<String> = planted.iter().map(|s| s.id.clone()).collect();
    let references = load_references(&fixture("references.jsonl")).map_err(|e| e.to_string())?;

    let corpus: Vec<Sample> = clean.into_iter().chain(planted).collect();
    let embedder = HashingEmbedder::new(256);
    let (_, report) = decontaminate(corpus, &references, Some(&embedder), &DecontamConfig::default());
    let flagged: BTreeSet<String> = report.flagged.iter().map(|f| f.sample_id.clone()).collect();
    let missed: Vec<_> = planted_ids.difference(&flagged).collect();
    let false_pos: Vec<_> = flagged.difference(&planted_ids).collect();
    ensure(missed.is_empty() && false_pos.is_empty(), || format!("missed {missed:?}, false positives {false_pos:?}"))?;
    Ok("10/10 planted flagged, 0/100 clean flagged".into())
}

/// Brute-force word n-gram Jaccard over explicit token tuples.
fn jaccard_oracle(a: &str, b: &str, n: usize) -> f64 {
    let grams = |t: &str| -> BTreeSet<Vec<String>> {
        let tokens: Vec<String> = t.split_whitespace().map(str::to_string).collect();
        if tokens.len() < n {
            return BTreeSet::new();
        }
        (0..=tokens.len() - n).map(|i| tokens[i..i + n].to_vec()).collect()
    };
    let (ga, gb) = (grams(a), grams(b));
    if ga.is_empty() || gb.is_empty() {
        return 0.0;
    }
    let inter = ga.intersection(&gb).count();
    let union = ga.union(&gb).count();
    inter as f64 / union as f64
}

fn random_tree(rng: &mut ChaCha8Rng, max_nodes: usize) -> LabeledTree {
    let n = rng.gen_range(1..=max_nodes);
    let labels = ["a", "b", "c"];
    // parent[i] < i gives a random rooted ordered tree
    let parents: Vec<usize> = (1..n).map(|i| rng.gen_range(0..i)).collect();
    fn build(i: usize, parents: &[usize], labels: &[&str]) -> LabeledTree {
        let children =
            (1..=parents.len()).filter(|&c| parents[c - 1] == i).map(|c| build(c, parents, labels)).collect();
        LabeledTree::new(labels[i], children)
    }
    let node_labels: Vec<&str> = (0..n).map(|_| labels[rng.gen_range(0..labels.len())]).collect();
    build(0, &parents, &node_labels)
}

/// Preorder labels plus ancestor relation.
fn flatten(t: &LabeledTree) -> (Vec<String>, Vec<Vec<bool>>) {
    fn walk(t: &LabeledTree, stack: &mut Vec<usize>, labels: &mut Vec<String>, anc_pairs: &mut Vec<(usize, usize)>) {
        let me = labels.len();
        labels.push(t.label.clone());
        for &a in stack.iter() {
            anc_pairs.push((a, me));
        }
        stack.push(me);
        for c in &t.children {
            walk(c, stack, labels, anc_pairs);
        }
        stack.pop();
    }
    let (mut labels, mut pairs) = (Vec::new(), Vec::new());
    walk(t, &mut Vec::new(), &mut labels, &mut pairs);
    let mut anc = vec![vec![false; labels.len()]; labels.len()];
    for (a, d) in pairs {
        anc[a][d] = true;
    }
    (labels, anc)
}

/// Tree edit distance by exhaustive search over all valid edit mappings.
fn ted_oracle(a: &LabeledTree, b: &LabeledTree) -> usize {
    let (la, aa) = flatten(a);
    let (lb, ab) = flatten(b);
    fn search(i: usize, pairs: &mut Vec<(usize, usize)>, used: &mut Vec<bool>, ctx: &Ctx, best: &mut usize) {
        if i == ctx.la.len() {
            let relabel = pairs.iter().filter(|(x, y)| ctx.la[*x] != ctx.lb[*y]).count();
            let cost = relabel + (ctx.la.len() - pairs.len()) + (ctx.lb.len() - pairs.len());
            *best = (*best).min(cost);
            return;
        }
        search(i + 1, pairs, used, ctx, best);
        for j in 0..ctx.lb.len() {
            if used[j] {
                continue;
            }
            // earlier pairs come first in preorder on both sides, with ancestry preserved
            let ok = pairs.iter().all(|&(x, y)| y < j && ctx.aa[x][i] == ctx.ab[y][j]);
            if ok {
                used[j] = true;
                pairs.push((i, j));
                search(i + 1, pairs, used, ctx, best);
                pairs.pop();
                used[j] = false;
            }
        }
    }
    struct Ctx {
        la: Vec<String>,
        lb: Vec<String>,
        aa: Vec<Vec<bool>>,
        ab: Vec<Vec<bool>>,
    }
    let ctx = Ctx { la, lb, aa, ab };
    let mut best = usize::MAX;
    search(0, &mut Vec::new(), &mut vec![false; ctx.lb.len()], &ctx, &mut best);
    best
}

fn metric_oracles() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let vocab = ["def", "return", "x", "y", "for", "in", "range", "if", "else", "print"];
    let text = |rng: &mut ChaCha8Rng| -> String {
        let len = rng.gen_range(0..40);
        (0..len).map(|_| vocab[rng.gen_range(0..vocab.len())]).collect::<Vec<_>>().join(" ")
    };
    for k in 0..1000 {
        let (a, b) = (text(&mut rng), text(&mut rng));
        let n = rng.gen_range(1..=6);
        let (got, want) = (ngram_jaccard(&a, &b, n), jaccard_oracle(&a, &b, n));
        ensure(got == want, || format!("jaccard pair {k} (n={n}): {got} vs {want}"))?;
    }
    for k in 0..200 {
        let (a, b) = (random_tree(&mut rng, 5), random_tree(&mut rng, 5));
        let (got, want) = (tree_edit_distance(Some(&a), Some(&b)), ted_oracle(&a, &b));
        ensure(got == want, || format!("tree pair {k}: {got} vs {want}\n{a:?}\n{b:?}"))?;
    }
    for k in 0..300 {
        let (x, y, z) = (random_tree(&mut rng, 7), random_tree(&mut rng, 7), random_tree(&mut rng, 7));
        let d = |p: &LabeledTree, q: &LabeledTree| tree_edit_distance(Some(p), Some(q));
        ensure(d(&x, &x) == 0, || format!("triple {k}: d(x,x) != 0"))?;
        ensure(d(&x, &y) == d(&y, &x), || format!("triple {k}: asymmetric"))?;
        ensure((d(&x, &y) == 0) == (x == y), || format!("triple {k}: identity of indiscernibles"))?;
        ensure(d(&x, &z) <= d(&x, &y) + d(&y, &z), || format!("triple {k}: triangle inequality"))?;
    }
    Ok("1000 jaccard pairs, 200 tree pairs exact; 300 triples satisfy metric axioms".into())
}

fn disposition_law() -> Result<String, String> {
    let (samples, skipped) =
        load_all(&fixture("quality_labeled.jsonl"), "labeled", "jsonl-instruction-output").map_err(|e| e.to_string())?;
    ensure(samples.len() == 100 && skipped == 0, || format!("{} samples, {skipped} skipped", samples.len()))?;
    let executor = ExecutorRegistry::new(ExecutorConfig::default());
    let judge = Gateway::new(Arc::new(MockProvider::offline()));
    let config = FilterConfig::default();
    let removal: BTreeSet<QualityFlag> =
        [QualityFlag::TooShortNoCode, QualityFlag::CompileFailure, QualityFlag::TestCaseFailure].into();

    let mut expected_bucket = HashMap::new();
    let mut disagreements = Vec::new();
    let mut verdicts = Vec::new();
    for s in samples {
        let labels: BTreeSet<QualityFlag> = serde_json::from_str(&s.meta["expected_flags"]).map_err(|e| e.to_string())?;
        let bucket = if labels.is_empty() {
            "kept"
        } else if labels.iter().any(|f| removal.contains(f)) {
            "removed"
        } else {
            "recycled"
        };
        expected_bucket.insert(s.id.clone(), bucket);
        let verdict = classify_quality(&s, &config, &executor, Some(&judge));
        let got: BTreeSet<QualityFlag> = verdict.flags.iter().copied().collect();
        if got != labels {
            disagreements.push(format!("{}: got {got:?}, labeled {labels:?}", s.id));
        }
        verdicts.push((s, verdict));
    }
    let partition = apply_removal_policy(verdicts);
    let total = partition.kept.len() + partition.removed.len() + partition.recycled.len();
    ensure(total == 100, || format!("partition holds {total} samples"))?;
    let mut misplaced = Vec::new();
    let buckets = [
        ("kept", partition.kept.iter().collect::<Vec<_>>()),
        ("removed", partition.removed.iter().map(|(s, _)| s).collect()),
        ("recycled", partition.recycled.iter().map(|(s, _)| s).collect()),
    ];
    for (bucket, members) in &buckets {
        for s in members {
            if expected_bucket[&s.id] != *bucket {
                misplaced.push(format!("{} in {bucket}, labeled {}", s.id, expected_bucket[&s.id]));
            }
        }
    }
    ensure(misplaced.is_empty(), || format!("misplaced: {misplaced:?}"))?;
    ensure(disagreements.is_empty(), || format!("flag disagreements: {disagreements:?}"))?;
    Ok(format!(
        "kept {}, removed {}, recycled {}; flags agree with labels 100/100",
        partition.kept.len(),
        partition.removed.len(),
        partition.recycled.len()
    ))
}

fn trapezoid_oracle(curve: &[(f64, f64)]) -> f64 {
    let mut area = 0.0;
    for i in 1..curve.len() {
        let (x0, y0) = curve[i - 1];
        let (x1, y1) = curve[i];
        area += 0.5 * (y0 + y1) * (x1 - x0);
    }
    area
}

fn cpd_sanity() -> Result<String, String> {
    let (corpus, _) = load_all(&fixture("corpus/evol_instruct.jsonl"), "evol_instruct", "jsonl-instruction-output")
        .map_err(|e| e.to_string())?;
    let vocab = 1000usize;
    let uniform = Gateway::new(Arc::new(MockProvider::sequence(vec![]).with_logprobs(LogprobModel::Uniform { vocab })));
    let cache = Gateway::new(Arc::new(MockProvider::sequence(vec![]).with_logprobs(LogprobModel::Cache { vocab: 50_000, boost: 2000.0 })));
    let ppl = |lps: &[f64]| (-(lps.iter().sum::<f64>() / lps.len() as f64)).exp();

    let mut checked = 0;
    let mut spread = Vec::new();
    for s in corpus.iter().filter(|s| !s.response().trim().is_empty()) {
        for mode in [CpdMode::Joint, CpdMode::Conditional] {
            let r = compute_cpd(s, &uniform, mode).map_err(|e| e.to_string())?;
            ensure(r.cpd.abs() <= 1e-9, || format!("{} {mode:?}: cpd {}", s.id, r.cpd))?;
            ensure((r.ppl_response - vocab as f64).abs() <= 1e-9, || format!("{}: ppl {}", s.id, r.ppl_response))?;

            let r = compute_cpd(s, &cache, mode).map_err(|e| e.to_string())?;
            let alone = cache.score_logprobs("", s.response()).map_err(|e| e.to_string())?;
            let joint = cache.score_logprobs(&format!("{}\n\n", s.instruction), s.response()).map_err(|e| e.to_string())?;
            let scored = match mode {
                CpdMode::Joint => joint.logprobs.clone(),
                CpdMode::Conditional => joint.logprobs[joint.boundary..].to_vec(),
            };
            let (want_r, want_j) = (ppl(&alone.logprobs), ppl(&scored));
            ensure((r.ppl_response - want_r).abs() <= 1e-9 * want_r.max(1.0), || format!("{}: ppl_response {} vs {want_r}", s.id, r.ppl_response))?;
            ensure((r.ppl_joint - want_j).abs() <= 1e-9 * want_j.max(1.0), || format!("{}: ppl_joint {} vs {want_j}", s.id, r.ppl_joint))?;
            spread.push(r.cpd);
            checked += 1;
        }
    }
    let zeros = vec![0.0; 50];
    for (name, values) in [("cache-model CPD", &spread), ("uniform CPD", &zeros)] {
        let curve = cpd_density(values, None, &KdeConfig::default()).map_err(|e| e.to_string())?;
        let area = trapezoid_oracle(&curve);
        ensure((area - 1.0).abs() <= 1e-3, || format!("{name} density integrates to {area}"))?;
    }
    Ok(format!("{checked} sample-mode pairs: uniform cpd = 0, PPL matches oracle; KDE mass within 1e-3"))
}

fn end_to_end_determinism() -> Result<String, String> {
    let config = PipelineConfig::load(&fixture("pipeline.toml")).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let ma = run_pipeline(&config, &a, true).map_err(|e| e.to_string())?;
    let mb = run_pipeline(&config, &b, true).map_err(|e| e.to_string())?;
    ensure(ma == mb, || "manifests differ".into())?;
    for rel in [layout::TRAIN, layout::TRAIN_INSTRUCTION_OUTPUT, layout::TRAIN_MESSAGES, layout::MANIFEST] {
        let (x, y) = (std::fs::read(a.join(rel)).map_err(|e| e.to_string())?, std::fs::read(b.join(rel)).map_err(|e| e.to_string())?);
        ensure(x == y, || format!("{rel} differs between runs"))?;
    }
    // recount the conservation terms from the checkpoint files
    let lines = |rel: &str| count_lines(&a.join(rel));
    let ingested = lines(layout::INGEST);
    let rejected = lines(layout::REJECTS);
    let deduped = lines(layout::CLEAN) - lines(layout::DEDUP);
    let decontaminated = lines(layout::DEDUP) - lines(layout::DECONTAM);
    let kept = lines(layout::DECONTAM);
    let c = &ma.conservation;
    ensure(ingested == kept + rejected + deduped + decontaminated, || "recounted conservation fails".into())?;
    ensure(
        (c.ingested, c.kept, c.removed_by_clean, c.deduped_away, c.removed_by_decontam)
            == (ingested, kept, rejected, deduped, decontaminated)
            && c.holds,
        || format!("manifest {c:?} vs recount ({ingested}, {kept}, {rejected}, {deduped}, {decontaminated})"),
    )?;
    ensure(ma.files[layout::TRAIN] == ma.total_samples, || "manifest line count mismatch".into())?;
    Ok(format!(
        "byte-identical outputs; {ingested} = {kept} kept + {rejected} clean + {deduped} dedup + {decontaminated} decontam"
    ))
}

fn manifest_composition() -> Result<String, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let corpus = dir.path().join("corpus.jsonl");
    write_synthetic_corpus(&corpus, 10_000, Some(40)).map_err(|e| e.to_string())?;
    let mut config = PipelineConfig::default();
    config.sources.push(SourceConfig { name: "synthetic".into(), path: corpus, format: "jsonl-instruction-output".into() });
    config.executor.dry_run = true;
    config.dedup.enabled = false;
    config.decontam.embedder = alchemist::pipeline::EmbedderConfig::None;
    config.analysis.cpd = false;
    config.mix.harmonized_fraction = Some(0.08);
    let manifest = run_pipeline(&config, &dir.path().join("out"), true).map_err(|e| e.to_string())?;
    let f = manifest.harmonized_fraction;
    ensure((f - 0.08).abs() <= 0.005, || format!("harmonized fraction {f}"))?;
    let sum: f64 = manifest.fractions.values().sum();
    ensure((sum - 1.0).abs() < 1e-9, || format!("fractions sum to {sum}"))?;
    Ok(format!(
        "harmonized fraction {f:.4} ({} alchemist and task samples of {})",
        (f * manifest.total_samples as f64).round(),
        manifest.total_samples
    ))
}

#[derive(serde::Deserialize)]
struct LabeledFailure {
    #[serde(flatten)]
    record: FailureRecord,
    label: String,
}

fn error_categorization() -> Result<String, String> {
    let text = std::fs::read_to_string(fixture("failure_log.jsonl")).map_err(|e| e.to_string())?;
    let log: Vec<LabeledFailure> =
        text.lines().map(serde_json::from_str).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    ensure(log.len() == 50, || format!("{} records", log.len()))?;
    let mut expected: BTreeMap<ErrorCategory, usize> = BTreeMap::new();
    for entry in &log {
        let got = categorize(&entry.record);
        ensure(format!("{got:?}") == entry.label, || format!("{}: {got:?} vs label {}", entry.record.id, entry.label))?;
        *expected.entry(got).or_default() += 1;
    }
    let tally = categorize_errors(log.iter().map(|e| &e.record));
    ensure(tally.total == 50, || format!("tally total {}", tally.total))?;
    for (cat, n) in &expected {
        ensure(tally.counts.get(cat) == Some(n), || format!("{cat:?}: {:?} vs {n}", tally.counts.get(cat)))?;
    }
    Ok(format!("50/50 agree across {} categories", expected.len()))
}

fn main() {
    let criteria: [(u8, &str, Option<u64>, Check); 9] = [
        (1, "ratio fidelity", Some(10), ratio_fidelity),
        (2, "review selection truth table", Some(1), review_truth_table),
        (3, "decontamination recall", Some(30), decontamination_recall),
        (4, "metric oracles", Some(120), metric_oracles),
        (5, "filter disposition law", None, disposition_law),
        (6, "CPD sanity", None, cpd_sanity),
        (7, "end-to-end determinism", Some(60), end_to_end_determinism),
        (8, "manifest composition", None, manifest_composition),
        (9, "error categorization", None, error_categorization),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failures = 0;
    for (id, name, budget, check) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| f == &id.to_string()) {
            continue;
        }
        let start = Instant::now();
        let result = std::panic::catch_unwind(check).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let elapsed = start.elapsed();
        let result = match (result, budget.map(Duration::from_secs)) {
            (Ok(detail), Some(limit)) if elapsed > limit => Err(format!("{detail}; exceeded {}s budget", limit.as_secs())),
            (r, _) => r,
        };
        match result {
            Ok(detail) => println!("criterion {id} ({name}): PASS [{:.1}s] {detail}", elapsed.as_secs_f64()),
            Err(detail) => {
                failures += 1;
                println!("criterion {id} ({name}): FAIL [{:.1}s] {detail}", elapsed.as_secs_f64());
            }
        }
    }
    if failures > 0 {
        std::process::exit(1);
    }
}
