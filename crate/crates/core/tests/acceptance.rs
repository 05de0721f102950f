//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::panic::{catch_unwind, AssertUnwindSafe};

use pii_lab::attacks::{ReconstructionConfig, SampleProfile};
use pii_lab::corpus::{
    generate_corpus, load_corpus, tokenize, Corpus, CorpusFormat, Document, DuplicationLaw, LoadOptions, Split,
    SyntheticSpec, Token,
};
use pii_lab::games::{
    memorization_vs_reconstruction, run_game, BaselineConfig, GameConfig, GameKind, GameOutcome, PublicModel, World,
};
use pii_lab::lm::{perplexity, score, train_ngram, GenerationParams, LanguageModel, NGramModel};
use pii_lab::scrub::{scrub, scrubbed_corpus, MaskStyle};
use pii_lab::stats::{linear_fit, spearman, RocCurve};
use pii_lab::tagger::{PiiClass, Tagger, TaggerConfig};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn rel(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

fn docs(texts: &[&str]) -> Corpus {
    Corpus::new(
        texts
            .iter()
            .enumerate()
            .map(|(i, t)| Document::new(format!("d{i}"), tokenize(t), Split::Train))
            .collect(),
    )
    .unwrap()
}

/// Add-λ trigram probabilities counted directly from the training texts.
struct OracleTrigram {
    lambda: f64,
    vocab_size: f64,
    ctx: HashMap<(String, String), f64>,
    tri: HashMap<(String, String, String), f64>,
}

impl OracleTrigram {
    fn fit(texts: &[&str], lambda: f64) -> Self {
        let mut ctx = HashMap::new();
        let mut tri = HashMap::new();
        let mut vocab = BTreeSet::new();
        for t in texts {
            let mut w = vec!["<s>".to_string(), "<s>".to_string()];
            for tok in tokenize(t) {
                vocab.insert(tok.clone());
                w.push(tok);
            }
            w.push("</s>".to_string());
            for i in 2..w.len() {
                *ctx.entry((w[i - 2].clone(), w[i - 1].clone())).or_insert(0.0) += 1.0;
                *tri.entry((w[i - 2].clone(), w[i - 1].clone(), w[i].clone())).or_insert(0.0) += 1.0;
            }
        }
        OracleTrigram {
            lambda,
            // Corpus tokens plus end-of-sequence and unknown.
            vocab_size: vocab.len() as f64 + 2.0,
            ctx,
            tri,
        }
    }

    fn prob(&self, a: &str, b: &str, c: &str) -> f64 {
        let k = (a.to_string(), b.to_string());
        let n = self.ctx.get(&k).copied().unwrap_or(0.0);
        let m = self
            .tri
            .get(&(k.0, k.1, c.to_string()))
            .copied()
            .unwrap_or(0.0);
        (m + self.lambda) / (n + self.lambda * self.vocab_size)
    }

    fn product(&self, tokens: &[Token]) -> f64 {
        let mut w = vec!["<s>".to_string(), "<s>".to_string()];
        w.extend(tokens.iter().cloned());
        (2..w.len()).map(|i| self.prob(&w[i - 2], &w[i - 1], &w[i])).product()
    }
}

fn pairwise_auc(scores: &[f64], positive: &[bool]) -> f64 {
    let (mut acc, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if positive[i] && !positive[j] {
                pairs += 1.0;
                acc += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    acc / pairs
}

fn oracle_equivalences() -> Outcome {
    let texts = [
        "the patient John Smith had surgery .",
        "the patient Mary Jones had dialysis .",
        "John Smith visited the clinic .",
        "the clinic called Mary Jones .",
    ];
    let model = train_ngram(&docs(&texts), 3, 0.1).unwrap();
    let oracle = OracleTrigram::fit(&texts, 0.1);
    let queries = [
        "the patient John Smith had surgery .",
        "Mary Jones visited the clinic",
        "the",
        "unseen words here",
        "clinic the patient had had",
    ];
    let mut worst_score = 0.0_f64;
    let mut ppl_exact = true;
    for q in queries {
        let t = tokenize(q);
        let s = score(&model, &t).unwrap();
        worst_score = worst_score.max(rel(s.exp(), oracle.product(&t)));
        ppl_exact &= perplexity(&model, &t).unwrap() == (-s / t.len() as f64).exp();
    }

    let mut worst_auc = 0.0_f64;
    let mut state = 0x2545_f491_4f6c_dd1d_u64;
    let mut next = || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        state
    };
    for _ in 0..200 {
        let n = 2 + (next() % 80) as usize;
        let scores: Vec<f64> = (0..n).map(|_| (next() % 12) as f64 / 3.0).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| next() % 2 == 0).collect();
        labels[0] = true;
        labels[1] = false;
        let auc = RocCurve::from_scores(&scores, &labels).unwrap().auc();
        worst_auc = worst_auc.max((auc - pairwise_auc(&scores, &labels)).abs());
    }
    outcome(
        worst_score <= 1e-12 && ppl_exact && worst_auc <= 1e-12,
        format!("score rel err {worst_score:.2e}, perplexity exact {ppl_exact}, AUC abs err {worst_auc:.2e}"),
    )
}

/// Benchmark-style corpus whose person duplication counts span 1..=32.
fn duplication_world() -> (pii_lab::corpus::GeneratedCorpus, Tagger, NGramModel) {
    let mut spec = SyntheticSpec::benchmark(1500, 11);
    spec.duplication = DuplicationLaw {
        exponent: None,
        mean: 4.66,
        max: 32,
    };
    spec.split.train = 1.0;
    spec.split.validation = 0.0;
    spec.split.test = 0.0;
    let generated = generate_corpus(&spec).unwrap();
    let tagger = Tagger::new(TaggerConfig::from_pool(spec.pii_pool.iter().map(|(c, v)| (*c, v.as_slice())))).unwrap();
    let model = train_ngram(&generated.corpus, 3, 0.1).unwrap();
    (generated, tagger, model)
}

fn extraction_samples() -> GenerationParams {
    GenerationParams {
        n_sequences: 5000,
        top_k: 40,
        max_tokens: 64,
        seed: 3,
    }
}

fn estimated_vs_observed() -> Outcome {
    let (generated, tagger, model) = duplication_world();
    let counts = generated.duplication_counts(PiiClass::Person, Some(Split::Train));
    let max_dup = counts.values().max().copied().unwrap_or(0);
    let profile = SampleProfile::collect(&model, &tagger, PiiClass::Person, &extraction_samples()).unwrap();
    let surfaces: Vec<String> = counts.keys().cloned().collect();
    let est: Vec<f64> = profile
        .estimated_many(&model, &surfaces)
        .unwrap()
        .iter()
        .map(|e| e.value)
        .collect();
    let obs: Vec<f64> = surfaces.iter().map(|s| profile.observed(s)).collect();
    let rho = spearman(&est, &obs).unwrap_or(f64::NAN);
    outcome(
        surfaces.len() >= 50 && max_dup <= 32 && rho >= 0.8,
        format!("{} planted persons, duplication 1..={max_dup}, spearman {rho:.4}", surfaces.len()),
    )
}

fn frequency_vs_duplication() -> Outcome {
    let (generated, tagger, model) = duplication_world();
    let counts = generated.duplication_counts(PiiClass::Person, Some(Split::Train));
    let profile = SampleProfile::collect(&model, &tagger, PiiClass::Person, &extraction_samples()).unwrap();
    let mut groups: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for (s, d) in &counts {
        groups.entry(*d).or_default().push(profile.observed(s));
    }
    let xs: Vec<f64> = groups.keys().map(|d| *d as f64).collect();
    let ys: Vec<f64> = groups.values().map(|v| v.iter().sum::<f64>() / v.len() as f64).collect();
    let rho = spearman(&xs, &ys).unwrap_or(f64::NAN);
    let slope = linear_fit(&xs, &ys).map(|f| f.slope).unwrap_or(f64::NAN);
    outcome(
        rho >= 0.9 && slope > 0.0,
        format!("{} duplication groups, spearman {rho:.4}, slope {slope:.3e}", xs.len()),
    )
}

/// Probability that a sampled sequence (full support, at most `max_len`
/// tokens, stopped at end-of-sequence) contains each token, by enumerating
/// every path.
fn exhaustive_containment(model: &NGramModel, targets: &[&str], max_len: usize) -> Vec<f64> {
    fn walk(
        model: &NGramModel,
        prefix: &mut Vec<Token>,
        p: f64,
        max_len: usize,
        targets: &[&str],
        out: &mut [f64],
    ) {
        if prefix.len() == max_len {
            credit(prefix, p, targets, out);
            return;
        }
        let dist = model.next_token_distribution(prefix).unwrap();
        let vocab = dist.vocab().clone();
        for (id, q) in dist.probs().iter().enumerate() {
            let tok = vocab.token(id as u32).to_string();
            if Some(tok.as_str()) == model.end_of_sequence().as_deref() {
                credit(prefix, p * q, targets, out);
                continue;
            }
            prefix.push(tok);
            walk(model, prefix, p * q, max_len, targets, out);
            prefix.pop();
        }
    }
    fn credit(seq: &[Token], p: f64, targets: &[&str], out: &mut [f64]) {
        for (k, t) in targets.iter().enumerate() {
            if seq.iter().any(|s| s == t) {
                out[k] += p;
            }
        }
    }
    let mut out = vec![0.0; targets.len()];
    walk(model, &mut Vec::new(), 1.0, max_len, targets, &mut out);
    out
}

fn ranking(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    idx
}

fn exhaustive_ranking() -> Outcome {
    let names = ["ann", "bob", "cat", "dan", "eve"];
    let mut texts = Vec::new();
    for (name, dup) in names.iter().zip([9, 6, 4, 2, 1]) {
        for k in 0..dup {
            texts.push(if k % 3 == 2 { format!("saw {name} .") } else { format!("dr {name} .") });
        }
    }
    texts.push("saw dr .".to_string());
    let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
    let model = train_ngram(&docs(&refs), 3, 0.1).unwrap();
    let vocab_size = model.vocab().len();
    let mut cfg = TaggerConfig::default();
    cfg.dictionaries
        .insert(PiiClass::Person, names.iter().map(|s| s.to_string()).collect());
    let tagger = Tagger::new(cfg).unwrap();
    let params = GenerationParams {
        n_sequences: 20000,
        top_k: vocab_size,
        max_tokens: 4,
        seed: 17,
    };
    let profile = SampleProfile::collect(&model, &tagger, PiiClass::Person, &params).unwrap();
    let owned: Vec<String> = names.iter().map(|s| s.to_string()).collect();
    let est: Vec<f64> = profile
        .estimated_many(&model, &owned)
        .unwrap()
        .iter()
        .map(|e| e.value)
        .collect();
    let exact = exhaustive_containment(&model, &names, 4);
    let (re, rx) = (ranking(&est), ranking(&exact));
    outcome(
        vocab_size <= 12 && re == rx,
        format!("|V| = {vocab_size}, estimated ranking {re:?}, exhaustive ranking {rx:?}"),
    )
}

fn benchmark_config(game: GameKind) -> GameConfig {
    GameConfig {
        n: 2000,
        trials: 200,
        m: 99,
        reconstruction: ReconstructionConfig {
            generation: GenerationParams {
                n_sequences: 64,
                top_k: 40,
                max_tokens: 24,
                seed: 0,
            },
            tab_tokens: 10,
        },
        ..GameConfig::new(game, 2024)
    }
}

fn accuracy(o: &GameOutcome) -> f64 {
    o.trials.iter().filter(|t| t.correct).count() as f64 / o.trials.len() as f64
}

fn reconstruction_beats_tab() -> Outcome {
    let out = run_game(&benchmark_config(GameKind::Reconstruction)).unwrap();
    let recon = accuracy(&out);
    let tab = out.trials.iter().filter(|t| t.tab_correct == Some(true)).count() as f64 / out.trials.len() as f64;
    outcome(
        out.trials.len() >= 200 && recon > tab,
        format!("{} queries, reconstruction top-1 {recon:.3}, TAB top-1 {tab:.3}", out.trials.len()),
    )
}

fn inference_beats_reconstruction() -> Outcome {
    let recon = run_game(&benchmark_config(GameKind::Reconstruction)).unwrap();
    let inf = run_game(&benchmark_config(GameKind::Inference)).unwrap();
    let same_queries = recon
        .trials
        .iter()
        .zip(&inf.trials)
        .all(|(a, b)| a.doc_id == b.doc_id && a.ground_truth == b.ground_truth);
    let full_sets = inf.trials.iter().all(|t| t.candidates == Some(100));
    let (ra, ia) = (accuracy(&recon), accuracy(&inf));
    outcome(
        same_queries && full_sets && ia >= ra && ia >= 0.05,
        format!("inference top-1 {ia:.3} (m = 99), reconstruction top-1 {ra:.3}, identical queries {same_queries}"),
    )
}

fn assert_no_pii_left(corpus: &Corpus, tagger: &Tagger, style: &MaskStyle) -> (usize, bool) {
    let once = scrub(corpus, tagger, style).unwrap();
    let scrubbed = scrubbed_corpus(&once).unwrap();
    let left: usize = scrubbed
        .documents()
        .iter()
        .map(|d| tagger.extract(d, None).unwrap().len())
        .sum();
    let twice = scrub(&scrubbed, tagger, style).unwrap();
    let idempotent = twice.iter().zip(&once).all(|(a, b)| a.tokens == b.tokens && a.masks.is_empty());
    (left, idempotent)
}

fn scrub_removes_all() -> Outcome {
    let spec = SyntheticSpec::benchmark(600, 4);
    let generated = generate_corpus(&spec).unwrap();
    let tagger = Tagger::new(TaggerConfig::from_pool(spec.pii_pool.iter().map(|(c, v)| (*c, v.as_slice())))).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("notes.txt");
    std::fs::write(
        &path,
        "Mary Smith wrote to mary.smith@anon.com about her visit .\n\
         Call 555-123-4567 or see www.example.org/records for John Brown .\n\
         Nothing personal in this line .\n\
         John Brown and Mary Smith met in Lyon .\n",
    )
    .unwrap();
    let loaded = load_corpus(&path, CorpusFormat::Text, &LoadOptions::default()).unwrap();
    let mut cfg = TaggerConfig::from_pool([
        (PiiClass::Person, &["Mary Smith".to_string(), "John Brown".to_string()][..]),
        (PiiClass::Gpe, &["Lyon".to_string()][..]),
    ]);
    cfg.case_insensitive = true;
    let loaded_tagger = Tagger::new(cfg).unwrap();

    let mut detail = Vec::new();
    let mut pass = true;
    for style in [MaskStyle::full_mask(), MaskStyle::entity_tag(), MaskStyle::pseudonym("k")] {
        for (name, corpus, tagger) in [
            ("synthetic", &generated.corpus, &tagger),
            ("loaded", &loaded, &loaded_tagger),
        ] {
            let (left, idem) = assert_no_pii_left(corpus, tagger, &style);
            pass &= left == 0 && idem;
            if left > 0 || !idem {
                detail.push(format!("{name}/{}: {left} spans left, idempotent {idem}", style.mode));
            }
        }
    }
    let before: usize = loaded
        .documents()
        .iter()
        .map(|d| loaded_tagger.extract(d, None).unwrap().len())
        .sum();
    pass &= before > 0;
    if detail.is_empty() {
        detail.push(format!("0 spans left in both corpora under 3 styles ({before} spans in the loaded file)"));
    }
    outcome(pass, detail.join("; "))
}

/// Benchmark templates with light duplication, so that the split separates
/// records rather than copies of the same record.
fn mi_config(untrained: bool) -> GameConfig {
    let mut cfg = GameConfig::new(GameKind::Mi, 77);
    cfg.n = 1200;
    cfg.trials = 500;
    cfg.model.untrained = untrained;
    let mut spec = SyntheticSpec::benchmark(cfg.n, 0);
    spec.duplication = DuplicationLaw {
        exponent: None,
        mean: 1.5,
        max: 4,
    };
    cfg.corpus = Some(spec);
    cfg
}

fn mean_perplexity(model: &NGramModel, corpus: &Corpus, split: Split) -> f64 {
    let ppl: Vec<f64> = corpus.split(split).map(|d| perplexity(model, &d.tokens).unwrap()).collect();
    ppl.iter().sum::<f64>() / ppl.len() as f64
}

fn membership_inference() -> Outcome {
    let cfg = mi_config(false);
    let world = World::build(&cfg).unwrap();
    let train_ppl = mean_perplexity(&world.target, &world.generated.corpus, Split::Train);
    let val_ppl = mean_perplexity(&world.target, &world.generated.corpus, Split::Validation);
    let overfit = run_game(&cfg).unwrap();
    let untrained = run_game(&mi_config(true)).unwrap();
    let pairs = overfit.trials.iter().filter(|t| t.member == Some(true)).count();
    let a = overfit.report.metrics.auc.unwrap();
    let b = untrained.report.metrics.auc.unwrap();
    outcome(
        pairs >= 500 && train_ppl < val_ppl && a >= 0.9 && (b - 0.5).abs() <= 0.05,
        format!(
            "{pairs} pairs, target PPL train {train_ppl:.1} vs validation {val_ppl:.1}, overfit trigram AUC {a:.4}, untrained AUC {b:.4}"
        ),
    )
}

fn memorization_tracks_reconstruction() -> Outcome {
    let mut cfg = benchmark_config(GameKind::Reconstruction);
    cfg.trials = 400;
    cfg.model.lambda = 0.001;
    let (table, trials) = memorization_vs_reconstruction(&cfg, 5).unwrap();
    let rho = table.spearman.unwrap_or(f64::NAN);
    let accs: Vec<String> = table.buckets.iter().map(|b| format!("{:.2}", b.accuracy)).collect();
    outcome(
        rho > 0.0,
        format!(
            "{} trials, {} buckets, accuracy by bucket [{}], spearman {rho:.3}",
            trials.len(),
            table.buckets.len(),
            accs.join(", ")
        ),
    )
}

fn baseline_filter() -> Outcome {
    let mut cfg = GameConfig::new(GameKind::Extraction, 9);
    cfg.n = 800;
    cfg.extraction.n_sequences = 1000;
    cfg.extraction.max_tokens = 48;
    let plain = run_game(&cfg).unwrap().report.metrics.recall.unwrap();
    cfg.baseline = BaselineConfig {
        enabled: true,
        public: PublicModel::Target,
        samples: None,
    };
    let self_filtered = run_game(&cfg).unwrap().report.metrics.recall.unwrap();
    cfg.baseline.public = PublicModel::Disjoint;
    let disjoint = run_game(&cfg).unwrap().report.metrics.recall.unwrap();
    outcome(
        plain > 0.0 && self_filtered == 0.0 && disjoint == plain,
        format!("recall {plain:.4}, public = target {self_filtered:.4}, disjoint public {disjoint:.4}"),
    )
}

fn determinism() -> Outcome {
    let mut detail = Vec::new();
    let mut pass = true;
    for game in [GameKind::Extraction, GameKind::Reconstruction, GameKind::Inference, GameKind::Mi] {
        let mut cfg = GameConfig::new(game, 31);
        cfg.n = 400;
        cfg.trials = 40;
        cfg.m = 19;
        cfg.extraction.n_sequences = 300;
        cfg.extraction.max_tokens = 40;
        cfg.reconstruction.generation.n_sequences = 16;
        cfg.reconstruction.generation.max_tokens = 24;
        cfg.shadows = 2;
        let run = |threads: usize| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| run_game(&cfg).unwrap())
        };
        let a = run(1);
        let b = run(1);
        let c = run(4);
        let bytes = |o: &GameOutcome| serde_json::to_vec_pretty(&o.report).unwrap();
        let identical = bytes(&a) == bytes(&b);
        let key = |o: &GameOutcome| {
            let mut v: Vec<String> = o.trials.iter().map(|t| serde_json::to_string(t).unwrap()).collect();
            v.sort();
            v
        };
        let same_set = key(&a) == key(&c) && bytes(&a) == bytes(&c);
        pass &= identical && same_set;
        detail.push(format!("{game}: reports identical {identical}, 4-worker records equal {same_set}"));
    }
    outcome(pass, detail.join("; "))
}

fn main() {
    let checks: Vec<(&str, fn() -> Outcome)> = vec![
        ("oracle equivalences", oracle_equivalences),
        ("estimated vs observed extractability", estimated_vs_observed),
        ("extraction frequency vs duplication", frequency_vs_duplication),
        ("estimated ranking vs exhaustive sum", exhaustive_ranking),
        ("reconstruction beats TAB", reconstruction_beats_tab),
        ("inference with 99 decoys", inference_beats_reconstruction),
        ("scrubbed data leaks nothing", scrub_removes_all),
        ("membership inference AUC", membership_inference),
        ("memorization vs reconstruction", memorization_tracks_reconstruction),
        ("baseline leakage filter", baseline_filter),
        ("game determinism", determinism),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (i, (name, check)) in checks.into_iter().enumerate() {
        let n = i + 1;
        if only.is_some_and(|o| o != n) {
            continue;
        }
        let start = std::time::Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        if !result.pass {
            failed += 1;
        }
        println!(
            "criterion {n:>2} {}: {name}: {} ({:.1}s)",
            if result.pass { "PASS" } else { "FAIL" },
            result.detail,
            start.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
