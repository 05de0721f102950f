use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use pii_lab::attacks::{
    extraction_attack, reconstruction_attack, tab_attack, CandidateSet, ExhaustiveMaskFiller, MaskFiller,
    ReconstructionConfig, ReconstructionGuess,
};
use pii_lab::corpus::{generate_corpus, load_corpus, Corpus, CorpusFormat, LoadOptions, SyntheticSpec};
use pii_lab::games::{
    precision_recall, run_game, BaselineConfig, GameConfig, GameKind, LeakageReport, PublicModel, RunManifest,
    REPORT_SCHEMA, REPORT_SCHEMA_VERSION,
};
use pii_lab::io::{read_to_string, write_atomic, write_csv, write_json};
use pii_lab::lm::{GenerationParams, LanguageModel, NGramModel};
use pii_lab::remote::{is_remote_ref, RemoteMaskFiller, RemoteModel};
use pii_lab::scrub::{make_masked_query, scrub, MaskMode, MaskStyle, MaskedQuery};
use pii_lab::tagger::{Tagger, TaggerConfig, TaggerMode};
use pii_lab::{LabError, Result, TOOL_VERSION};
use serde::Serialize;
use serde_json::{json, Value};

use crate::{
    AttackCommand, Command, ExtractArgs, GameArgs, GameName, GenerateArgs, ModelArgs, PublicArg, ReconstructArgs,
    ReportArgs, ScrubArgs, TrainArgs,
};

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Generate(a) => generate(a),
        Command::Train(a) => train(a),
        Command::Scrub(a) => scrub_cmd(a),
        Command::Attack(AttackCommand::Extract(a)) => extract(a),
        Command::Attack(AttackCommand::Reconstruct(a)) => {
            let mode = if a.candidates.is_some() { Mode::Infer } else { Mode::Reconstruct };
            reconstruct(a, mode)
        }
        Command::Attack(AttackCommand::Infer(a)) => {
            if a.candidates.is_none() {
                return Err(LabError::config("infer needs --candidates"));
            }
            reconstruct(a, Mode::Infer)
        }
        Command::Attack(AttackCommand::Tab(a)) => reconstruct(a, Mode::Tab),
        Command::Game(a) => game(a),
        Command::Report(a) => report(a),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let raw = read_to_string(path)?;
    serde_json::from_str(&raw).map_err(|e| LabError::config(format!("{}: {e}", path.display())))
}

fn corpus_format(path: &Path, format: Option<&str>) -> Result<CorpusFormat> {
    match format {
        Some(f) => f.parse(),
        None => Ok(CorpusFormat::from_path(path)),
    }
}

fn load(path: &Path, format: Option<&str>, split_seed: u64) -> Result<Corpus> {
    let opts = LoadOptions {
        seed: split_seed,
        ..LoadOptions::default()
    };
    load_corpus(path, corpus_format(path, format)?, &opts)
}

fn jsonl<T: Serialize>(rows: impl IntoIterator<Item = T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for r in rows {
        out.extend(serde_json::to_vec(&r)?);
        out.push(b'\n');
    }
    Ok(out)
}

fn generate(a: GenerateArgs) -> Result<()> {
    let mut spec = match &a.spec {
        Some(p) => read_json::<SyntheticSpec>(p)?,
        None => SyntheticSpec::benchmark(2000, 0),
    };
    if let Some(n) = a.documents {
        spec.n_documents = n;
    }
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    let g = generate_corpus(&spec)?;
    let tagger = TaggerConfig::from_pool(spec.pii_pool.iter().map(|(c, v)| (*c, v.as_slice())));
    write_atomic(&a.out.join("corpus.jsonl"), g.corpus.to_jsonl().as_bytes())?;
    write_atomic(&a.out.join("ground_truth.jsonl"), &jsonl(&g.ground_truth)?)?;
    write_json(&a.out.join("tagger.json"), &tagger)?;
    write_json(&a.out.join("spec.json"), &spec)?;
    eprintln!(
        "wrote {} documents and {} planted PII to {}",
        g.corpus.len(),
        g.ground_truth.len(),
        a.out.display()
    );
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let corpus = load(&a.corpus, a.format.as_deref(), a.split_seed)?;
    let model = if a.all {
        NGramModel::fit(
            corpus.documents().iter().map(|d| d.tokens.as_slice()),
            std::iter::empty(),
            a.n,
            a.lambda,
        )?
    } else {
        pii_lab::lm::train_ngram(&corpus, a.n, a.lambda)?
    };
    model.save(&a.out)?;
    eprintln!("wrote {} to {}", model.model_id(), a.out.display());
    Ok(())
}

fn load_tagger(path: &Path) -> Result<Tagger> {
    let mut cfg: TaggerConfig = read_json(path)?;
    if cfg.mode == TaggerMode::Remote && cfg.endpoint.is_none() {
        cfg.endpoint = std::env::var("PII_LAB_BRIDGE_URL").ok();
    }
    Tagger::new(cfg)
}

fn scrub_cmd(a: ScrubArgs) -> Result<()> {
    let corpus = load(&a.corpus, a.format.as_deref(), a.split_seed)?;
    let tagger = load_tagger(&a.tagger)?;
    let style = MaskStyle {
        mode: a.style.parse::<MaskMode>()?,
        salt: a.salt,
    };
    style.validate()?;
    let docs = scrub(&corpus, &tagger, &style)?;
    let masks: usize = docs.iter().map(|d| d.masks.len()).sum();
    write_atomic(&a.out, &jsonl(docs.iter().map(|d| d.to_json(a.with_ground_truth)))?)?;
    eprintln!("masked {masks} spans in {} documents", docs.len());
    Ok(())
}

enum ModelHandle {
    Local(NGramModel),
    Remote(RemoteModel),
}

impl ModelHandle {
    fn open(args: &ModelArgs) -> Result<Self> {
        if is_remote_ref(&args.model) {
            Ok(ModelHandle::Remote(RemoteModel::connect(&args.model, args.top_m)?))
        } else {
            Ok(ModelHandle::Local(NGramModel::load(Path::new(&args.model))?))
        }
    }

    fn get(&self) -> &dyn LanguageModel {
        match self {
            ModelHandle::Local(m) => m,
            ModelHandle::Remote(m) => m,
        }
    }
}

fn emit(out: Option<&PathBuf>, value: &Value) -> Result<()> {
    match out {
        Some(p) => write_json(p, value),
        None => {
            println!("{}", serde_json::to_string_pretty(value)?);
            Ok(())
        }
    }
}

fn extract(a: ExtractArgs) -> Result<()> {
    let model = ModelHandle::open(&a.model)?;
    let tagger = load_tagger(&a.model.tagger)?;
    let truth = match &a.corpus {
        Some(p) => Some(tagger.unique_pii(&load(p, a.format.as_deref(), a.split_seed)?, Some(a.model.class))?),
        None => None,
    };
    let budget = match (a.budget, &truth) {
        (Some(b), _) => b,
        (None, Some(t)) => t.len(),
        (None, None) => return Err(LabError::config("extract needs --budget or --corpus")),
    };
    let params = GenerationParams {
        top_k: a.model.top_k,
        max_tokens: a.max_tokens,
        n_sequences: a.samples,
        seed: a.model.seed,
    };
    let result = extraction_attack(model.get(), &tagger, a.model.class, budget, &params)?;
    let mut value = json!({
        "attack": "extract",
        "model": model.get().model_id(),
        "class": a.model.class,
        "params": params,
        "result": result,
    });
    if let Some(t) = truth.filter(|t| !t.is_empty()) {
        let guesses = result.surfaces().into_iter().collect();
        let (p, r, undefined) = precision_recall(&t, &guesses)?;
        value["metrics"] = json!({"precision": p, "recall": r, "precision_undefined": undefined, "truth_size": t.len()});
    }
    emit(a.model.out.as_ref(), &value)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Mode {
    Reconstruct,
    Infer,
    Tab,
}

impl Mode {
    fn name(self) -> &'static str {
        match self {
            Mode::Reconstruct => "reconstruct",
            Mode::Infer => "infer",
            Mode::Tab => "tab",
        }
    }
}

fn queries(a: &ReconstructArgs, tagger: &Tagger) -> Result<Vec<MaskedQuery>> {
    let corpus = load(&a.corpus, a.format.as_deref(), a.split_seed)?;
    let mut out = Vec::new();
    for doc in corpus.split(a.split) {
        let spans = tagger.extract(doc, None)?;
        for target in spans.iter().filter(|s| s.class == a.model.class) {
            if out.len() == a.limit {
                return Ok(out);
            }
            out.push(make_masked_query(doc, &spans, target)?);
        }
    }
    Ok(out)
}

#[derive(Serialize)]
struct QueryResult {
    doc_id: String,
    ground_truth: String,
    guess: Option<String>,
    correct: bool,
    candidates: usize,
    /// Best few candidates with their perplexities.
    top: Vec<(String, f64)>,
}

fn reconstruct(a: ReconstructArgs, mode: Mode) -> Result<()> {
    let model = ModelHandle::open(&a.model)?;
    let lm = model.get();
    let tagger = load_tagger(&a.model.tagger)?;
    let candidates = match &a.candidates {
        Some(p) if mode != Mode::Tab => {
            let surfaces: Vec<String> = read_to_string(p)?
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(String::from)
                .collect();
            Some(CandidateSet::provided(surfaces)?)
        }
        _ => None,
    };
    let filler: Box<dyn MaskFiller + '_> = match &a.filler {
        Some(url) => Box::new(RemoteMaskFiller::new(url)),
        None => Box::new(ExhaustiveMaskFiller::new(lm)),
    };
    let cfg = ReconstructionConfig {
        generation: GenerationParams {
            top_k: a.model.top_k,
            max_tokens: a.max_tokens,
            n_sequences: a.samples,
            seed: a.model.seed,
        },
        tab_tokens: a.tab_tokens,
    };
    let qs = queries(&a, &tagger)?;
    if qs.is_empty() {
        return Err(LabError::invalid(format!(
            "no {} PII found in the {} split of {}",
            a.model.class,
            a.split,
            a.corpus.display()
        )));
    }
    let mut results = Vec::with_capacity(qs.len());
    for (i, q) in qs.iter().enumerate() {
        let mut qcfg = cfg.clone();
        qcfg.generation.seed = pii_lab::derive_seed(a.model.seed, 0, i as u64);
        let g: ReconstructionGuess = match mode {
            Mode::Tab => tab_attack(&q.prefix, q.target_class, lm, filler.as_ref(), &tagger, cfg.tab_tokens)?,
            _ => reconstruction_attack(q, lm, filler.as_ref(), &tagger, &qcfg, candidates.as_ref())?,
        };
        let truth = tagger.pii_key(&q.ground_truth);
        let correct = g.guess.as_deref().is_some_and(|x| tagger.pii_key(x) == truth);
        results.push(QueryResult {
            doc_id: q.doc_id.clone(),
            ground_truth: q.ground_truth.clone(),
            candidates: g.ranking.len(),
            top: g.ranking.iter().take(5).cloned().collect(),
            guess: g.guess,
            correct,
        });
    }
    let accuracy = results.iter().filter(|r| r.correct).count() as f64 / results.len() as f64;
    let value = json!({
        "attack": mode.name(),
        "model": lm.model_id(),
        "class": a.model.class,
        "params": cfg,
        "queries": results.len(),
        "top1_accuracy": accuracy,
        "results": results,
    });
    emit(a.model.out.as_ref(), &value)
}

fn game_kind(g: GameName) -> GameKind {
    match g {
        GameName::Extraction => GameKind::Extraction,
        GameName::Reconstruction => GameKind::Reconstruction,
        GameName::Inference => GameKind::Inference,
        GameName::Mi => GameKind::Mi,
    }
}

fn resolve_config(a: &GameArgs) -> Result<GameConfig> {
    let kind = game_kind(a.game);
    let mut cfg = match &a.config {
        Some(p) => {
            let mut v: Value = read_json(p)?;
            // A previous report reruns from its resolved config.
            if v.get("schema") == Some(&json!(REPORT_SCHEMA)) {
                v = v["config"].take();
            }
            let obj = v
                .as_object_mut()
                .ok_or_else(|| LabError::config(format!("{}: expected a JSON object", p.display())))?;
            match obj.get("game") {
                None => {
                    obj.insert("game".into(), json!(kind));
                }
                Some(g) if *g != json!(kind) => {
                    return Err(LabError::config(format!(
                        "{} configures the {g} game, not {kind}",
                        p.display()
                    )))
                }
                Some(_) => {}
            }
            serde_json::from_value::<GameConfig>(v)
                .map_err(|e| LabError::config(format!("{}: {e}", p.display())))?
        }
        None => GameConfig::new(kind, 0),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.n {
        cfg.n = n;
    }
    if let Some(t) = a.trials {
        cfg.trials = t;
    }
    if let Some(m) = a.m {
        cfg.m = m;
    }
    if let Some(s) = a.shadows {
        cfg.shadows = s;
    }
    if let Some(b) = a.buckets {
        cfg.memorization_buckets = b;
    }
    if let Some(p) = a.baseline {
        cfg.baseline = BaselineConfig {
            enabled: true,
            public: match p {
                PublicArg::Disjoint => PublicModel::Disjoint,
                PublicArg::Target => PublicModel::Target,
            },
            samples: cfg.baseline.samples,
        };
    }
    cfg.validate()?;
    Ok(cfg)
}

fn game(a: GameArgs) -> Result<()> {
    let cfg = resolve_config(&a)?;
    let start = Instant::now();
    let mut outcome = run_game(&cfg)?;
    let elapsed = start.elapsed().as_secs_f64();

    let mut artifacts = BTreeMap::new();
    artifacts.insert("trials".to_string(), "trials.csv".to_string());
    write_csv(&a.out.join("trials.csv"), &outcome.trials)?;
    if let Some(roc) = &outcome.report.roc {
        artifacts.insert("roc".to_string(), "roc.csv".to_string());
        write_csv(&a.out.join("roc.csv"), roc)?;
    }
    if let Some(table) = &outcome.report.memorization {
        artifacts.insert("memorization".to_string(), "memorization.csv".to_string());
        write_csv(&a.out.join("memorization.csv"), &table.buckets)?;
    }
    artifacts.insert("timing".to_string(), "timing.json".to_string());
    artifacts.insert("report".to_string(), "report.json".to_string());
    outcome.report.manifest = Some(RunManifest {
        config_path: a.config.as_ref().map(|p| p.display().to_string()),
        artifacts,
        tool_version: TOOL_VERSION.to_string(),
    });
    write_json(&a.out.join("report.json"), &outcome.report)?;
    write_json(
        &a.out.join("timing.json"),
        &json!({"elapsed_seconds": elapsed, "workers": rayon::current_num_threads()}),
    )?;
    eprintln!("{}", summary_line(&outcome.report));
    Ok(())
}

fn summary_line(r: &LeakageReport) -> String {
    let m = &r.metrics;
    let mut parts = vec![format!("{} seed={}", r.game, r.seed)];
    let mut add = |k: &str, v: Option<f64>| {
        if let Some(v) = v {
            parts.push(format!("{k}={v:.4}"));
        }
    };
    add("precision", m.precision);
    add("recall", m.recall);
    add("advantage", m.advantage);
    add("top1", m.top1_accuracy);
    add("tab_top1", m.tab_top1_accuracy);
    add("auc", m.auc);
    if let Some(rho) = r.memorization.as_ref().and_then(|t| t.spearman) {
        parts.push(format!("memorization_spearman={rho:.3}"));
    }
    parts.join(" ")
}

#[derive(Serialize)]
struct MetricsRow {
    file: String,
    game: GameKind,
    seed: u64,
    precision: Option<f64>,
    recall: Option<f64>,
    advantage: Option<f64>,
    top1_accuracy: Option<f64>,
    tab_top1_accuracy: Option<f64>,
    auc: Option<f64>,
}

fn report(a: ReportArgs) -> Result<()> {
    let mut rows = Vec::new();
    for path in &a.reports {
        let raw: Value = read_json(path)?;
        if raw.get("schema") != Some(&json!(REPORT_SCHEMA)) {
            return Err(LabError::config(format!("{} is not a leakage report", path.display())));
        }
        if raw.get("schema_version") != Some(&json!(REPORT_SCHEMA_VERSION)) {
            return Err(LabError::config(format!(
                "{}: unsupported schema version {}",
                path.display(),
                raw.get("schema_version").unwrap_or(&Value::Null)
            )));
        }
        let r: LeakageReport =
            serde_json::from_value(raw).map_err(|e| LabError::config(format!("{}: {e}", path.display())))?;
        println!("{}: {}", path.display(), summary_line(&r));
        let m = &r.metrics;
        rows.push(MetricsRow {
            file: path.display().to_string(),
            game: r.game,
            seed: r.seed,
            precision: m.precision,
            recall: m.recall,
            advantage: m.advantage,
            top1_accuracy: m.top1_accuracy,
            tab_top1_accuracy: m.tab_top1_accuracy,
            auc: m.auc,
        });
    }
    if let Some(p) = &a.csv {
        write_csv(p, &rows)?;
    }
    Ok(())
}
