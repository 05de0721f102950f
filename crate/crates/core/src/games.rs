//! Game harnesses for extraction, reconstruction, inference and
//! sentence-level membership inference, with their success metrics.
//!
//! Every game is a deterministic function of its [`GameConfig`]: the dataset,
//! trial selection, decoys, shadow datasets and attack randomness all come
//! from streams derived from `seed`, so reruns and different thread counts
//! produce the same per-trial records.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{
    baseline_extraction_filter, default_baseline_samples, extraction_attack, reconstruction_attack, tab_attack,
    CandidateSet, ExhaustiveMaskFiller, ReconstructionConfig,
};
use crate::corpus::{generate_corpus, Document, GeneratedCorpus, Split, SyntheticSpec, Token};
use crate::error::{LabError, Result};
use crate::lm::{perplexity, train_ngram, GenerationParams, LanguageModel, NGramModel};
use crate::scrub::make_masked_query;
use crate::stats::{binomial_stderr, spearman, RocCurve, RocPoint};
use crate::tagger::{PiiClass, PiiSpan, Tagger, TaggerConfig};
use crate::{derive_seed, streams};

pub const REPORT_SCHEMA: &str = "pii-lab/leakage-report";
pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GameKind {
    Extraction,
    Reconstruction,
    Inference,
    Mi,
}

impl GameKind {
    pub fn as_str(self) -> &'static str {
        match self {
            GameKind::Extraction => "extraction",
            GameKind::Reconstruction => "reconstruction",
            GameKind::Inference => "inference",
            GameKind::Mi => "mi",
        }
    }
}

impl FromStr for GameKind {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "extraction" => Ok(GameKind::Extraction),
            "reconstruction" => Ok(GameKind::Reconstruction),
            "inference" => Ok(GameKind::Inference),
            "mi" => Ok(GameKind::Mi),
            other => Err(LabError::config(format!("unknown game {other:?}"))),
        }
    }
}

impl fmt::Display for GameKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "ModelConfig::default_order")]
    pub order: usize,
    #[serde(default = "ModelConfig::default_lambda")]
    pub lambda: f64,
    /// Use an untrained (uniform) target instead of training one.
    #[serde(default)]
    pub untrained: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            order: Self::default_order(),
            lambda: Self::default_lambda(),
            untrained: false,
        }
    }
}

impl ModelConfig {
    fn default_order() -> usize {
        3
    }

    fn default_lambda() -> f64 {
        0.1
    }
}

/// Which model stands in for the public pre-trained model when filtering
/// baseline leakage.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PublicModel {
    /// Uniform over the corpus vocabulary without any PII token.
    #[default]
    Disjoint,
    /// The target itself.
    Target,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineConfig {
    #[serde(default)]
    pub enabled: bool,
    #[serde(default)]
    pub public: PublicModel,
    /// Public-model samples; defaults to 13/4 of the attack's.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            enabled: false,
            public: PublicModel::Disjoint,
            samples: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GameConfig {
    pub game: GameKind,
    #[serde(default)]
    pub seed: u64,
    /// Number of documents drawn from the data distribution.
    #[serde(default = "GameConfig::default_n")]
    pub n: usize,
    /// Data distribution; defaults to the built-in benchmark.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpus: Option<SyntheticSpec>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default = "GameConfig::default_trials")]
    pub trials: usize,
    /// Decoys per inference trial.
    #[serde(default = "GameConfig::default_m")]
    pub m: usize,
    #[serde(default = "GameConfig::default_class")]
    pub target_class: PiiClass,
    #[serde(default = "GameConfig::default_extraction")]
    pub extraction: GenerationParams,
    #[serde(default)]
    pub reconstruction: ReconstructionConfig,
    #[serde(default)]
    pub baseline: BaselineConfig,
    #[serde(default = "GameConfig::default_shadows")]
    pub shadows: usize,
    /// Quantile buckets of the memorization table; 0 disables it.
    #[serde(default)]
    pub memorization_buckets: usize,
}

impl GameConfig {
    fn default_n() -> usize {
        2000
    }

    fn default_trials() -> usize {
        200
    }

    fn default_m() -> usize {
        99
    }

    fn default_class() -> PiiClass {
        PiiClass::Person
    }

    fn default_extraction() -> GenerationParams {
        GenerationParams {
            n_sequences: 2000,
            ..GenerationParams::default()
        }
    }

    fn default_shadows() -> usize {
        4
    }

    pub fn new(game: GameKind, seed: u64) -> Self {
        GameConfig {
            game,
            seed,
            n: Self::default_n(),
            corpus: None,
            model: ModelConfig::default(),
            trials: Self::default_trials(),
            m: Self::default_m(),
            target_class: Self::default_class(),
            extraction: Self::default_extraction(),
            reconstruction: ReconstructionConfig::default(),
            baseline: BaselineConfig::default(),
            shadows: Self::default_shadows(),
            memorization_buckets: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(LabError::config("n must be >= 1"));
        }
        if self.trials == 0 {
            return Err(LabError::config("trials must be >= 1"));
        }
        if self.game == GameKind::Inference && self.m == 0 {
            return Err(LabError::config("inference needs m >= 1 decoys"));
        }
        if self.game == GameKind::Mi && self.shadows == 0 {
            return Err(LabError::config("membership inference needs at least one shadow model"));
        }
        self.extraction.validate()?;
        self.reconstruction.generation.validate()?;
        if self.reconstruction.tab_tokens == 0 {
            return Err(LabError::config("tab_tokens must be >= 1"));
        }
        if self.model.order == 0 || !(self.model.lambda > 0.0) {
            return Err(LabError::config("model order must be >= 1 and lambda > 0"));
        }
        Ok(())
    }

    /// The data distribution with this game's dataset seed.
    pub fn spec(&self) -> SyntheticSpec {
        let mut spec = self
            .corpus
            .clone()
            .unwrap_or_else(|| SyntheticSpec::benchmark(self.n, 0));
        spec.n_documents = self.n;
        spec.seed = derive_seed(self.seed, streams::DATASET, 0);
        spec
    }
}

/// `(precision, recall, precision_undefined)`; precision is 0 and flagged
/// when there are no guesses.
pub fn precision_recall(truth: &BTreeSet<String>, guess: &BTreeSet<String>) -> Result<(f64, f64, bool)> {
    if truth.is_empty() {
        return Err(LabError::invalid("precision/recall need a non-empty truth set"));
    }
    let hit = truth.intersection(guess).count() as f64;
    let recall = hit / truth.len() as f64;
    if guess.is_empty() {
        return Ok((0.0, recall, true));
    }
    Ok((hit / guess.len() as f64, recall, false))
}

/// Why a trial failed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureMode {
    Wrong,
    NoCandidates,
    /// Removed as baseline leakage.
    Baseline,
}

/// One row of the per-trial CSV. Fields not meaningful for a game are empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub doc_id: String,
    pub ground_truth: String,
    pub guess: Option<String>,
    pub correct: bool,
    pub failure: Option<FailureMode>,
    pub candidates: Option<usize>,
    pub observed_count: Option<usize>,
    pub tab_guess: Option<String>,
    pub tab_correct: Option<bool>,
    pub member: Option<bool>,
    pub score: Option<f64>,
}

impl TrialRecord {
    fn blank(trial: usize) -> Self {
        TrialRecord {
            trial,
            doc_id: String::new(),
            ground_truth: String::new(),
            guess: None,
            correct: false,
            failure: None,
            candidates: None,
            observed_count: None,
            tab_guess: None,
            tab_correct: None,
            member: None,
            score: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub precision: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub precision_undefined: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recall: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub truth_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub guesses: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline_removed: Option<usize>,
    /// Expected recall of an adversary guessing from the PII pool without
    /// model access.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub guessing_recall: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub advantage: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub top1_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub top1_stderr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tab_top1_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wrong_guesses: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub no_candidate_misses: Option<usize>,
    /// Mean over trials of 1 / |candidates|.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub random_guess_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub members: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub non_members: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub documents: usize,
    pub train: usize,
    pub validation: usize,
    pub test: usize,
    pub duplication_exponent: f64,
    /// Mean occurrences per distinct PII of the target class.
    pub mean_duplication: Option<f64>,
    pub vocab_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemorizationBucket {
    pub lo: f64,
    pub hi: f64,
    pub mean_score: f64,
    pub sentences: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemorizationTable {
    pub buckets: Vec<MemorizationBucket>,
    /// Spearman correlation of bucket mean score and accuracy; `None` when
    /// undefined (fewer than two buckets or constant accuracy).
    pub spearman: Option<f64>,
}

/// Where a report came from and what was written alongside it.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_path: Option<String>,
    /// Artifact role (e.g. `trials`) → file name.
    #[serde(default)]
    pub artifacts: BTreeMap<String, String>,
    pub tool_version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeakageReport {
    pub schema: String,
    pub schema_version: u32,
    pub tool_version: String,
    pub game: GameKind,
    pub seed: u64,
    pub config: GameConfig,
    pub corpus: CorpusSummary,
    pub target_model: String,
    pub metrics: Metrics,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub roc: Option<Vec<RocPoint>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub memorization: Option<MemorizationTable>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<RunManifest>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GameOutcome {
    pub report: LeakageReport,
    pub trials: Vec<TrialRecord>,
}

impl GameOutcome {
    /// Aggregate metrics recomputed from the per-trial records alone.
    pub fn recompute_metrics(&self) -> Result<Metrics> {
        let m = &self.report.metrics;
        metrics_from_trials(
            self.report.game,
            &self.trials,
            m.truth_size,
            m.guessing_recall,
        )
    }
}

fn metrics_from_trials(
    game: GameKind,
    trials: &[TrialRecord],
    truth_size: Option<usize>,
    guessing_recall: Option<f64>,
) -> Result<Metrics> {
    let mut m = Metrics::default();
    match game {
        GameKind::Extraction => {
            let truth = truth_size.ok_or_else(|| LabError::invalid("extraction metrics need the truth size"))?;
            let kept: Vec<&TrialRecord> = trials
                .iter()
                .filter(|t| t.failure != Some(FailureMode::Baseline))
                .collect();
            let hits = kept.iter().filter(|t| t.correct).count();
            m.truth_size = Some(truth);
            m.guesses = Some(kept.len());
            m.baseline_removed = Some(trials.len() - kept.len());
            m.precision_undefined = Some(kept.is_empty());
            m.precision = Some(if kept.is_empty() { 0.0 } else { hits as f64 / kept.len() as f64 });
            let recall = hits as f64 / truth as f64;
            m.recall = Some(recall);
            m.guessing_recall = guessing_recall;
            m.advantage = guessing_recall.map(|g| recall - g);
        }
        GameKind::Reconstruction | GameKind::Inference => {
            let n = trials.len();
            let acc = trials.iter().filter(|t| t.correct).count() as f64 / n as f64;
            m.top1_accuracy = Some(acc);
            m.top1_stderr = Some(binomial_stderr(acc, n));
            m.wrong_guesses = Some(trials.iter().filter(|t| t.failure == Some(FailureMode::Wrong)).count());
            m.no_candidate_misses = Some(
                trials
                    .iter()
                    .filter(|t| t.failure == Some(FailureMode::NoCandidates))
                    .count(),
            );
            if game == GameKind::Reconstruction {
                m.tab_top1_accuracy =
                    Some(trials.iter().filter(|t| t.tab_correct == Some(true)).count() as f64 / n as f64);
            } else {
                let inv: f64 = trials
                    .iter()
                    .map(|t| 1.0 / t.candidates.unwrap_or(1).max(1) as f64)
                    .sum();
                m.random_guess_accuracy = Some(inv / n as f64);
            }
        }
        GameKind::Mi => {
            let scores: Vec<f64> = trials.iter().map(|t| t.score.unwrap_or(f64::NAN)).collect();
            let labels: Vec<bool> = trials.iter().map(|t| t.member == Some(true)).collect();
            let roc = RocCurve::from_scores(&scores, &labels)?;
            m.auc = Some(roc.auc());
            m.members = Some(labels.iter().filter(|b| **b).count());
            m.non_members = Some(labels.iter().filter(|b| !**b).count());
        }
    }
    Ok(m)
}

/// Mean over shadows of `PPL(s; shadow) − PPL(s; target)`. Higher means more
/// member-like. Shadow perplexities are summed in sorted order so the score
/// does not depend on the order of the shadow list.
pub fn mi_score<T, S>(sentence: &[Token], target: &T, shadows: &[S]) -> Result<f64>
where
    T: LanguageModel + ?Sized,
    S: LanguageModel,
{
    if shadows.is_empty() {
        return Err(LabError::invalid("mi_score needs at least one shadow model"));
    }
    if sentence.is_empty() {
        return Err(LabError::invalid("mi_score of an empty sentence"));
    }
    let t = perplexity(target, sentence)?;
    let mut ps = shadows
        .iter()
        .map(|s| perplexity(s, sentence))
        .collect::<Result<Vec<f64>>>()?;
    ps.sort_by(f64::total_cmp);
    let mut acc = 0.0;
    for p in &ps {
        acc += p - t;
    }
    Ok(acc / ps.len() as f64)
}

/// Buckets `(score, correct)` pairs into equal-count score quantiles, never
/// splitting equal scores across buckets.
pub fn memorization_table(pairs: &[(f64, bool)], buckets: usize) -> Result<MemorizationTable> {
    if buckets == 0 {
        return Err(LabError::config("memorization table needs at least one bucket"));
    }
    if pairs.len() < buckets {
        return Err(LabError::invalid(format!(
            "{} sentences cannot fill {buckets} buckets",
            pairs.len()
        )));
    }
    let mut sorted = pairs.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = sorted.len();
    let mut groups: Vec<Vec<(f64, bool)>> = Vec::new();
    let mut start = 0;
    for b in 0..buckets {
        let mut end = ((b + 1) * n) / buckets;
        if end <= start {
            continue;
        }
        while end < n && sorted[end].0 == sorted[end - 1].0 {
            end += 1;
        }
        groups.push(sorted[start..end].to_vec());
        start = end;
        if start >= n {
            break;
        }
    }
    let buckets: Vec<MemorizationBucket> = groups
        .into_iter()
        .map(|g| MemorizationBucket {
            lo: g[0].0,
            hi: g[g.len() - 1].0,
            mean_score: g.iter().map(|p| p.0).sum::<f64>() / g.len() as f64,
            sentences: g.len(),
            accuracy: g.iter().filter(|p| p.1).count() as f64 / g.len() as f64,
        })
        .collect();
    let xs: Vec<f64> = buckets.iter().map(|b| b.mean_score).collect();
    let ys: Vec<f64> = buckets.iter().map(|b| b.accuracy).collect();
    Ok(MemorizationTable {
        spearman: spearman(&xs, &ys),
        buckets,
    })
}

/// The sampled dataset, its tagger and the target model.
pub struct World {
    pub spec: SyntheticSpec,
    pub generated: GeneratedCorpus,
    pub tagger: Tagger,
    pub target: NGramModel,
}

impl World {
    pub fn build(cfg: &GameConfig) -> Result<World> {
        cfg.validate()?;
        let spec = cfg.spec();
        let generated = generate_corpus(&spec)?;
        let tagger = Tagger::new(TaggerConfig::from_pool(
            spec.pii_pool.iter().map(|(c, v)| (*c, v.as_slice())),
        ))?;
        let target = if cfg.model.untrained {
            NGramModel::untrained(
                generated.corpus.vocab().iter().cloned(),
                cfg.model.order,
                cfg.model.lambda,
            )?
        } else {
            train_ngram(&generated.corpus, cfg.model.order, cfg.model.lambda)?
        };
        Ok(World {
            spec,
            generated,
            tagger,
            target,
        })
    }

    fn summary(&self, class: PiiClass) -> CorpusSummary {
        let c = &self.generated.corpus;
        CorpusSummary {
            documents: c.len(),
            train: c.split_len(Split::Train),
            validation: c.split_len(Split::Validation),
            test: c.split_len(Split::Test),
            duplication_exponent: self.generated.exponent,
            mean_duplication: self.generated.mean_duplication(class),
            vocab_size: self.target.vocab().len(),
        }
    }

    /// Models trained on fresh draws from the data distribution, each with
    /// its own PII population.
    pub fn shadows(&self, cfg: &GameConfig) -> Result<Vec<NGramModel>> {
        (0..cfg.shadows as u64)
            .into_par_iter()
            .map(|i| {
                let mut spec = self.spec.clone();
                spec.population_seed = None;
                spec.seed = derive_seed(cfg.seed, streams::SHADOW, i);
                let fresh = generate_corpus(&spec)?;
                train_ngram(&fresh.corpus, cfg.model.order, cfg.model.lambda)
            })
            .collect()
    }

    fn report(&self, cfg: &GameConfig, metrics: Metrics) -> LeakageReport {
        LeakageReport {
            schema: REPORT_SCHEMA.to_string(),
            schema_version: REPORT_SCHEMA_VERSION,
            tool_version: crate::TOOL_VERSION.to_string(),
            game: cfg.game,
            seed: cfg.seed,
            config: cfg.clone(),
            corpus: self.summary(cfg.target_class),
            target_model: self.target.model_id(),
            metrics,
            roc: None,
            memorization: None,
            manifest: None,
        }
    }
}

pub fn run_game(cfg: &GameConfig) -> Result<GameOutcome> {
    match cfg.game {
        GameKind::Extraction => run_extraction_game(cfg),
        GameKind::Reconstruction => run_reconstruction_game(cfg),
        GameKind::Inference => run_inference_game(cfg),
        GameKind::Mi => run_mi_game(cfg),
    }
}

fn expect_game(cfg: &GameConfig, kind: GameKind) -> Result<()> {
    if cfg.game != kind {
        return Err(LabError::config(format!("config is for the {} game, not {kind}", cfg.game)));
    }
    Ok(())
}

pub fn run_extraction_game(cfg: &GameConfig) -> Result<GameOutcome> {
    expect_game(cfg, GameKind::Extraction)?;
    let world = World::build(cfg)?;
    let class = cfg.target_class;
    let truth = world.tagger.unique_pii(&world.generated.corpus, Some(class))?;
    if truth.is_empty() {
        return Err(LabError::invalid(format!("training data contains no {class} PII")));
    }
    let params = GenerationParams {
        seed: derive_seed(cfg.seed, streams::GENERATED, 0),
        ..cfg.extraction.clone()
    };
    let result = extraction_attack(&world.target, &world.tagger, class, truth.len(), &params)?;
    let removed: BTreeSet<String> = if cfg.baseline.enabled {
        let bp = GenerationParams {
            n_sequences: cfg
                .baseline
                .samples
                .unwrap_or_else(|| default_baseline_samples(params.n_sequences)),
            ..params.clone()
        };
        let surfaces = result.surfaces();
        let filtered = match cfg.baseline.public {
            PublicModel::Target => baseline_extraction_filter(&surfaces, &world.target, &world.tagger, class, &bp)?,
            PublicModel::Disjoint => {
                let public = disjoint_public_model(&world, cfg)?;
                baseline_extraction_filter(&surfaces, &public, &world.tagger, class, &bp)?
            }
        };
        filtered.removed.into_iter().collect()
    } else {
        BTreeSet::new()
    };
    let trials: Vec<TrialRecord> = result
        .candidates
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let correct = truth.contains(&c.surface);
            let failure = if removed.contains(&c.surface) {
                Some(FailureMode::Baseline)
            } else if correct {
                None
            } else {
                Some(FailureMode::Wrong)
            };
            TrialRecord {
                guess: Some(c.surface.clone()),
                correct,
                failure,
                observed_count: Some(c.observed_count),
                score: Some(c.est_score.value),
                ..TrialRecord::blank(i)
            }
        })
        .collect();
    let pool: BTreeSet<String> = world
        .spec
        .pii_pool
        .get(&class)
        .map(|v| v.iter().map(|s| world.tagger.pii_key(s)).collect())
        .unwrap_or_default();
    let guessing = (truth.len().min(pool.len()) as f64) / pool.len().max(1) as f64;
    let metrics = metrics_from_trials(GameKind::Extraction, &trials, Some(truth.len()), Some(guessing))?;
    Ok(GameOutcome {
        report: world.report(cfg, metrics),
        trials,
    })
}

/// Uniform model over the corpus vocabulary minus every token that occurs
/// in planted PII.
fn disjoint_public_model(world: &World, cfg: &GameConfig) -> Result<NGramModel> {
    let pii_tokens: BTreeSet<&str> = world
        .spec
        .pii_pool
        .values()
        .flatten()
        .flat_map(|s| s.split_whitespace())
        .collect();
    let vocab = world
        .generated
        .corpus
        .vocab()
        .iter()
        .filter(|t| !pii_tokens.contains(t.as_str()))
        .cloned();
    NGramModel::untrained(vocab, cfg.model.order, cfg.model.lambda)
}

/// One reconstruction query: a member document and a target span in it.
#[derive(Debug, Clone)]
struct Trial<'a> {
    doc: &'a Document,
    spans: Vec<PiiSpan>,
    target: PiiSpan,
}

/// Draws `cfg.trials` targets. The selection stream does not depend on the
/// game kind, so reconstruction and inference games with the same seed
/// play identical queries.
fn select_trials<'a>(world: &'a World, cfg: &GameConfig) -> Result<Vec<Trial<'a>>> {
    let class = cfg.target_class;
    let docs: Vec<(&Document, Vec<PiiSpan>)> = world
        .generated
        .corpus
        .split(Split::Train)
        .map(|d| world.tagger.extract(d, None).map(|s| (d, s)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|(_, s)| s.iter().any(|x| x.class == class))
        .collect();
    if docs.is_empty() {
        return Err(LabError::invalid(format!("no training document contains {class} PII")));
    }
    (0..cfg.trials)
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, streams::QUERY, t as u64));
            let (doc, spans) = &docs[rng.random_range(0..docs.len())];
            let of_class: Vec<&PiiSpan> = spans.iter().filter(|s| s.class == class).collect();
            let target = of_class[rng.random_range(0..of_class.len())].clone();
            Ok(Trial {
                doc,
                spans: spans.clone(),
                target,
            })
        })
        .collect()
}

fn trial_reconstruction_config(cfg: &GameConfig, t: usize) -> ReconstructionConfig {
    let mut rc = cfg.reconstruction.clone();
    rc.generation.seed = derive_seed(cfg.seed, streams::GENERATED, t as u64);
    rc
}

fn reconstruction_trials(world: &World, cfg: &GameConfig) -> Result<Vec<TrialRecord>> {
    let trials = select_trials(world, cfg)?;
    let filler = ExhaustiveMaskFiller::new(&world.target);
    let tagger = &world.tagger;
    trials
        .par_iter()
        .enumerate()
        .map(|(t, trial)| {
            let query = make_masked_query(trial.doc, &trial.spans, &trial.target)?;
            let rc = trial_reconstruction_config(cfg, t);
            let g = reconstruction_attack(&query, &world.target, &filler, tagger, &rc, None)?;
            let tab = tab_attack(
                &query.prefix,
                query.target_class,
                &world.target,
                &filler,
                tagger,
                rc.tab_tokens,
            )?;
            let truth = tagger.pii_key(&query.ground_truth);
            let correct = g.guess.as_deref().is_some_and(|x| tagger.pii_key(x) == truth);
            let tab_correct = tab.guess.as_deref().is_some_and(|x| tagger.pii_key(x) == truth);
            Ok(TrialRecord {
                doc_id: query.doc_id.clone(),
                ground_truth: query.ground_truth.clone(),
                failure: outcome_failure(g.guess.is_some(), correct),
                guess: g.guess,
                correct,
                candidates: Some(g.ranking.len()),
                tab_guess: tab.guess,
                tab_correct: Some(tab_correct),
                ..TrialRecord::blank(t)
            })
        })
        .collect()
}

fn outcome_failure(guessed: bool, correct: bool) -> Option<FailureMode> {
    match (guessed, correct) {
        (_, true) => None,
        (true, false) => Some(FailureMode::Wrong),
        (false, _) => Some(FailureMode::NoCandidates),
    }
}

pub fn run_reconstruction_game(cfg: &GameConfig) -> Result<GameOutcome> {
    expect_game(cfg, GameKind::Reconstruction)?;
    let world = World::build(cfg)?;
    let trials = reconstruction_trials(&world, cfg)?;
    let metrics = metrics_from_trials(GameKind::Reconstruction, &trials, None, None)?;
    Ok(GameOutcome {
        report: world.report(cfg, metrics),
        trials,
    })
}

/// Distinct surfaces of `class` across all PII-bearing documents: the
/// support of the decoy distribution.
fn decoy_universe(world: &World, class: PiiClass) -> Result<Vec<String>> {
    let mut out = BTreeSet::new();
    for d in world.generated.corpus.documents() {
        for s in world.tagger.extract(d, Some(class))? {
            out.insert(world.tagger.pii_key(&s.surface));
        }
    }
    Ok(out.into_iter().collect())
}

/// `m` distinct decoys different from `target`, drawn uniformly, with the
/// target inserted at a uniform position.
fn draw_candidates(universe: &[String], target: &str, m: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let available = universe.iter().filter(|u| *u != target).count();
    let want = m.min(available);
    let mut chosen: Vec<String> = Vec::with_capacity(want + 1);
    let mut seen: BTreeSet<&str> = BTreeSet::new();
    while chosen.len() < want {
        let c = &universe[rng.random_range(0..universe.len())];
        if c != target && seen.insert(c) {
            chosen.push(c.clone());
        }
    }
    let at = rng.random_range(0..=chosen.len());
    chosen.insert(at, target.to_string());
    chosen
}

pub fn run_inference_game(cfg: &GameConfig) -> Result<GameOutcome> {
    expect_game(cfg, GameKind::Inference)?;
    let world = World::build(cfg)?;
    let trials = select_trials(&world, cfg)?;
    let universe = decoy_universe(&world, cfg.target_class)?;
    let filler = ExhaustiveMaskFiller::new(&world.target);
    let tagger = &world.tagger;
    let records: Vec<TrialRecord> = trials
        .par_iter()
        .enumerate()
        .map(|(t, trial)| {
            let query = make_masked_query(trial.doc, &trial.spans, &trial.target)?;
            let truth = tagger.pii_key(&query.ground_truth);
            let set = CandidateSet::provided(draw_candidates(
                &universe,
                &truth,
                cfg.m,
                derive_seed(cfg.seed, streams::DECOY, t as u64),
            ))?;
            let rc = trial_reconstruction_config(cfg, t);
            let g = reconstruction_attack(&query, &world.target, &filler, tagger, &rc, Some(&set))?;
            let correct = g.guess.as_deref().is_some_and(|x| tagger.pii_key(x) == truth);
            Ok(TrialRecord {
                doc_id: query.doc_id.clone(),
                ground_truth: query.ground_truth.clone(),
                failure: outcome_failure(g.guess.is_some(), correct),
                guess: g.guess,
                correct,
                candidates: Some(set.surfaces.len()),
                ..TrialRecord::blank(t)
            })
        })
        .collect::<Result<_>>()?;
    let metrics = metrics_from_trials(GameKind::Inference, &records, None, None)?;
    Ok(GameOutcome {
        report: world.report(cfg, metrics),
        trials: records,
    })
}

/// `cfg.trials` member documents (train split) and as many non-members
/// (validation split), each drawn without replacement.
fn membership_pairs<'a>(world: &'a World, cfg: &GameConfig) -> Result<Vec<(&'a Document, &'a Document)>> {
    let members: Vec<&Document> = world.generated.corpus.split(Split::Train).collect();
    let outsiders: Vec<&Document> = world.generated.corpus.split(Split::Validation).collect();
    let available = members.len().min(outsiders.len());
    if cfg.trials > available {
        return Err(LabError::config(format!(
            "{} membership trials requested but only {available} member/non-member pairs exist",
            cfg.trials
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, streams::MEMBERSHIP, 0));
    let pick = |pool: &[&'a Document], rng: &mut ChaCha8Rng| -> Vec<&'a Document> {
        rand::seq::index::sample(rng, pool.len(), cfg.trials)
            .into_iter()
            .map(|i| pool[i])
            .collect()
    };
    let a = pick(&members, &mut rng);
    let b = pick(&outsiders, &mut rng);
    Ok(a.into_iter().zip(b).collect())
}

pub fn run_mi_game(cfg: &GameConfig) -> Result<GameOutcome> {
    expect_game(cfg, GameKind::Mi)?;
    let world = World::build(cfg)?;
    let shadows = world.shadows(cfg)?;
    let pairs = membership_pairs(&world, cfg)?;
    let records: Vec<TrialRecord> = pairs
        .par_iter()
        .enumerate()
        .map(|(t, (member, outsider))| {
            let rec = |doc: &Document, is_member: bool| -> Result<TrialRecord> {
                Ok(TrialRecord {
                    doc_id: doc.id.clone(),
                    member: Some(is_member),
                    score: Some(mi_score(&doc.tokens, &world.target, &shadows)?),
                    ..TrialRecord::blank(t)
                })
            };
            Ok(vec![rec(member, true)?, rec(outsider, false)?])
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    let metrics = metrics_from_trials(GameKind::Mi, &records, None, None)?;
    let scores: Vec<f64> = records.iter().map(|r| r.score.unwrap_or(f64::NAN)).collect();
    let labels: Vec<bool> = records.iter().map(|r| r.member == Some(true)).collect();
    let roc = RocCurve::from_scores(&scores, &labels)?;
    let mut report = world.report(cfg, metrics);
    report.roc = Some(roc.points);
    if cfg.memorization_buckets > 0 {
        let recon_cfg = GameConfig {
            game: GameKind::Reconstruction,
            ..cfg.clone()
        };
        report.memorization = Some(memorization_with(&world, &shadows, &recon_cfg, cfg.memorization_buckets)?.0);
    }
    Ok(GameOutcome {
        report,
        trials: records,
    })
}

fn memorization_with(
    world: &World,
    shadows: &[NGramModel],
    cfg: &GameConfig,
    buckets: usize,
) -> Result<(MemorizationTable, Vec<TrialRecord>)> {
    let mut trials = reconstruction_trials(world, cfg)?;
    let ids: BTreeMap<&str, &Document> = world
        .generated
        .corpus
        .documents()
        .iter()
        .map(|d| (d.id.as_str(), d))
        .collect();
    let scores: Vec<f64> = trials
        .par_iter()
        .map(|t| mi_score(&ids[t.doc_id.as_str()].tokens, &world.target, shadows))
        .collect::<Result<_>>()?;
    for (t, s) in trials.iter_mut().zip(&scores) {
        t.score = Some(*s);
    }
    let pairs: Vec<(f64, bool)> = trials.iter().map(|t| (t.score.unwrap_or(0.0), t.correct)).collect();
    Ok((memorization_table(&pairs, buckets)?, trials))
}

/// Reconstruction trials scored by their sentence's membership score and
/// bucketed by score quantile. The records carry the score in `score`.
pub fn memorization_vs_reconstruction(cfg: &GameConfig, buckets: usize) -> Result<(MemorizationTable, Vec<TrialRecord>)> {
    let recon_cfg = GameConfig {
        game: GameKind::Reconstruction,
        ..cfg.clone()
    };
    recon_cfg.validate()?;
    if cfg.shadows == 0 {
        return Err(LabError::config("memorization scores need at least one shadow model"));
    }
    let world = World::build(&recon_cfg)?;
    let shadows = world.shadows(&recon_cfg)?;
    memorization_with(&world, &shadows, &recon_cfg, buckets)
}
