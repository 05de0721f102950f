//! Adversaries: extraction, reconstruction, inference and the TAB baseline,
//! plus mask filling and baseline-leakage filtering.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::atomic::{AtomicU64, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{is_placeholder, tokenize, Token};
use crate::error::{LabError, Result};
use crate::lm::{self, log_joint, perplexity, GenerationParams, LanguageModel, ProbDistribution};
use crate::scrub::{MaskedQuery, MASK_TOKEN};
use crate::tagger::{PiiClass, PiiSpan, Tagger};

/// Top-token oracle for a single mask between `left` and `right`.
pub trait MaskFiller: Send + Sync {
    fn fill(&self, left: &[Token], right: &[Token]) -> Result<Token>;
}

impl<F: MaskFiller + ?Sized> MaskFiller for &F {
    fn fill(&self, left: &[Token], right: &[Token]) -> Result<Token> {
        (**self).fill(left, right)
    }
}

/// Brute-force mask filler: `argmax_w Pr(left w right)` over the model's
/// vocabulary, skipping special and placeholder tokens. Ties go to the
/// earlier vocabulary entry.
pub struct ExhaustiveMaskFiller<M> {
    model: M,
}

impl<M: LanguageModel> ExhaustiveMaskFiller<M> {
    pub fn new(model: M) -> Self {
        ExhaustiveMaskFiller { model }
    }
}

impl<M: LanguageModel> MaskFiller for ExhaustiveMaskFiller<M> {
    fn fill(&self, left: &[Token], right: &[Token]) -> Result<Token> {
        let vocab = self.model.next_token_distribution(left)?.vocab().clone();
        let eos = vocab.eos();
        let unk = vocab.unk();
        let scored: Vec<(u32, f64)> = (0..vocab.len() as u32)
            .into_par_iter()
            .filter(|&id| Some(id) != eos && Some(id) != unk && !is_placeholder(vocab.token(id)))
            .map(|id| {
                let mut seq = Vec::with_capacity(left.len() + 1 + right.len());
                seq.extend_from_slice(left);
                seq.push(vocab.token(id).to_string());
                seq.extend_from_slice(right);
                log_joint(&self.model, &seq).map(|lp| (id, lp))
            })
            .collect::<Result<_>>()?;
        let best = scored
            .into_iter()
            .reduce(|a, b| if b.1 > a.1 { b } else { a })
            .ok_or_else(|| LabError::invalid("vocabulary has no fillable tokens"))?;
        Ok(vocab.token(best.0).to_string())
    }
}

/// Fills `[MASK]` tokens left to right. Mask `j` is filled from everything
/// before it (earlier fills included) and the segment up to the next mask.
pub fn fill_masks<F: MaskFiller + ?Sized>(tokens: &[Token], filler: &F) -> Result<Vec<Token>> {
    let segments: Vec<&[Token]> = tokens.split(|t| t == MASK_TOKEN).collect();
    let mut out: Vec<Token> = segments[0].to_vec();
    for (j, seg) in segments.iter().enumerate().skip(1) {
        let w = filler.fill(&out, seg).map_err(|e| LabError::MaskFill {
            index: j - 1,
            source: Box::new(e),
        })?;
        out.push(w);
        out.extend_from_slice(seg);
    }
    Ok(out)
}

/// Wraps a model and counts oracle queries.
pub struct CountingModel<M> {
    inner: M,
    queries: AtomicU64,
}

impl<M: LanguageModel> CountingModel<M> {
    pub fn new(inner: M) -> Self {
        CountingModel {
            inner,
            queries: AtomicU64::new(0),
        }
    }

    pub fn queries(&self) -> u64 {
        self.queries.load(Ordering::Relaxed)
    }
}

impl<M: LanguageModel> LanguageModel for CountingModel<M> {
    fn model_id(&self) -> String {
        self.inner.model_id()
    }

    fn next_token_distribution(&self, prefix: &[Token]) -> Result<ProbDistribution> {
        self.queries.fetch_add(1, Ordering::Relaxed);
        self.inner.next_token_distribution(prefix)
    }

    fn token_logprob(&self, prefix: &[Token], token: &str) -> Result<f64> {
        self.queries.fetch_add(1, Ordering::Relaxed);
        self.inner.token_logprob(prefix, token)
    }

    fn sequence_logprobs(&self, tokens: &[Token]) -> Result<Vec<f64>> {
        self.queries.fetch_add(1, Ordering::Relaxed);
        self.inner.sequence_logprobs(tokens)
    }

    fn end_of_sequence(&self) -> Option<String> {
        self.inner.end_of_sequence()
    }
}

/// Unconditional samples from a model, tagged for one PII class. Observed
/// and estimated extractability of any number of targets can be read off
/// one profile.
#[derive(Debug, Clone)]
pub struct SampleProfile {
    pub class: PiiClass,
    pub sequences: Vec<Vec<Token>>,
    /// Same-class spans of each sequence.
    pub spans: Vec<Vec<PiiSpan>>,
    /// Normalized surfaces per sequence, for membership tests.
    keys: Vec<HashSet<String>>,
    case_insensitive: bool,
}

impl SampleProfile {
    pub fn collect<M: LanguageModel + ?Sized>(
        model: &M,
        tagger: &Tagger,
        class: PiiClass,
        params: &GenerationParams,
    ) -> Result<Self> {
        if params.n_sequences == 0 {
            return Err(LabError::config("at least one sample is required"));
        }
        let sequences = lm::sample(model, &[], params)?;
        Self::from_sequences(sequences, tagger, class)
    }

    pub fn from_sequences(sequences: Vec<Vec<Token>>, tagger: &Tagger, class: PiiClass) -> Result<Self> {
        let spans: Vec<Vec<PiiSpan>> = sequences
            .par_iter()
            .enumerate()
            .map(|(i, s)| tagger.extract_tokens(&format!("sample-{i}"), s, Some(class)))
            .collect::<Result<_>>()?;
        let keys = spans
            .iter()
            .map(|ss| ss.iter().map(|s| tagger.pii_key(&s.surface)).collect())
            .collect();
        Ok(SampleProfile {
            class,
            sequences,
            spans,
            keys,
            case_insensitive: tagger.case_insensitive(),
        })
    }

    pub fn tokens_drawn(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }

    /// Number of same-class slots across all samples.
    pub fn slots(&self) -> usize {
        self.spans.iter().map(Vec::len).sum()
    }

    fn key(&self, surface: &str) -> String {
        crate::tagger::normalize_surface(surface, self.case_insensitive)
    }

    /// Fraction of samples in which `surface` was tagged (once per sample).
    pub fn observed(&self, surface: &str) -> f64 {
        let key = self.key(surface);
        let k = self.keys.iter().filter(|s| s.contains(&key)).count();
        k as f64 / self.sequences.len() as f64
    }

    /// Occurrence counts per normalized surface.
    pub fn occurrence_counts(&self) -> BTreeMap<String, usize> {
        let mut counts = BTreeMap::new();
        for ss in &self.spans {
            for s in ss {
                *counts.entry(self.key(&s.surface)).or_insert(0) += 1;
            }
        }
        counts
    }

    /// `ln Pr(S₀)` of the prefix before every slot, in slot order.
    fn slot_bases<M: LanguageModel + ?Sized>(&self, model: &M) -> Result<Vec<(Vec<Token>, f64)>> {
        self.sequences
            .par_iter()
            .zip(&self.spans)
            .flat_map_iter(|(seq, ss)| ss.iter().map(move |s| seq[..s.start].to_vec()))
            .map(|prefix| log_joint(model, &prefix).map(|b| (prefix, b)))
            .collect()
    }

    /// Mean over all same-class slots of `Pr(C | S₀)`.
    pub fn estimated<M: LanguageModel + ?Sized>(&self, model: &M, surface: &str) -> Result<Estimate> {
        Ok(self.estimated_many(model, &[surface.to_string()])?.remove(0))
    }

    pub fn estimated_many<M: LanguageModel + ?Sized>(&self, model: &M, surfaces: &[String]) -> Result<Vec<Estimate>> {
        let bases = self.slot_bases(model)?;
        surfaces
            .par_iter()
            .map(|surface| {
                let c = tokenize(surface);
                if c.is_empty() {
                    return Err(LabError::invalid("cannot estimate extractability of an empty PII"));
                }
                if bases.is_empty() {
                    return Ok(Estimate {
                        value: 0.0,
                        slots: 0,
                        no_slots: true,
                    });
                }
                let mut acc = 0.0;
                for (prefix, base) in &bases {
                    // Continues the left-to-right sum of `base`, so this is
                    // bit-identical to log_joint(S₀ ⧺ C).
                    let mut joint = *base;
                    let mut ctx = prefix.clone();
                    for t in &c {
                        joint += model.token_logprob(&ctx, t)?;
                        ctx.push(t.clone());
                    }
                    acc += (joint - base).exp();
                }
                Ok(Estimate {
                    value: (acc / bases.len() as f64).clamp(0.0, 1.0),
                    slots: bases.len(),
                    no_slots: false,
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    /// Same-class slots the estimate averages over.
    pub slots: usize,
    /// True when no slot was observed and `value` is a placeholder 0.
    pub no_slots: bool,
}

/// Fraction of `params.n_sequences` unconditional samples in which the tagger
/// finds `surface` among spans of class `class`.
pub fn observed_extractability<M: LanguageModel + ?Sized>(
    surface: &str,
    class: PiiClass,
    model: &M,
    tagger: &Tagger,
    params: &GenerationParams,
) -> Result<f64> {
    Ok(SampleProfile::collect(model, tagger, class, params)?.observed(surface))
}

/// Lazy estimate of the probability that the model emits `surface`, from
/// the same-class slots in unconditional samples.
pub fn estimated_extractability<M: LanguageModel + ?Sized>(
    surface: &str,
    class: PiiClass,
    model: &M,
    tagger: &Tagger,
    params: &GenerationParams,
) -> Result<Estimate> {
    SampleProfile::collect(model, tagger, class, params)?.estimated(model, surface)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractedPii {
    pub surface: String,
    pub observed_count: usize,
    pub est_score: Estimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionResult {
    /// Most frequent first; ties in lexicographic order.
    pub candidates: Vec<ExtractedPii>,
    pub sample_budget: usize,
    pub queries: u64,
}

impl ExtractionResult {
    pub fn surfaces(&self) -> Vec<String> {
        self.candidates.iter().map(|c| c.surface.clone()).collect()
    }
}

/// Samples, tags, and returns the `budget` most frequent surfaces.
pub fn extraction_attack<M: LanguageModel + ?Sized>(
    model: &M,
    tagger: &Tagger,
    class: PiiClass,
    budget: usize,
    params: &GenerationParams,
) -> Result<ExtractionResult> {
    if budget == 0 {
        return Err(LabError::config("extraction budget must be >= 1"));
    }
    let counting = CountingModel::new(model);
    let profile = SampleProfile::collect(&counting, tagger, class, params)?;
    let queries = counting.queries();
    let mut ranked: Vec<(String, usize)> = profile.occurrence_counts().into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(budget);
    let surfaces: Vec<String> = ranked.iter().map(|(s, _)| s.clone()).collect();
    let estimates = profile.estimated_many(model, &surfaces)?;
    Ok(ExtractionResult {
        candidates: ranked
            .into_iter()
            .zip(estimates)
            .map(|((surface, observed_count), est_score)| ExtractedPii {
                surface,
                observed_count,
                est_score,
            })
            .collect(),
        sample_budget: profile.tokens_drawn(),
        queries,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateSource {
    Sampled,
    Provided,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub surfaces: Vec<String>,
    pub source: CandidateSource,
}

impl CandidateSet {
    pub fn provided(surfaces: Vec<String>) -> Result<Self> {
        if surfaces.is_empty() {
            return Err(LabError::invalid("candidate set must not be empty"));
        }
        Ok(CandidateSet {
            surfaces,
            source: CandidateSource::Provided,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionGuess {
    /// `None` when no candidate was available.
    pub guess: Option<String>,
    /// Candidates in generation order with their perplexity.
    pub ranking: Vec<(String, f64)>,
    pub filled_prefix: Vec<Token>,
    pub filled_suffix: Vec<Token>,
    pub source: CandidateSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionConfig {
    /// Sampling used to generate candidates from the prefix.
    #[serde(default = "ReconstructionConfig::default_generation")]
    pub generation: GenerationParams,
    /// Greedy decode length of the TAB baseline.
    #[serde(default = "ReconstructionConfig::default_tab_tokens")]
    pub tab_tokens: usize,
}

impl Default for ReconstructionConfig {
    fn default() -> Self {
        ReconstructionConfig {
            generation: Self::default_generation(),
            tab_tokens: Self::default_tab_tokens(),
        }
    }
}

impl ReconstructionConfig {
    fn default_generation() -> GenerationParams {
        GenerationParams {
            n_sequences: 64,
            ..GenerationParams::default()
        }
    }

    fn default_tab_tokens() -> usize {
        10
    }
}

/// Samples continuations of `prefix` and returns the distinct same-class
/// PII that start inside the continuation, in generation order.
fn sample_candidates<M: LanguageModel + ?Sized>(
    model: &M,
    tagger: &Tagger,
    class: PiiClass,
    prefix: &[Token],
    params: &GenerationParams,
) -> Result<Vec<(String, Vec<Token>)>> {
    let continuations = lm::sample(model, prefix, params)?;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for cont in continuations {
        let mut full = prefix.to_vec();
        full.extend(cont);
        for span in tagger.extract_tokens("candidate", &full, Some(class))? {
            if span.start < prefix.len() {
                continue;
            }
            if seen.insert(tagger.pii_key(&span.surface)) {
                out.push((span.surface.clone(), full[span.start..span.end].to_vec()));
            }
        }
    }
    Ok(out)
}


fn rank<M: LanguageModel + ?Sized>(
    model: &M,
    filled_prefix: Vec<Token>,
    filled_suffix: Vec<Token>,
    pool: Vec<(String, Vec<Token>)>,
    source: CandidateSource,
) -> Result<ReconstructionGuess> {
    let ranking: Vec<(String, f64)> = pool
        .par_iter()
        .map(|(surface, toks)| {
            let mut seq = filled_prefix.clone();
            seq.extend(toks.iter().cloned());
            seq.extend(filled_suffix.iter().cloned());
            perplexity(model, &seq).map(|p| (surface.clone(), p))
        })
        .collect::<Result<_>>()?;
    let mut best: Option<(usize, f64)> = None;
    for (i, (_, p)) in ranking.iter().enumerate() {
        if best.is_none_or(|(_, b)| *p < b) {
            best = Some((i, *p));
        }
    }
    Ok(ReconstructionGuess {
        guess: best.map(|(i, _)| ranking[i].0.clone()),
        ranking,
        filled_prefix,
        filled_suffix,
        source,
    })
}

/// Ranks candidates for the masked position by the perplexity of the whole
/// assembled sentence `S₀ C S₁` and returns the argmin.
///
/// Residual masks in the prefix and suffix are filled first, each side on
/// its own. Without `candidates` they are sampled from the target model
/// continuing the prefix; an empty sample yields `guess: None`.
pub fn reconstruction_attack<M, F>(
    query: &MaskedQuery,
    model: &M,
    filler: &F,
    tagger: &Tagger,
    cfg: &ReconstructionConfig,
    candidates: Option<&CandidateSet>,
) -> Result<ReconstructionGuess>
where
    M: LanguageModel + ?Sized,
    F: MaskFiller + ?Sized,
{
    let filled_prefix = fill_masks(&query.prefix, filler)?;
    let filled_suffix = fill_masks(&query.suffix, filler)?;
    let (pool, source) = match candidates {
        Some(set) => {
            if set.surfaces.is_empty() {
                return Err(LabError::invalid("provided candidate set is empty"));
            }
            let pool = set.surfaces.iter().map(|s| (s.clone(), tokenize(s))).collect();
            (pool, set.source)
        }
        None => (
            sample_candidates(model, tagger, query.target_class, &filled_prefix, &cfg.generation)?,
            CandidateSource::Sampled,
        ),
    };
    rank(model, filled_prefix, filled_suffix, pool, source)
}

/// The "TAB" baseline: greedy decoding from the prefix only. The first PII of
/// the target class that starts in the continuation is the guess.
///
/// Residual masks in the prefix are filled first so the comparison with
/// [`reconstruction_attack`] sees the same context.
pub fn tab_attack<M, F>(
    prefix: &[Token],
    class: PiiClass,
    model: &M,
    filler: &F,
    tagger: &Tagger,
    decode_tokens: usize,
) -> Result<ReconstructionGuess>
where
    M: LanguageModel + ?Sized,
    F: MaskFiller + ?Sized,
{
    let filled_prefix = fill_masks(prefix, filler)?;
    let continuation = lm::greedy(model, &filled_prefix, decode_tokens)?;
    let mut full = filled_prefix.clone();
    full.extend(continuation);
    let guess = tagger
        .extract_tokens("tab", &full, Some(class))?
        .into_iter()
        .find(|s| s.start >= filled_prefix.len())
        .map(|s| s.surface);
    Ok(ReconstructionGuess {
        guess,
        ranking: Vec::new(),
        filled_prefix,
        filled_suffix: Vec::new(),
        source: CandidateSource::Sampled,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineFiltered {
    pub kept: Vec<String>,
    pub removed: Vec<String>,
}

/// Default public-model sampling budget relative to the attack's: the
/// reference setting draws 13m baseline tokens against a 4m-token attack.
pub fn default_baseline_samples(attack_samples: usize) -> usize {
    (attack_samples * 13).div_ceil(4)
}

/// Drops every surface that the public model emits under `params`.
///
/// With the same seed as the attack, sequence `i` of the baseline run uses
/// the same random stream as sequence `i` of the attack run.
pub fn baseline_extraction_filter<M: LanguageModel + ?Sized>(
    surfaces: &[String],
    public_model: &M,
    tagger: &Tagger,
    class: PiiClass,
    params: &GenerationParams,
) -> Result<BaselineFiltered> {
    let profile = SampleProfile::collect(public_model, tagger, class, params)?;
    let public: HashSet<String> = profile.occurrence_counts().into_keys().collect();
    let (removed, kept): (Vec<String>, Vec<String>) = surfaces
        .iter()
        .cloned()
        .partition(|s| public.contains(&tagger.pii_key(s)));
    Ok(BaselineFiltered { kept, removed })
}

/// Drops every item the public model already answers correctly.
pub fn baseline_prediction_filter<T, P>(items: Vec<T>, public_answers_correctly: P) -> Result<Vec<T>>
where
    T: Send + Sync,
    P: Fn(&T) -> Result<bool> + Sync,
{
    let flags: Vec<bool> = items
        .par_iter()
        .map(&public_answers_correctly)
        .collect::<Result<_>>()?;
    Ok(items
        .into_iter()
        .zip(flags)
        .filter_map(|(item, solved)| (!solved).then_some(item))
        .collect())
}

/// Distinct surfaces keyed by the tagger's equality, first occurrence wins.
pub fn dedup_surfaces(tagger: &Tagger, surfaces: impl IntoIterator<Item = String>) -> Vec<String> {
    let mut seen = HashMap::new();
    let mut out = Vec::new();
    for s in surfaces {
        if seen.insert(tagger.pii_key(&s), ()).is_none() {
            out.push(s);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Corpus, Document, Split};
    use crate::lm::{score, train_ngram, Vocabulary};
    use crate::tagger::TaggerConfig;
    use std::sync::{Arc, Mutex};

    fn toks(s: &str) -> Vec<Token> {
        tokenize(s)
    }

    fn person_tagger(names: &[&str]) -> Tagger {
        Tagger::new(TaggerConfig::from_pool([(PiiClass::Person, names)])).unwrap()
    }

    /// Context-free model with fixed token probabilities.
    struct Fixed {
        vocab: Arc<Vocabulary>,
        probs: Vec<f64>,
    }

    impl Fixed {
        fn new(entries: &[(&str, f64)]) -> Self {
            let tokens = entries.iter().map(|(t, _)| t.to_string()).collect();
            Fixed {
                vocab: Arc::new(Vocabulary::new(tokens, Some("</s>"), None).unwrap()),
                probs: entries.iter().map(|(_, p)| *p).collect(),
            }
        }
    }

    impl LanguageModel for Fixed {
        fn model_id(&self) -> String {
            "fixed".into()
        }
        fn next_token_distribution(&self, _: &[Token]) -> Result<ProbDistribution> {
            ProbDistribution::new(self.vocab.clone(), self.probs.clone())
        }
        fn end_of_sequence(&self) -> Option<String> {
            Some("</s>".into())
        }
    }

    /// Emits a fixed sentence, then EOS.
    struct Parrot {
        vocab: Arc<Vocabulary>,
        sentence: Vec<Token>,
    }

    impl Parrot {
        fn new(sentence: &str, extra: &[&str]) -> Self {
            let sentence = toks(sentence);
            let mut tokens = vec!["</s>".to_string()];
            for t in sentence.iter().map(String::as_str).chain(extra.iter().copied()) {
                if !tokens.iter().any(|x| x == t) {
                    tokens.push(t.to_string());
                }
            }
            Parrot {
                vocab: Arc::new(Vocabulary::new(tokens, Some("</s>"), None).unwrap()),
                sentence,
            }
        }
    }

    impl LanguageModel for Parrot {
        fn model_id(&self) -> String {
            "parrot".into()
        }
        fn next_token_distribution(&self, prefix: &[Token]) -> Result<ProbDistribution> {
            let next = self.sentence.get(prefix.len()).map_or("</s>", String::as_str);
            let mut probs = vec![0.0; self.vocab.len()];
            probs[self.vocab.id(next).unwrap() as usize] = 1.0;
            ProbDistribution::new(self.vocab.clone(), probs)
        }
        fn end_of_sequence(&self) -> Option<String> {
            Some("</s>".into())
        }
    }

    struct Recorder {
        calls: Mutex<Vec<(Vec<Token>, Vec<Token>)>>,
    }

    impl MaskFiller for Recorder {
        fn fill(&self, left: &[Token], right: &[Token]) -> Result<Token> {
            let mut c = self.calls.lock().unwrap();
            c.push((left.to_vec(), right.to_vec()));
            Ok(format!("F{}", c.len()))
        }
    }

    struct Failing;

    impl MaskFiller for Failing {
        fn fill(&self, _: &[Token], _: &[Token]) -> Result<Token> {
            Err(LabError::invalid("offline"))
        }
    }

    fn params(n: usize, seed: u64) -> GenerationParams {
        GenerationParams {
            top_k: 40,
            max_tokens: 32,
            n_sequences: n,
            seed,
        }
    }

    #[test]
    fn fill_masks_is_identity_without_masks() {
        let r = Recorder { calls: Mutex::new(vec![]) };
        let s = toks("nothing masked here");
        assert_eq!(fill_masks(&s, &r).unwrap(), s);
        assert!(r.calls.lock().unwrap().is_empty());
    }

    #[test]
    fn fill_masks_goes_left_to_right() {
        let r = Recorder { calls: Mutex::new(vec![]) };
        let out = fill_masks(&toks("[MASK] plays soccer in [MASK] , England ."), &r).unwrap();
        let calls = r.calls.lock().unwrap();
        assert_eq!(calls.len(), 2);
        assert_eq!(calls[0], (vec![], toks("plays soccer in")));
        assert_eq!(calls[1], (toks("F1 plays soccer in"), toks(", England .")));
        assert_eq!(out, toks("F1 plays soccer in F2 , England ."));
    }

    #[test]
    fn fill_errors_name_the_mask() {
        let err = fill_masks(&toks("a [MASK] b"), &Failing).unwrap_err();
        assert!(matches!(err, LabError::MaskFill { index: 0, .. }));
    }

    #[test]
    fn exhaustive_filler_matches_brute_force_argmax() {
        let c = Corpus::new(
            ["John plays soccer in London , England .", "Mary plays chess in Paris , France ."]
                .iter()
                .enumerate()
                .map(|(i, t)| Document::new(format!("d{i}"), toks(t), Split::Train))
                .collect(),
        )
        .unwrap();
        let m = train_ngram(&c, 3, 0.1).unwrap();
        let filler = ExhaustiveMaskFiller::new(&m);
        let (left, right) = (toks(""), toks("plays soccer in"));
        let got = filler.fill(&left, &right).unwrap();
        let mut best = (String::new(), f64::NEG_INFINITY);
        for w in m.vocab().content_tokens() {
            let mut s = left.clone();
            s.push(w.to_string());
            s.extend(right.iter().cloned());
            let lp = score(&m, &s).unwrap();
            if lp > best.1 {
                best = (w.to_string(), lp);
            }
        }
        assert_eq!(got, best.0);
        assert_eq!(got, "John");
        let filled = fill_masks(&toks("[MASK] plays soccer in [MASK] , England ."), &filler).unwrap();
        assert_eq!(filled, toks("John plays soccer in London , England ."));
    }

    #[test]
    fn deterministic_model_is_fully_extractable() {
        let m = Parrot::new("I met Jane Roe today .", &[]);
        let t = person_tagger(&["Jane Roe", "Max Mu"]);
        let p = params(20, 1);
        assert_eq!(observed_extractability("Jane Roe", PiiClass::Person, &m, &t, &p).unwrap(), 1.0);
        assert_eq!(observed_extractability("Max Mu", PiiClass::Person, &m, &t, &p).unwrap(), 0.0);
        let r = extraction_attack(&m, &t, PiiClass::Person, 1, &p).unwrap();
        assert_eq!(r.surfaces(), vec!["Jane Roe".to_string()]);
        assert_eq!(r.candidates[0].observed_count, 20);
        assert_eq!(r.candidates[0].est_score.value, 1.0);
        assert_eq!(r.sample_budget, 20 * 6);
        assert!(r.queries > 0);
        assert!(extraction_attack(&m, &t, PiiClass::Person, 0, &p).is_err());
    }

    #[test]
    fn constant_slot_probability_is_recovered_exactly() {
        // Every position emits "Ann" with probability 0.25, so every tagged
        // slot has Pr(Ann | S₀) = 0.25.
        let m = Fixed::new(&[("</s>", 0.25), ("Ann", 0.25), ("Bob", 0.5)]);
        let t = person_tagger(&["Ann", "Bob"]);
        let e = estimated_extractability("Ann", PiiClass::Person, &m, &t, &params(200, 4)).unwrap();
        assert!(!e.no_slots && e.slots > 0);
        assert_eq!(e.value, 0.25);
    }

    #[test]
    fn no_slots_is_flagged() {
        let m = Parrot::new("nobody here .", &["Ann"]);
        let t = person_tagger(&["Ann"]);
        let e = estimated_extractability("Ann", PiiClass::Person, &m, &t, &params(5, 0)).unwrap();
        assert_eq!(e, Estimate { value: 0.0, slots: 0, no_slots: true });
    }

    #[test]
    fn estimate_is_order_invariant() {
        let m = Fixed::new(&[("</s>", 0.2), ("Ann", 0.3), ("Bob", 0.1), ("x", 0.4)]);
        let t = person_tagger(&["Ann", "Bob"]);
        let prof = SampleProfile::collect(&m, &t, PiiClass::Person, &params(100, 9)).unwrap();
        let mut rev = prof.sequences.clone();
        rev.reverse();
        let prof2 = SampleProfile::from_sequences(rev, &t, PiiClass::Person).unwrap();
        let a = prof.estimated(&m, "Bob").unwrap().value;
        let b = prof2.estimated(&m, "Bob").unwrap().value;
        assert!((a - b).abs() < 1e-12);
        assert!((0.0..=1.0).contains(&a));
    }

    fn query(prefix: &str, suffix: &str, truth: &str) -> MaskedQuery {
        MaskedQuery {
            doc_id: "q".into(),
            prefix: toks(prefix),
            suffix: toks(suffix),
            target_class: PiiClass::Person,
            ground_truth: truth.into(),
        }
    }

    fn hospital_model() -> crate::lm::NGramModel {
        let mut texts = vec![];
        for (name, treat) in [("Ann", "chemo"), ("Bob", "surgery"), ("Cid", "rest"), ("Dee", "yoga"), ("Eve", "pills")] {
            for _ in 0..3 {
                texts.push(format!("In May , {name} had {treat} at LHS ."));
            }
        }
        let c = Corpus::new(
            texts
                .iter()
                .enumerate()
                .map(|(i, t)| Document::new(format!("d{i}"), toks(t), Split::Train))
                .collect(),
        )
        .unwrap();
        train_ngram(&c, 3, 0.1).unwrap()
    }

    #[test]
    fn singleton_candidate_is_returned() {
        let m = hospital_model();
        let t = person_tagger(&["Ann"]);
        let set = CandidateSet::provided(vec!["Zed".into()]).unwrap();
        let g = reconstruction_attack(&query("In May ,", "had chemo at LHS .", "Ann"), &m, &Failing, &t,
            &ReconstructionConfig::default(), Some(&set)).unwrap();
        assert_eq!(g.guess.as_deref(), Some("Zed"));
        assert!(CandidateSet::provided(vec![]).is_err());
    }

    #[test]
    fn suffix_disambiguates_among_five_candidates() {
        let m = hospital_model();
        let names = ["Ann", "Bob", "Cid", "Dee", "Eve"];
        let t = person_tagger(&names);
        let set = CandidateSet::provided(names.iter().map(|s| s.to_string()).collect()).unwrap();
        let q = query("In May ,", "had yoga at LHS .", "Dee");
        let g = reconstruction_attack(&q, &m, &Failing, &t, &ReconstructionConfig::default(), Some(&set)).unwrap();
        // Independent recomputation of every candidate's perplexity.
        let ppl = |c: &str| perplexity(&m, &toks(&format!("In May , {c} had yoga at LHS ."))).unwrap();
        for n in names.iter().filter(|n| **n != "Dee") {
            assert!(ppl("Dee") < ppl(n));
        }
        assert_eq!(g.guess.as_deref(), Some("Dee"));
        for (c, p) in &g.ranking {
            assert_eq!(*p, ppl(c));
        }

        // Sampled mode draws the candidates from the prefix and still wins.
        let cfg = ReconstructionConfig {
            generation: params(64, 5),
            tab_tokens: 10,
        };
        let s = reconstruction_attack(&q, &m, &Failing, &t, &cfg, None).unwrap();
        assert_eq!(s.source, CandidateSource::Sampled);
        assert_eq!(s.guess.as_deref(), Some("Dee"));
    }

    #[test]
    fn equal_perplexity_keeps_first_candidate() {
        let m = Fixed::new(&[("</s>", 0.2), ("Ann", 0.4), ("Bob", 0.4)]);
        let t = person_tagger(&["Ann", "Bob"]);
        let set = CandidateSet::provided(vec!["Bob".into(), "Ann".into()]).unwrap();
        let g = reconstruction_attack(&query("", "", "Ann"), &m, &Failing, &t, &ReconstructionConfig::default(), Some(&set))
            .unwrap();
        assert_eq!(g.guess.as_deref(), Some("Bob"));
    }

    #[test]
    fn empty_sample_is_a_no_candidate_miss() {
        let m = Parrot::new("nobody here .", &["Ann"]);
        let t = person_tagger(&["Ann"]);
        let cfg = ReconstructionConfig {
            generation: params(4, 0),
            tab_tokens: 10,
        };
        let g = reconstruction_attack(&query("", "", "Ann"), &m, &Failing, &t, &cfg, None).unwrap();
        assert_eq!(g.guess, None);
        assert!(g.ranking.is_empty());
    }

    #[test]
    fn tab_follows_the_greedy_path() {
        let m = Parrot::new("In May , Ann had chemo .", &[]);
        let t = person_tagger(&["Ann"]);
        let g = tab_attack(&toks("In May ,"), PiiClass::Person, &m, &Failing, &t, 10).unwrap();
        assert_eq!(g.guess.as_deref(), Some("Ann"));
        let miss = Parrot::new("nobody here at all .", &["Ann"]);
        let g = tab_attack(&[], PiiClass::Person, &miss, &Failing, &t, 10).unwrap();
        assert_eq!(g.guess, None);
    }

    #[test]
    fn self_baseline_removes_everything_disjoint_removes_nothing() {
        let m = hospital_model();
        let names = ["Ann", "Bob", "Cid", "Dee", "Eve"];
        let t = person_tagger(&names);
        let p = params(50, 7);
        let r = extraction_attack(&m, &t, PiiClass::Person, 5, &p).unwrap();
        assert!(!r.candidates.is_empty());
        let bp = GenerationParams {
            n_sequences: default_baseline_samples(p.n_sequences),
            ..p.clone()
        };
        let f = baseline_extraction_filter(&r.surfaces(), &m, &t, PiiClass::Person, &bp).unwrap();
        assert!(f.kept.is_empty());
        let public = Parrot::new("nothing personal .", &[]);
        let f = baseline_extraction_filter(&r.surfaces(), &public, &t, PiiClass::Person, &bp).unwrap();
        assert_eq!(f.kept, r.surfaces());
    }

    #[test]
    fn prediction_filter_drops_solved_items() {
        let kept = baseline_prediction_filter(vec![1, 2, 3, 4], |x| Ok(x % 2 == 0)).unwrap();
        assert_eq!(kept, vec![1, 3]);
    }
}
