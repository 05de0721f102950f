//! The black-box next-token oracle and everything built on top of it:
//! chain-rule scoring, perplexity and top-k sampling.
//!
//! [`score`], [`perplexity`] and [`sample`] only talk to a model through the
//! [`LanguageModel`] trait, so a remote model and the built-in n-gram model
//! are interchangeable.

mod ngram;

use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Token;
use crate::error::{LabError, Result};
use crate::{derive_seed, streams};

pub use ngram::{train_ngram, NGramModel, BOS_TOKEN, EOS_TOKEN, UNK_TOKEN};

/// Ordered token list with its inverse index.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<Token>,
    index: HashMap<Token, u32>,
    eos: Option<u32>,
    unk: Option<u32>,
}

impl Vocabulary {
    pub fn new(tokens: Vec<Token>, eos: Option<&str>, unk: Option<&str>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(LabError::invalid(format!("duplicate vocabulary token {t:?}")));
            }
        }
        let find = |name: Option<&str>| -> Result<Option<u32>> {
            name.map(|n| {
                index
                    .get(n)
                    .copied()
                    .ok_or_else(|| LabError::invalid(format!("special token {n:?} not in vocabulary")))
            })
            .transpose()
        };
        let eos = find(eos)?;
        let unk = find(unk)?;
        Ok(Vocabulary {
            tokens,
            index,
            eos,
            unk,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    /// Exact lookup.
    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    /// Lookup falling back to the unknown-token id.
    pub fn lookup(&self, token: &str) -> Option<u32> {
        self.id(token).or(self.unk)
    }

    pub fn eos(&self) -> Option<u32> {
        self.eos
    }

    pub fn unk(&self) -> Option<u32> {
        self.unk
    }

    /// Tokens that can appear inside text (everything except EOS and UNK).
    pub fn content_tokens(&self) -> impl Iterator<Item = &str> + '_ {
        self.tokens
            .iter()
            .enumerate()
            .filter(|(i, _)| Some(*i as u32) != self.eos && Some(*i as u32) != self.unk)
            .map(|(_, t)| t.as_str())
    }
}

/// A full next-token probability vector.
#[derive(Debug, Clone)]
pub struct ProbDistribution {
    vocab: Arc<Vocabulary>,
    probs: Vec<f64>,
}

impl ProbDistribution {
    pub const TOLERANCE: f64 = 1e-9;

    pub fn new(vocab: Arc<Vocabulary>, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != vocab.len() {
            return Err(LabError::invalid(format!(
                "distribution has {} entries for a vocabulary of {}",
                probs.len(),
                vocab.len()
            )));
        }
        if let Some(p) = probs.iter().find(|p| !(p.is_finite() && **p >= 0.0)) {
            return Err(LabError::invalid(format!("invalid probability {p}")));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > Self::TOLERANCE {
            return Err(LabError::invalid(format!("probabilities sum to {total}")));
        }
        Ok(ProbDistribution { vocab, probs })
    }

    pub fn vocab(&self) -> &Arc<Vocabulary> {
        &self.vocab
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Probability of `token`; unknown tokens take the UNK mass if the
    /// vocabulary has one, else zero.
    pub fn prob(&self, token: &str) -> f64 {
        self.vocab.lookup(token).map_or(0.0, |i| self.probs[i as usize])
    }

    /// The `k` most probable token ids, most probable first; equal
    /// probabilities keep vocabulary order.
    pub fn top_k(&self, k: usize) -> Vec<(u32, f64)> {
        let cmp = |a: &usize, b: &usize| self.probs[*b].total_cmp(&self.probs[*a]).then(a.cmp(b));
        let mut idx: Vec<usize> = (0..self.probs.len()).collect();
        let k = k.min(idx.len());
        if k == 0 {
            return Vec::new();
        }
        if k < idx.len() {
            idx.select_nth_unstable_by(k - 1, cmp);
            idx.truncate(k);
        }
        idx.sort_by(cmp);
        idx.into_iter().map(|i| (i as u32, self.probs[i])).collect()
    }

    pub fn argmax(&self) -> u32 {
        self.top_k(1)[0].0
    }
}

/// Black-box access to a language model: the full next-token distribution
/// for any prefix. All other methods have defaults derived from it.
pub trait LanguageModel: Send + Sync {
    fn model_id(&self) -> String;

    fn next_token_distribution(&self, prefix: &[Token]) -> Result<ProbDistribution>;

    /// `ln Pr(token | prefix)`.
    fn token_logprob(&self, prefix: &[Token], token: &str) -> Result<f64> {
        Ok(self.next_token_distribution(prefix)?.prob(token).ln())
    }

    /// `ln Pr(w_i | w_1..w_{i-1})` for every position of `tokens`.
    fn sequence_logprobs(&self, tokens: &[Token]) -> Result<Vec<f64>> {
        (0..tokens.len())
            .map(|i| self.token_logprob(&tokens[..i], &tokens[i]))
            .collect()
    }

    /// The end-of-sequence token, if the model emits one.
    fn end_of_sequence(&self) -> Option<String>;
}

impl<M: LanguageModel + ?Sized> LanguageModel for &M {
    fn model_id(&self) -> String {
        (**self).model_id()
    }
    fn next_token_distribution(&self, prefix: &[Token]) -> Result<ProbDistribution> {
        (**self).next_token_distribution(prefix)
    }
    fn token_logprob(&self, prefix: &[Token], token: &str) -> Result<f64> {
        (**self).token_logprob(prefix, token)
    }
    fn sequence_logprobs(&self, tokens: &[Token]) -> Result<Vec<f64>> {
        (**self).sequence_logprobs(tokens)
    }
    fn end_of_sequence(&self) -> Option<String> {
        (**self).end_of_sequence()
    }
}

impl<M: LanguageModel + ?Sized> LanguageModel for Arc<M> {
    fn model_id(&self) -> String {
        (**self).model_id()
    }
    fn next_token_distribution(&self, prefix: &[Token]) -> Result<ProbDistribution> {
        (**self).next_token_distribution(prefix)
    }
    fn token_logprob(&self, prefix: &[Token], token: &str) -> Result<f64> {
        (**self).token_logprob(prefix, token)
    }
    fn sequence_logprobs(&self, tokens: &[Token]) -> Result<Vec<f64>> {
        (**self).sequence_logprobs(tokens)
    }
    fn end_of_sequence(&self) -> Option<String> {
        (**self).end_of_sequence()
    }
}

/// Natural-log probability of the whole sequence by the chain rule.
pub fn score<M: LanguageModel + ?Sized>(model: &M, tokens: &[Token]) -> Result<f64> {
    if tokens.is_empty() {
        return Err(LabError::invalid("cannot score an empty sequence"));
    }
    log_joint(model, tokens)
}

/// Like [`score`] but the empty sequence has log-probability 0.
pub fn log_joint<M: LanguageModel + ?Sized>(model: &M, tokens: &[Token]) -> Result<f64> {
    let mut total = 0.0;
    for lp in model.sequence_logprobs(tokens)? {
        total += lp;
    }
    Ok(total)
}

/// `exp(-score / n)`.
pub fn perplexity<M: LanguageModel + ?Sized>(model: &M, tokens: &[Token]) -> Result<f64> {
    let s = score(model, tokens)?;
    Ok((-s / tokens.len() as f64).exp())
}

/// `ln Pr(continuation | context)`, computed as a difference of joint scores.
pub fn conditional_logprob<M: LanguageModel + ?Sized>(
    model: &M,
    context: &[Token],
    continuation: &[Token],
) -> Result<f64> {
    let mut joined = Vec::with_capacity(context.len() + continuation.len());
    joined.extend_from_slice(context);
    joined.extend_from_slice(continuation);
    Ok(log_joint(model, &joined)? - log_joint(model, context)?)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationParams {
    #[serde(default = "GenerationParams::default_top_k")]
    pub top_k: usize,
    #[serde(default = "GenerationParams::default_max_tokens")]
    pub max_tokens: usize,
    #[serde(default = "GenerationParams::default_n")]
    pub n_sequences: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for GenerationParams {
    fn default() -> Self {
        GenerationParams {
            top_k: Self::default_top_k(),
            max_tokens: Self::default_max_tokens(),
            n_sequences: Self::default_n(),
            seed: 0,
        }
    }
}

impl GenerationParams {
    fn default_top_k() -> usize {
        40
    }

    fn default_max_tokens() -> usize {
        256
    }

    fn default_n() -> usize {
        1
    }

    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 {
            return Err(LabError::config("top_k must be >= 1"));
        }
        if self.max_tokens == 0 {
            return Err(LabError::config("max_tokens must be >= 1"));
        }
        Ok(())
    }
}

/// Generates sequence number `index` of a sampling run; the continuation is
/// returned without the prompt.
///
/// The RNG stream depends only on `(params.seed, index)`.
pub fn sample_one<M: LanguageModel + ?Sized>(
    model: &M,
    prompt: &[Token],
    params: &GenerationParams,
    index: u64,
) -> Result<Vec<Token>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(params.seed, streams::SAMPLE, index));
    let eos = model.end_of_sequence();
    let mut context: Vec<Token> = prompt.to_vec();
    let mut generated = Vec::new();
    for _ in 0..params.max_tokens {
        let dist = model.next_token_distribution(&context)?;
        let top = dist.top_k(params.top_k);
        let total: f64 = top.iter().map(|(_, p)| p).sum();
        let id = if total > 0.0 {
            let u = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = top[top.len() - 1].0;
            for &(id, p) in &top {
                acc += p;
                if u < acc {
                    pick = id;
                    break;
                }
            }
            pick
        } else {
            top[0].0
        };
        let token = dist.vocab().token(id).to_string();
        if eos.as_deref() == Some(token.as_str()) {
            break;
        }
        context.push(token.clone());
        generated.push(token);
    }
    Ok(generated)
}

/// Draws `params.n_sequences` continuations of `prompt` by top-k sampling.
pub fn sample<M: LanguageModel + ?Sized>(
    model: &M,
    prompt: &[Token],
    params: &GenerationParams,
) -> Result<Vec<Vec<Token>>> {
    params.validate()?;
    (0..params.n_sequences as u64)
        .into_par_iter()
        .map(|i| sample_one(model, prompt, params, i))
        .collect()
}

/// Deterministic top-1 decoding of up to `max_tokens` tokens.
pub fn greedy<M: LanguageModel + ?Sized>(model: &M, prompt: &[Token], max_tokens: usize) -> Result<Vec<Token>> {
    let params = GenerationParams {
        top_k: 1,
        max_tokens,
        n_sequences: 1,
        seed: 0,
    };
    params.validate()?;
    sample_one(model, prompt, &params, 0)
}
