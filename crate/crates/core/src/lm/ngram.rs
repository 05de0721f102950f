//! Add-λ smoothed n-gram reference model.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{LanguageModel, ProbDistribution, Vocabulary};
use crate::corpus::{Corpus, Split, Token};
use crate::error::{LabError, Result};

pub const BOS_TOKEN: &str = "<s>";
pub const EOS_TOKEN: &str = "</s>";
pub const UNK_TOKEN: &str = "<unk>";

/// Context-only padding id; never predicted, so not part of the vocabulary.
const BOS: u32 = u32::MAX;

const FORMAT: &str = "pii-lab/ngram";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq)]
struct ContextCounts {
    total: u64,
    next: HashMap<u32, u64>,
}

/// `Pr(w | ctx) = (count(ctx, w) + λ) / (count(ctx) + λ|V|)` over the last
/// `order - 1` tokens, left-padded with `<s>`.
#[derive(Debug, Clone, PartialEq)]
pub struct NGramModel {
    order: usize,
    lambda: f64,
    vocab: Arc<Vocabulary>,
    counts: HashMap<Vec<u32>, ContextCounts>,
}

fn check_params(order: usize, lambda: f64) -> Result<()> {
    if order == 0 {
        return Err(LabError::config("n-gram order must be >= 1"));
    }
    if !(lambda.is_finite() && lambda > 0.0) {
        return Err(LabError::config("smoothing lambda must be a positive real"));
    }
    Ok(())
}

fn build_vocab<I>(tokens: I) -> Result<Vocabulary>
where
    I: IntoIterator<Item = Token>,
{
    let mut rest: Vec<Token> = tokens
        .into_iter()
        .filter(|t| t != EOS_TOKEN && t != UNK_TOKEN && t != BOS_TOKEN)
        .collect();
    rest.sort();
    rest.dedup();
    let mut all = vec![EOS_TOKEN.to_string(), UNK_TOKEN.to_string()];
    all.extend(rest);
    Vocabulary::new(all, Some(EOS_TOKEN), Some(UNK_TOKEN))
}

impl NGramModel {
    /// A model with all counts zero: uniform over its vocabulary.
    pub fn untrained<I>(vocab_tokens: I, order: usize, lambda: f64) -> Result<Self>
    where
        I: IntoIterator<Item = Token>,
    {
        check_params(order, lambda)?;
        Ok(NGramModel {
            order,
            lambda,
            vocab: Arc::new(build_vocab(vocab_tokens)?),
            counts: HashMap::new(),
        })
    }

    /// Counts every n-gram of the given documents, each padded with
    /// `order - 1` begin markers and one end marker. The vocabulary is the
    /// documents' tokens plus `extra_vocab`.
    pub fn fit<'a, D, I>(documents: D, extra_vocab: I, order: usize, lambda: f64) -> Result<Self>
    where
        D: IntoIterator<Item = &'a [Token]>,
        I: IntoIterator<Item = Token>,
    {
        let docs: Vec<&[Token]> = documents.into_iter().collect();
        let mut model = NGramModel::untrained(
            docs.iter()
                .flat_map(|d| d.iter().cloned())
                .chain(extra_vocab),
            order,
            lambda,
        )?;
        let eos = model.vocab.eos().expect("n-gram vocabulary has EOS");
        for doc in docs {
            let mut ids = vec![BOS; order - 1];
            ids.extend(doc.iter().map(|t| model.vocab.lookup(t).expect("UNK present")));
            ids.push(eos);
            for i in (order - 1)..ids.len() {
                let ctx = ids[i + 1 - order..i].to_vec();
                let entry = model.counts.entry(ctx).or_default();
                entry.total += 1;
                *entry.next.entry(ids[i]).or_insert(0) += 1;
            }
        }
        Ok(model)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn vocab(&self) -> &Arc<Vocabulary> {
        &self.vocab
    }

    /// Raw count of `next` after `context` (given as tokens; `<s>` allowed).
    pub fn count(&self, context: &[&str], next: &str) -> u64 {
        let Some(ctx) = self.context_from_strs(context) else {
            return 0;
        };
        let Some(id) = self.vocab.id(next) else {
            return 0;
        };
        self.counts
            .get(&ctx)
            .and_then(|c| c.next.get(&id))
            .copied()
            .unwrap_or(0)
    }

    fn context_from_strs(&self, context: &[&str]) -> Option<Vec<u32>> {
        context
            .iter()
            .map(|t| if *t == BOS_TOKEN { Some(BOS) } else { self.vocab.id(t) })
            .collect()
    }

    fn context_ids(&self, prefix: &[Token]) -> Vec<u32> {
        let need = self.order - 1;
        let tail = &prefix[prefix.len().saturating_sub(need)..];
        let mut ctx = vec![BOS; need - tail.len()];
        ctx.extend(tail.iter().map(|t| self.vocab.lookup(t).expect("UNK present")));
        ctx
    }

    #[inline]
    fn prob_of(&self, counts: Option<&ContextCounts>, id: u32) -> f64 {
        let v = self.vocab.len() as f64;
        let (total, c) = match counts {
            Some(cc) => (cc.total, cc.next.get(&id).copied().unwrap_or(0)),
            None => (0, 0),
        };
        (c as f64 + self.lambda) / (total as f64 + self.lambda * v)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        Self::from_json(&raw)
    }

    /// Stable JSON container: contexts and successors sorted by token text.
    pub fn to_json(&self) -> Result<String> {
        let name = |id: u32| -> String {
            if id == BOS {
                BOS_TOKEN.to_string()
            } else {
                self.vocab.token(id).to_string()
            }
        };
        let mut contexts: Vec<ContextRecord> = self
            .counts
            .iter()
            .map(|(ctx, cc)| ContextRecord {
                context: ctx.iter().map(|&i| name(i)).collect(),
                total: cc.total,
                next: cc
                    .next
                    .iter()
                    .map(|(&id, &c)| (name(id), c))
                    .collect::<BTreeMap<_, _>>(),
            })
            .collect();
        contexts.sort_by(|a, b| a.context.cmp(&b.context));
        let file = ModelFile {
            format: FORMAT.to_string(),
            version: FORMAT_VERSION,
            tool_version: crate::TOOL_VERSION.to_string(),
            order: self.order,
            lambda: self.lambda,
            vocab: self.vocab.tokens().to_vec(),
            contexts,
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(raw: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(raw)?;
        if file.format != FORMAT || file.version != FORMAT_VERSION {
            return Err(LabError::config(format!(
                "unsupported model file {} v{}",
                file.format, file.version
            )));
        }
        check_params(file.order, file.lambda)?;
        let vocab = Vocabulary::new(file.vocab, Some(EOS_TOKEN), Some(UNK_TOKEN))?;
        let id = |t: &str| -> Result<u32> {
            if t == BOS_TOKEN {
                Ok(BOS)
            } else {
                vocab
                    .id(t)
                    .ok_or_else(|| LabError::config(format!("model file token {t:?} not in vocabulary")))
            }
        };
        let mut counts = HashMap::with_capacity(file.contexts.len());
        for rec in file.contexts {
            if rec.context.len() != file.order - 1 {
                return Err(LabError::config("model file context has the wrong length"));
            }
            let ctx = rec.context.iter().map(|t| id(t)).collect::<Result<Vec<_>>>()?;
            let mut next = HashMap::with_capacity(rec.next.len());
            for (t, c) in rec.next {
                next.insert(id(&t)?, c);
            }
            if next.values().sum::<u64>() != rec.total {
                return Err(LabError::config("model file context total does not match its counts"));
            }
            counts.insert(ctx, ContextCounts { total: rec.total, next });
        }
        Ok(NGramModel {
            order: file.order,
            lambda: file.lambda,
            vocab: Arc::new(vocab),
            counts,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    tool_version: String,
    order: usize,
    lambda: f64,
    vocab: Vec<Token>,
    contexts: Vec<ContextRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ContextRecord {
    context: Vec<Token>,
    total: u64,
    next: BTreeMap<Token, u64>,
}

impl LanguageModel for NGramModel {
    fn model_id(&self) -> String {
        format!("ngram(n={}, lambda={}, |V|={})", self.order, self.lambda, self.vocab.len())
    }

    fn next_token_distribution(&self, prefix: &[Token]) -> Result<ProbDistribution> {
        let counts = self.counts.get(&self.context_ids(prefix));
        let probs = (0..self.vocab.len() as u32)
            .map(|id| self.prob_of(counts, id))
            .collect();
        ProbDistribution::new(self.vocab.clone(), probs)
    }

    /// Same arithmetic as the corresponding distribution entry, without
    /// materialising the vector.
    fn token_logprob(&self, prefix: &[Token], token: &str) -> Result<f64> {
        let counts = self.counts.get(&self.context_ids(prefix));
        let id = self.vocab.lookup(token).expect("UNK present");
        Ok(self.prob_of(counts, id).ln())
    }

    fn end_of_sequence(&self) -> Option<String> {
        Some(EOS_TOKEN.to_string())
    }
}

/// Trains on the train split of `corpus`.
pub fn train_ngram(corpus: &Corpus, order: usize, lambda: f64) -> Result<NGramModel> {
    let docs: Vec<&[Token]> = corpus.split(Split::Train).map(|d| d.tokens.as_slice()).collect();
    if docs.is_empty() {
        return Err(LabError::invalid("train split is empty"));
    }
    NGramModel::fit(docs, std::iter::empty(), order, lambda)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{tokenize, Document};
    use crate::lm::{perplexity, score};

    fn corpus(texts: &[&str]) -> Corpus {
        Corpus::new(
            texts
                .iter()
                .enumerate()
                .map(|(i, t)| Document::new(format!("d{i}"), tokenize(t), Split::Train))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn bigram_hand_count() {
        let m = train_ngram(&corpus(&["a b"]), 2, 0.1).unwrap();
        assert_eq!(m.count(&["a"], "b"), 1);
        assert_eq!(m.count(&[BOS_TOKEN], "a"), 1);
        assert_eq!(m.count(&["b"], EOS_TOKEN), 1);
        assert_eq!(m.count(&["b"], "a"), 0);
    }

    #[test]
    fn untrained_is_uniform() {
        let m = NGramModel::untrained(["x", "y", "z"].map(String::from), 3, 0.1).unwrap();
        let d = m.next_token_distribution(&[]).unwrap();
        let v = m.vocab().len() as f64;
        assert_eq!(v, 5.0);
        for p in d.probs() {
            assert!((p - 1.0 / v).abs() < 1e-15);
        }
    }

    #[test]
    fn trigram_on_repeated_abc() {
        let texts = vec!["a b c"; 20];
        let m = train_ngram(&corpus(&texts), 3, 0.1).unwrap();
        let d = m.next_token_distribution(&tokenize("a b")).unwrap();
        // (20 + 0.1) / (20 + 0.1 * 5)
        assert!((d.prob("c") - 20.1 / 20.5).abs() < 1e-12);
        assert!(d.prob("c") > 0.9);
    }

    #[test]
    fn fast_logprob_matches_distribution_bits() {
        let m = train_ngram(&corpus(&["the cat sat", "the dog sat down", "a cat ran"]), 3, 0.1).unwrap();
        for prefix in [vec![], tokenize("the"), tokenize("the cat"), tokenize("zebra cat")] {
            let d = m.next_token_distribution(&prefix).unwrap();
            for t in ["cat", "sat", "</s>", "unseen"] {
                assert_eq!(m.token_logprob(&prefix, t).unwrap(), d.prob(t).ln());
            }
        }
    }

    #[test]
    fn training_is_deterministic_and_needs_train_docs() {
        let c = corpus(&["x y z", "y z x"]);
        assert_eq!(train_ngram(&c, 3, 0.1).unwrap(), train_ngram(&c, 3, 0.1).unwrap());
        let val = Corpus::new(vec![Document::new("v", tokenize("x"), Split::Validation)]).unwrap();
        assert!(train_ngram(&val, 3, 0.1).is_err());
        assert!(train_ngram(&c, 0, 0.1).is_err());
        assert!(train_ngram(&c, 3, 0.0).is_err());
    }

    #[test]
    fn unigram_trains() {
        let m = train_ngram(&corpus(&["x y", "x"]), 1, 0.1).unwrap();
        assert_eq!(m.count(&[], "x"), 2);
        assert!(perplexity(&m, &tokenize("x y")).unwrap() > 1.0);
    }

    #[test]
    fn json_round_trip_preserves_distributions() {
        let m = train_ngram(&corpus(&["In May 2022 , Jane had chemotherapy at LHS ."]), 3, 0.1).unwrap();
        let again = NGramModel::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(m, again);
        assert_eq!(m.to_json().unwrap(), again.to_json().unwrap());
        let s = tokenize("Jane had chemotherapy");
        assert_eq!(score(&m, &s).unwrap(), score(&again, &s).unwrap());
    }

    #[test]
    fn corrupt_model_file_is_rejected() {
        assert!(NGramModel::from_json("{}").is_err());
        let m = train_ngram(&corpus(&["a b"]), 2, 0.1).unwrap();
        let tampered = m.to_json().unwrap().replace("\"total\":1", "\"total\":7");
        assert!(NGramModel::from_json(&tampered).is_err());
    }
}
