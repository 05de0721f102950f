//! Documents, corpora and their on-disk formats.

mod synthetic;
mod tokenize;

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

pub use synthetic::{
    generate_corpus, DuplicationLaw, GeneratedCorpus, SplitUnit, SyntheticSpec,
};
pub use tokenize::{detokenize, detokenize_with_offsets, is_placeholder, tokenize};

/// A vocabulary element. Non-empty and free of whitespace.
pub type Token = String;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| LabError::config(format!("unknown split {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub tokens: Vec<Token>,
    pub split: Split,
}

impl Document {
    pub fn new(id: impl Into<String>, tokens: Vec<Token>, split: Split) -> Self {
        Document {
            id: id.into(),
            tokens,
            split,
        }
    }

    pub fn text(&self) -> String {
        detokenize(&self.tokens)
    }
}

/// Fractions of documents assigned to train / validation / test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatio {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitRatio {
    /// Equally large train and validation sets and a smaller test set.
    fn default() -> Self {
        SplitRatio {
            train: 0.45,
            validation: 0.45,
            test: 0.10,
        }
    }
}

impl SplitRatio {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.validation, self.test];
        if parts.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(LabError::config("split ratios must be finite and non-negative"));
        }
        let total: f64 = parts.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(LabError::config(format!(
                "split ratios must sum to 1, got {total}"
            )));
        }
        Ok(())
    }

    fn get(&self, split: Split) -> f64 {
        match split {
            Split::Train => self.train,
            Split::Validation => self.validation,
            Split::Test => self.test,
        }
    }

    /// Integer split sizes for `n` documents by largest remainder; ties between
    /// equal remainders are broken by `rng`.
    pub(crate) fn counts(&self, n: usize, rng: &mut ChaCha8Rng) -> [usize; 3] {
        let quotas: Vec<f64> = Split::ALL.iter().map(|s| self.get(*s) * n as f64).collect();
        let mut counts: [usize; 3] = [0; 3];
        for (c, q) in counts.iter_mut().zip(&quotas) {
            *c = q.floor() as usize;
        }
        let mut order = [0usize, 1, 2];
        order.shuffle(rng);
        order.sort_by(|&a, &b| {
            let fa = quotas[a] - quotas[a].floor();
            let fb = quotas[b] - quotas[b].floor();
            fb.total_cmp(&fa)
        });
        let mut remaining = n - counts.iter().sum::<usize>();
        for i in order.iter().cycle() {
            if remaining == 0 {
                break;
            }
            counts[*i] += 1;
            remaining -= 1;
        }
        counts
    }
}

/// An immutable collection of documents with a derived vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    documents: Vec<Document>,
    vocab: BTreeSet<Token>,
}

impl Corpus {
    pub fn new(documents: Vec<Document>) -> Result<Self> {
        let mut ids = HashSet::with_capacity(documents.len());
        let mut vocab = BTreeSet::new();
        for doc in &documents {
            if doc.tokens.is_empty() {
                return Err(LabError::invalid(format!("document {} has no tokens", doc.id)));
            }
            if !ids.insert(doc.id.as_str()) {
                return Err(LabError::invalid(format!("duplicate document id {}", doc.id)));
            }
            vocab.extend(doc.tokens.iter().cloned());
        }
        Ok(Corpus { documents, vocab })
    }

    pub fn documents(&self) -> &[Document] {
        &self.documents
    }

    pub fn vocab(&self) -> &BTreeSet<Token> {
        &self.vocab
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Document> + '_ {
        self.documents.iter().filter(move |d| d.split == split)
    }

    pub fn split_len(&self, split: Split) -> usize {
        self.split(split).count()
    }

    pub fn get(&self, id: &str) -> Option<&Document> {
        self.documents.iter().find(|d| d.id == id)
    }

    /// Serializes as JSON-lines `{"id", "split", "text"}`.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for doc in &self.documents {
            let rec = CorpusRecord {
                id: Some(doc.id.clone()),
                split: Some(doc.split),
                text: doc.text(),
            };
            out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusFormat {
    /// One record per line.
    Text,
    /// JSON-lines with a `text` field and optional `id` / `split`.
    Jsonl,
}

impl FromStr for CorpusFormat {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" | "txt" => Ok(CorpusFormat::Text),
            "jsonl" | "json" => Ok(CorpusFormat::Jsonl),
            other => Err(LabError::config(format!("unknown corpus format {other:?}"))),
        }
    }
}

impl CorpusFormat {
    pub fn from_path(path: &Path) -> CorpusFormat {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("json") => CorpusFormat::Jsonl,
            _ => CorpusFormat::Text,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CorpusRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split: Option<Split>,
    text: String,
}

#[derive(Debug, Clone)]
pub struct LoadOptions {
    pub ratio: SplitRatio,
    pub seed: u64,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            ratio: SplitRatio::default(),
            seed: 0,
        }
    }
}

/// Loads a corpus, one document per non-blank record.
///
/// Records carrying an explicit `split` keep it; the rest are assigned by a
/// seeded shuffle following `opts.ratio`.
pub fn load_corpus(path: &Path, format: CorpusFormat, opts: &LoadOptions) -> Result<Corpus> {
    let raw = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
    parse_corpus(&raw, path, format, opts)
}

pub(crate) fn parse_corpus(
    raw: &str,
    path: &Path,
    format: CorpusFormat,
    opts: &LoadOptions,
) -> Result<Corpus> {
    opts.ratio.validate()?;
    let mut records = Vec::new();
    for (i, line) in raw.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec = match format {
            CorpusFormat::Text => CorpusRecord {
                id: None,
                split: None,
                text: line.to_string(),
            },
            CorpusFormat::Jsonl => {
                serde_json::from_str::<CorpusRecord>(line).map_err(|e| LabError::MalformedRecord {
                    path: path.to_path_buf(),
                    line: line_no,
                    message: e.to_string(),
                })?
            }
        };
        let tokens = tokenize(&rec.text);
        if tokens.is_empty() {
            return Err(LabError::MalformedRecord {
                path: path.to_path_buf(),
                line: line_no,
                message: "record has no tokens".into(),
            });
        }
        let id = rec.id.unwrap_or_else(|| format!("line-{line_no:06}"));
        records.push((id, tokens, rec.split));
    }
    if records.is_empty() {
        return Err(LabError::invalid(format!(
            "{}: corpus file has no records",
            path.display()
        )));
    }

    let unassigned: Vec<usize> = (0..records.len())
        .filter(|&i| records[i].2.is_none())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let counts = opts.ratio.counts(unassigned.len(), &mut rng);
    let mut order = unassigned;
    order.shuffle(&mut rng);
    let mut assigned = vec![None; records.len()];
    let mut cursor = order.into_iter();
    for (split, count) in Split::ALL.iter().zip(counts) {
        for idx in cursor.by_ref().take(count) {
            assigned[idx] = Some(*split);
        }
    }

    let documents = records
        .into_iter()
        .zip(assigned)
        .map(|((id, tokens, split), fallback)| {
            Document::new(id, tokens, split.or(fallback).expect("every record assigned"))
        })
        .collect();
    Corpus::new(documents)
}
