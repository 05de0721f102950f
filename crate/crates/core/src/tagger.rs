//! PII recognition: a deterministic dictionary/regex tagger and a client for
//! a remote NER endpoint.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use unicode_normalization::UnicodeNormalization;

use crate::corpus::{detokenize, detokenize_with_offsets, tokenize, Corpus, Document, Split, Token};
use crate::error::{LabError, Result};
use crate::remote::RemoteTagger;

macro_rules! pii_classes {
    ($($variant:ident => $name:literal),+ $(,)?) => {
        /// The 21 tagged entity classes.
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(rename_all = "snake_case")]
        pub enum PiiClass {
            $($variant),+
        }

        impl PiiClass {
            pub const ALL: [PiiClass; 21] = [$(PiiClass::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $(PiiClass::$variant => $name),+
                }
            }
        }

        impl FromStr for PiiClass {
            type Err = LabError;

            fn from_str(s: &str) -> Result<Self> {
                match s.to_ascii_lowercase().as_str() {
                    $($name => Ok(PiiClass::$variant),)+
                    other => Err(LabError::config(format!("unknown PII class {other:?}"))),
                }
            }
        }
    };
}

pii_classes! {
    Cardinal => "cardinal",
    Ordinal => "ordinal",
    Date => "date",
    Event => "event",
    Fac => "fac",
    Gpe => "gpe",
    Language => "language",
    Law => "law",
    Money => "money",
    Norp => "norp",
    Person => "person",
    Loc => "loc",
    Org => "org",
    Percent => "percent",
    Product => "product",
    Quantity => "quantity",
    Time => "time",
    WorkOfArt => "work_of_art",
    PhoneNumber => "phone_number",
    EmailAddress => "email_address",
    Url => "url",
}

impl PiiClass {
    /// Entity-tag placeholder, e.g. `[PERSON]`.
    pub fn tag(self) -> String {
        format!("[{}]", self.as_str().to_ascii_uppercase())
    }
}

impl fmt::Display for PiiClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A tagged PII occurrence covering `tokens[start..end]` of a document.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PiiSpan {
    pub class: PiiClass,
    pub surface: String,
    pub start: usize,
    pub end: usize,
    pub doc_id: String,
}

impl PiiSpan {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }

    /// Checks the span against the tokens of the document it claims to index.
    pub fn validate_against(&self, tokens: &[Token]) -> Result<()> {
        if !(self.start < self.end && self.end <= tokens.len()) {
            return Err(LabError::invalid(format!(
                "span {}..{} out of bounds for document {} of length {}",
                self.start,
                self.end,
                self.doc_id,
                tokens.len()
            )));
        }
        Ok(())
    }
}

/// NFC, trimmed, internal whitespace collapsed; lower-cased when requested.
pub fn normalize_surface(s: &str, case_insensitive: bool) -> String {
    let nfc: String = s.nfc().collect();
    let joined = nfc.split_whitespace().collect::<Vec<_>>().join(" ");
    if case_insensitive {
        joined.to_lowercase()
    } else {
        joined
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaggerMode {
    #[default]
    Dictionary,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaggerConfig {
    #[serde(default)]
    pub mode: TaggerMode,
    #[serde(default)]
    pub dictionaries: BTreeMap<PiiClass, BTreeSet<String>>,
    #[serde(default)]
    pub regex_rules: BTreeMap<PiiClass, Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    #[serde(default)]
    pub case_insensitive: bool,
    /// Per-class probability of keeping a detected span, to model an
    /// imperfect NER. Classes not listed keep every span.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub recall: BTreeMap<PiiClass, f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "TaggerConfig::default_in_flight")]
    pub max_in_flight: usize,
}

impl Default for TaggerConfig {
    fn default() -> Self {
        TaggerConfig {
            mode: TaggerMode::Dictionary,
            dictionaries: BTreeMap::new(),
            regex_rules: BTreeMap::new(),
            endpoint: None,
            case_insensitive: false,
            recall: BTreeMap::new(),
            seed: 0,
            max_in_flight: Self::default_in_flight(),
        }
    }
}

impl TaggerConfig {
    fn default_in_flight() -> usize {
        8
    }

    /// Patterns for e-mail addresses, URLs and phone numbers.
    pub fn default_regex_rules() -> BTreeMap<PiiClass, Vec<String>> {
        let mut rules = BTreeMap::new();
        rules.insert(
            PiiClass::EmailAddress,
            vec![r"[A-Za-z0-9._%+-]+@[A-Za-z0-9-]+(?:\.[A-Za-z0-9-]+)*\.[A-Za-z]{2,}".into()],
        );
        rules.insert(
            PiiClass::Url,
            vec![
                r"(?:https?://)?(?:www\.)?[A-Za-z0-9-]+(?:\.[A-Za-z0-9-]+)*\.(?:com|org|net|edu|gov|io|eu)(?:/[^\s]*)?"
                    .into(),
            ],
        );
        rules.insert(
            PiiClass::PhoneNumber,
            vec![r"\+?(?:\d{1,3}[-. ])?\(?\d{3}\)?[-. ]?\d{3}[-. ]\d{4}".into()],
        );
        rules
    }

    /// Dictionary tagger over the given surfaces plus the default regex rules.
    pub fn from_pool<'a, I, S>(pool: I) -> TaggerConfig
    where
        I: IntoIterator<Item = (PiiClass, &'a [S])>,
        S: AsRef<str> + 'a,
    {
        let mut dictionaries: BTreeMap<PiiClass, BTreeSet<String>> = BTreeMap::new();
        for (class, surfaces) in pool {
            dictionaries
                .entry(class)
                .or_default()
                .extend(surfaces.iter().map(|s| s.as_ref().to_string()));
        }
        TaggerConfig {
            dictionaries,
            regex_rules: Self::default_regex_rules(),
            ..TaggerConfig::default()
        }
    }

    /// Dictionary tagger built from ground-truth spans.
    pub fn from_spans<'a>(spans: impl IntoIterator<Item = &'a PiiSpan>) -> TaggerConfig {
        let mut dictionaries: BTreeMap<PiiClass, BTreeSet<String>> = BTreeMap::new();
        for s in spans {
            dictionaries.entry(s.class).or_default().insert(s.surface.clone());
        }
        TaggerConfig {
            dictionaries,
            regex_rules: Self::default_regex_rules(),
            ..TaggerConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.mode {
            TaggerMode::Dictionary => {
                let empty = self.dictionaries.values().all(|d| d.is_empty())
                    && self.regex_rules.values().all(|r| r.is_empty());
                if empty {
                    return Err(LabError::config(
                        "dictionary tagger needs at least one dictionary entry or regex rule",
                    ));
                }
            }
            TaggerMode::Remote => {
                if self.endpoint.as_deref().is_none_or(str::is_empty) {
                    return Err(LabError::config("remote tagger needs an endpoint"));
                }
            }
        }
        for (class, r) in &self.recall {
            if !(0.0..=1.0).contains(r) {
                return Err(LabError::config(format!("recall for {class} must be in [0, 1]")));
            }
        }
        if self.max_in_flight == 0 {
            return Err(LabError::config("max_in_flight must be >= 1"));
        }
        Ok(())
    }
}

/// A candidate match before overlap resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Candidate {
    pub start: usize,
    pub end: usize,
    pub class: PiiClass,
}

/// Longest match first, then leftmost; the result never overlaps and is
/// sorted by start.
pub(crate) fn resolve_overlaps(mut candidates: Vec<Candidate>, n_tokens: usize) -> Vec<Candidate> {
    candidates.sort_by(|a, b| {
        (b.end - b.start)
            .cmp(&(a.end - a.start))
            .then(a.start.cmp(&b.start))
            .then(a.class.cmp(&b.class))
    });
    let mut taken = vec![false; n_tokens];
    let mut out = Vec::new();
    for c in candidates {
        if c.start >= c.end || c.end > n_tokens || taken[c.start..c.end].iter().any(|t| *t) {
            continue;
        }
        taken[c.start..c.end].iter_mut().for_each(|t| *t = true);
        out.push(c);
    }
    out.sort_by_key(|c| (c.start, c.end));
    out
}

/// Maps a character range of the detokenized text onto the covering tokens.
pub(crate) fn char_range_to_tokens(
    offsets: &[std::ops::Range<usize>],
    start_char: usize,
    end_char: usize,
) -> Option<(usize, usize)> {
    let first = offsets.iter().position(|r| r.end > start_char)?;
    let last = offsets.iter().rposition(|r| r.start < end_char)?;
    (first <= last).then_some((first, last + 1))
}

#[derive(Debug)]
struct DictionaryTagger {
    /// First (normalized) token → entries starting with it.
    entries: HashMap<String, Vec<(Vec<String>, PiiClass)>>,
    rules: Vec<(PiiClass, Regex)>,
}

impl DictionaryTagger {
    fn new(cfg: &TaggerConfig) -> Result<Self> {
        let mut entries: HashMap<String, Vec<(Vec<String>, PiiClass)>> = HashMap::new();
        for (class, surfaces) in &cfg.dictionaries {
            for s in surfaces {
                let toks: Vec<String> = tokenize(s)
                    .into_iter()
                    .map(|t| fold(&t, cfg.case_insensitive))
                    .collect();
                if toks.is_empty() {
                    continue;
                }
                entries.entry(toks[0].clone()).or_default().push((toks, *class));
            }
        }
        for list in entries.values_mut() {
            list.sort();
            list.dedup();
        }
        let mut rules = Vec::new();
        for (class, patterns) in &cfg.regex_rules {
            for p in patterns {
                let re = Regex::new(p)
                    .map_err(|e| LabError::config(format!("bad regex for {class}: {e}")))?;
                rules.push((*class, re));
            }
        }
        Ok(DictionaryTagger { entries, rules })
    }

    fn candidates(&self, tokens: &[Token], case_insensitive: bool) -> Vec<Candidate> {
        let folded: Vec<String> = tokens.iter().map(|t| fold(t, case_insensitive)).collect();
        let mut out = Vec::new();
        for i in 0..folded.len() {
            if let Some(list) = self.entries.get(&folded[i]) {
                for (entry, class) in list {
                    let end = i + entry.len();
                    if end <= folded.len() && folded[i..end] == entry[..] {
                        out.push(Candidate {
                            start: i,
                            end,
                            class: *class,
                        });
                    }
                }
            }
        }
        if !self.rules.is_empty() {
            let (text, offsets) = detokenize_with_offsets(tokens);
            // Byte offset → char offset for regex matches.
            let char_at: Vec<usize> = {
                let mut v = vec![0; text.len() + 1];
                let mut c = 0;
                for (b, ch) in text.char_indices() {
                    v[b] = c;
                    c += 1;
                    for k in 1..ch.len_utf8() {
                        v[b + k] = c;
                    }
                }
                v[text.len()] = c;
                v
            };
            for (class, re) in &self.rules {
                for m in re.find_iter(&text) {
                    let (cs, ce) = (char_at[m.start()], char_at[m.end()]);
                    let start = offsets.iter().position(|r| r.start == cs);
                    let end = offsets.iter().position(|r| r.end == ce);
                    if let (Some(s), Some(e)) = (start, end) {
                        if s <= e {
                            out.push(Candidate {
                                start: s,
                                end: e + 1,
                                class: *class,
                            });
                        }
                    }
                }
            }
        }
        out
    }
}

fn fold(token: &str, case_insensitive: bool) -> String {
    if case_insensitive {
        token.to_lowercase()
    } else {
        token.to_string()
    }
}

#[derive(Debug)]
enum Backend {
    Dictionary(DictionaryTagger),
    Remote(RemoteTagger),
}

/// A configured, ready-to-use tagger. Safe to share across threads.
#[derive(Debug)]
pub struct Tagger {
    cfg: TaggerConfig,
    backend: Backend,
}

impl Tagger {
    pub fn new(cfg: TaggerConfig) -> Result<Self> {
        cfg.validate()?;
        let backend = match cfg.mode {
            TaggerMode::Dictionary => Backend::Dictionary(DictionaryTagger::new(&cfg)?),
            TaggerMode::Remote => Backend::Remote(RemoteTagger::new(
                cfg.endpoint.as_deref().expect("validated"),
                cfg.max_in_flight,
            )),
        };
        Ok(Tagger { cfg, backend })
    }

    pub fn config(&self) -> &TaggerConfig {
        &self.cfg
    }

    pub fn case_insensitive(&self) -> bool {
        self.cfg.case_insensitive
    }

    /// All non-overlapping PII spans of `doc`, sorted by start.
    pub fn extract(&self, doc: &Document, class_filter: Option<PiiClass>) -> Result<Vec<PiiSpan>> {
        self.extract_tokens(&doc.id, &doc.tokens, class_filter)
    }

    pub fn extract_tokens(
        &self,
        doc_id: &str,
        tokens: &[Token],
        class_filter: Option<PiiClass>,
    ) -> Result<Vec<PiiSpan>> {
        if tokens.is_empty() {
            return Ok(Vec::new());
        }
        let mut candidates = match &self.backend {
            Backend::Dictionary(d) => d.candidates(tokens, self.cfg.case_insensitive),
            Backend::Remote(r) => r.candidates(tokens)?,
        };
        if let Some(class) = class_filter {
            candidates.retain(|c| c.class == class);
        }
        let resolved = resolve_overlaps(candidates, tokens.len());
        Ok(resolved
            .into_iter()
            .filter(|c| self.keep(doc_id, c))
            .map(|c| PiiSpan {
                class: c.class,
                surface: normalize_surface(&detokenize(&tokens[c.start..c.end]), false),
                start: c.start,
                end: c.end,
                doc_id: doc_id.to_string(),
            })
            .collect())
    }

    fn keep(&self, doc_id: &str, c: &Candidate) -> bool {
        let Some(&recall) = self.cfg.recall.get(&c.class) else {
            return true;
        };
        let mut h = Sha256::new();
        h.update(self.cfg.seed.to_le_bytes());
        h.update(doc_id.as_bytes());
        h.update((c.start as u64).to_le_bytes());
        h.update((c.end as u64).to_le_bytes());
        let d = h.finalize();
        let mut b = [0u8; 8];
        b.copy_from_slice(&d[..8]);
        let u = (u64::from_le_bytes(b) >> 11) as f64 / (1u64 << 53) as f64;
        u < recall
    }

    /// Key under which two surfaces count as the same PII.
    pub fn pii_key(&self, surface: &str) -> String {
        normalize_surface(surface, self.cfg.case_insensitive)
    }

    /// Unique normalized PII surfaces across the train split.
    pub fn unique_pii(&self, corpus: &Corpus, class_filter: Option<PiiClass>) -> Result<BTreeSet<String>> {
        let mut out = BTreeSet::new();
        for doc in corpus.split(Split::Train) {
            for span in self.extract(doc, class_filter)? {
                out.insert(self.pii_key(&span.surface));
            }
        }
        Ok(out)
    }
}
