//! PII scrubbing and the masked contexts handed to reconstruction and
//! inference adversaries.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{detokenize, Corpus, Document, Split, Token};
use crate::error::{LabError, Result};
use crate::tagger::{PiiClass, PiiSpan, Tagger};

pub const MASK_TOKEN: &str = "[MASK]";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Every span becomes `[MASK]`.
    FullMask,
    /// Every span becomes its class tag, e.g. `[PERSON]`.
    EntityTag,
    /// Every span becomes a salted-hash pseudonym `PII_<32 hex digits>`.
    #[serde(alias = "pseudonym")]
    PseudonymHash,
}

impl FromStr for MaskMode {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full_mask" => Ok(MaskMode::FullMask),
            "entity_tag" => Ok(MaskMode::EntityTag),
            "pseudonym" | "pseudonym_hash" => Ok(MaskMode::PseudonymHash),
            other => Err(LabError::config(format!(
                "unknown mask style {other:?} (expected full_mask, entity_tag or pseudonym)"
            ))),
        }
    }
}

impl fmt::Display for MaskMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskMode::FullMask => "full_mask",
            MaskMode::EntityTag => "entity_tag",
            MaskMode::PseudonymHash => "pseudonym",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskStyle {
    pub mode: MaskMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub salt: Option<String>,
}

impl MaskStyle {
    pub fn full_mask() -> Self {
        MaskStyle {
            mode: MaskMode::FullMask,
            salt: None,
        }
    }

    pub fn entity_tag() -> Self {
        MaskStyle {
            mode: MaskMode::EntityTag,
            salt: None,
        }
    }

    pub fn pseudonym(salt: impl Into<String>) -> Self {
        MaskStyle {
            mode: MaskMode::PseudonymHash,
            salt: Some(salt.into()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mode == MaskMode::PseudonymHash && self.salt.as_deref().is_none_or(str::is_empty) {
            return Err(LabError::config("pseudonym masking requires a non-empty salt"));
        }
        Ok(())
    }

    /// The placeholder token replacing `span`; `key` is the normalized surface.
    fn placeholder(&self, class: PiiClass, key: &str) -> Token {
        match self.mode {
            MaskMode::FullMask => MASK_TOKEN.to_string(),
            MaskMode::EntityTag => class.tag(),
            MaskMode::PseudonymHash => pseudonym(self.salt.as_deref().unwrap_or(""), key),
        }
    }
}

/// `PII_` followed by the first 128 bits of SHA-256(len(salt) ‖ salt ‖ surface).
pub fn pseudonym(salt: &str, surface: &str) -> Token {
    let mut h = Sha256::new();
    h.update((salt.len() as u64).to_le_bytes());
    h.update(salt.as_bytes());
    h.update(surface.as_bytes());
    format!("PII_{}", hex::encode(&h.finalize()[..16]))
}

/// Prefix `tokens[..start]` and suffix `tokens[end..]` around `span`.
pub fn split(doc: &Document, span: &PiiSpan) -> Result<(Vec<Token>, Vec<Token>)> {
    span.validate_against(&doc.tokens)?;
    Ok((doc.tokens[..span.start].to_vec(), doc.tokens[span.end..].to_vec()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskRecord {
    /// Index of the placeholder in the scrubbed token sequence.
    pub pos: usize,
    pub span: PiiSpan,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScrubbedDocument {
    pub id: String,
    pub split: Split,
    pub tokens: Vec<Token>,
    /// Ground truth, in document order. Not part of the default output.
    pub masks: Vec<MaskRecord>,
}

impl ScrubbedDocument {
    pub fn to_document(&self) -> Document {
        Document::new(self.id.clone(), self.tokens.clone(), self.split)
    }

    pub fn to_json(&self, with_ground_truth: bool) -> serde_json::Value {
        let mut v = serde_json::json!({
            "id": self.id,
            "split": self.split,
            "text": detokenize(&self.tokens),
        });
        if with_ground_truth {
            v["masks"] = self
                .masks
                .iter()
                .map(|m| serde_json::json!({"pos": m.pos, "class": m.span.class, "surface": m.span.surface}))
                .collect();
        }
        v
    }
}

/// Replaces `spans` (non-overlapping, any order) right to left.
fn replace_spans(tokens: &[Token], spans: &[PiiSpan], placeholder: impl Fn(&PiiSpan) -> Token) -> (Vec<Token>, Vec<usize>) {
    let mut order: Vec<usize> = (0..spans.len()).collect();
    order.sort_by_key(|&i| std::cmp::Reverse(spans[i].start));
    let mut out = tokens.to_vec();
    for &i in &order {
        let s = &spans[i];
        out.splice(s.start..s.end, [placeholder(s)]);
    }
    // Placeholder positions in the output: each earlier span shrank to one token.
    let mut by_start: Vec<usize> = (0..spans.len()).collect();
    by_start.sort_by_key(|&i| spans[i].start);
    let mut pos = vec![0; spans.len()];
    let mut removed = 0;
    for &i in &by_start {
        pos[i] = spans[i].start - removed;
        removed += spans[i].len() - 1;
    }
    (out, pos)
}

/// Tags and masks every document of the corpus.
pub fn scrub(corpus: &Corpus, tagger: &Tagger, style: &MaskStyle) -> Result<Vec<ScrubbedDocument>> {
    style.validate()?;
    let docs: Vec<ScrubbedDocument> = corpus
        .documents()
        .par_iter()
        .map(|doc| {
            let spans = tagger.extract(doc, None)?;
            let (tokens, pos) = replace_spans(&doc.tokens, &spans, |s| {
                style.placeholder(s.class, &tagger.pii_key(&s.surface))
            });
            Ok(ScrubbedDocument {
                id: doc.id.clone(),
                split: doc.split,
                tokens,
                masks: spans
                    .into_iter()
                    .zip(pos)
                    .map(|(span, pos)| MaskRecord { pos, span })
                    .collect(),
            })
        })
        .collect::<Result<_>>()?;
    if style.mode == MaskMode::PseudonymHash {
        check_collisions(&docs, tagger, style)?;
    }
    Ok(docs)
}

fn check_collisions(docs: &[ScrubbedDocument], tagger: &Tagger, style: &MaskStyle) -> Result<()> {
    let mut seen: BTreeMap<Token, String> = BTreeMap::new();
    for m in docs.iter().flat_map(|d| &d.masks) {
        let key = tagger.pii_key(&m.span.surface);
        let p = style.placeholder(m.span.class, &key);
        match seen.get(&p) {
            Some(prev) if *prev != key => {
                return Err(LabError::PseudonymCollision {
                    first: prev.clone(),
                    second: key,
                    pseudonym: p,
                })
            }
            Some(_) => {}
            None => {
                seen.insert(p, key);
            }
        }
    }
    Ok(())
}

/// Scrubbed documents as a corpus (documents scrubbed to nothing are dropped).
pub fn scrubbed_corpus(docs: &[ScrubbedDocument]) -> Result<Corpus> {
    Corpus::new(
        docs.iter()
            .filter(|d| !d.tokens.is_empty())
            .map(ScrubbedDocument::to_document)
            .collect(),
    )
}

/// The context given to a reconstruction or inference adversary: every PII
/// is masked, and the sequence is split at the target's mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskedQuery {
    pub doc_id: String,
    /// S₀, possibly containing residual `[MASK]` tokens.
    pub prefix: Vec<Token>,
    /// S₁, possibly containing residual `[MASK]` tokens.
    pub suffix: Vec<Token>,
    pub target_class: PiiClass,
    /// The masked PII. Only game harnesses may read it.
    pub ground_truth: String,
}

impl MaskedQuery {
    /// `S₀ ⧺ [MASK] ⧺ S₁`.
    pub fn masked_tokens(&self) -> Vec<Token> {
        let mut out = self.prefix.clone();
        out.push(MASK_TOKEN.to_string());
        out.extend(self.suffix.iter().cloned());
        out
    }
}

pub fn make_masked_query(doc: &Document, spans: &[PiiSpan], target: &PiiSpan) -> Result<MaskedQuery> {
    let Some(ti) = spans.iter().position(|s| s == target) else {
        return Err(LabError::invalid(format!(
            "target span {}..{} is not among the document's spans",
            target.start, target.end
        )));
    };
    for s in spans {
        s.validate_against(&doc.tokens)?;
    }
    let (tokens, pos) = replace_spans(&doc.tokens, spans, |_| MASK_TOKEN.to_string());
    let p = pos[ti];
    Ok(MaskedQuery {
        doc_id: doc.id.clone(),
        prefix: tokens[..p].to_vec(),
        suffix: tokens[p + 1..].to_vec(),
        target_class: target.class,
        ground_truth: target.surface.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tokenize;
    use crate::tagger::TaggerConfig;

    fn doc(id: &str, text: &str) -> Document {
        Document::new(id, tokenize(text), Split::Train)
    }

    fn tagger(entries: &[(PiiClass, &[&str])]) -> Tagger {
        Tagger::new(TaggerConfig::from_pool(entries.iter().map(|(c, e)| (*c, *e)))).unwrap()
    }

    fn text_of(d: &ScrubbedDocument) -> String {
        detokenize(&d.tokens)
    }

    #[test]
    fn split_examples() {
        let d = doc("d", "In May 2022 , Jane had chemotherapy at LHS");
        let t = tagger(&[(PiiClass::Person, &["Jane"])]);
        let span = &t.extract(&d, None).unwrap()[0];
        let (pre, suf) = split(&d, span).unwrap();
        assert_eq!(pre, tokenize("In May 2022 ,"));
        assert_eq!(suf, tokenize("had chemotherapy at LHS"));

        let whole = doc("w", "Jane");
        let span = &t.extract(&whole, None).unwrap()[0];
        assert_eq!(split(&whole, span).unwrap(), (vec![], vec![]));

        let bad = PiiSpan {
            class: PiiClass::Person,
            surface: "x".into(),
            start: 3,
            end: 9,
            doc_id: "w".into(),
        };
        assert!(split(&whole, &bad).is_err());
    }

    #[test]
    fn full_mask_masks_name_and_url() {
        let c = Corpus::new(vec![doc("a", "Hello John Doe , I like your homepage johndoe.com")]).unwrap();
        let t = tagger(&[(PiiClass::Person, &["John Doe"])]);
        let out = scrub(&c, &t, &MaskStyle::full_mask()).unwrap();
        assert_eq!(text_of(&out[0]), "Hello [MASK], I like your homepage [MASK]");
        assert_eq!(out[0].tokens, tokenize("Hello [MASK] , I like your homepage [MASK]"));
        assert_eq!(out[0].masks.iter().map(|m| m.pos).collect::<Vec<_>>(), vec![1, 7]);
        assert_eq!(out[0].masks[1].span.class, PiiClass::Url);
    }

    #[test]
    fn no_spans_leaves_document_unchanged() {
        let c = Corpus::new(vec![doc("a", "nothing to see here .")]).unwrap();
        let out = scrub(&c, &tagger(&[(PiiClass::Person, &["Jane"])]), &MaskStyle::full_mask()).unwrap();
        assert_eq!(out[0].tokens, c.documents()[0].tokens);
        assert!(out[0].masks.is_empty());
    }

    #[test]
    fn entity_tags_and_pseudonyms() {
        let c = Corpus::new(vec![
            doc("a", "John Doe met Ann ."),
            doc("b", "Later John Doe left ."),
        ])
        .unwrap();
        let t = tagger(&[(PiiClass::Person, &["John Doe", "Ann"])]);
        let tagged = scrub(&c, &t, &MaskStyle::entity_tag()).unwrap();
        assert_eq!(text_of(&tagged[0]), "[PERSON] met [PERSON].");

        let pseud = scrub(&c, &t, &MaskStyle::pseudonym("s3cret")).unwrap();
        let p = pseudonym("s3cret", "John Doe");
        assert_eq!(pseud[0].tokens[0], p);
        assert_eq!(pseud[1].tokens[1], p);
        assert_eq!(p.len(), 4 + 32);
        assert_ne!(pseud[0].tokens[2], p);
        assert_ne!(pseudonym("other", "John Doe"), p);
        assert!(scrub(&c, &t, &MaskStyle { mode: MaskMode::PseudonymHash, salt: None }).is_err());
    }

    #[test]
    fn rescrubbing_finds_nothing_and_is_idempotent() {
        let c = Corpus::new(vec![
            doc("a", "Mail jane@x.org or call Jane Roe on 555-123-4567 ."),
            doc("b", "Jane Roe and Ann met Ann ."),
        ])
        .unwrap();
        let t = tagger(&[(PiiClass::Person, &["Jane Roe", "Ann", "Jane"])]);
        for style in [MaskStyle::full_mask(), MaskStyle::entity_tag(), MaskStyle::pseudonym("k")] {
            let once = scrub(&c, &t, &style).unwrap();
            let sc = scrubbed_corpus(&once).unwrap();
            for d in sc.documents() {
                assert!(t.extract(d, None).unwrap().is_empty(), "{style:?}: {}", d.text());
            }
            let twice = scrub(&sc, &t, &style).unwrap();
            let a: Vec<_> = once.iter().map(|d| &d.tokens).collect();
            let b: Vec<_> = twice.iter().map(|d| &d.tokens).collect();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn masked_query_residual_masks() {
        let d = doc("d", "A murder was committed by Ann and Bob .");
        let t = tagger(&[(PiiClass::Person, &["Ann", "Bob"])]);
        let spans = t.extract(&d, None).unwrap();

        let q = make_masked_query(&d, &spans, &spans[1]).unwrap();
        assert_eq!(q.prefix, tokenize("A murder was committed by [MASK] and"));
        assert_eq!(q.suffix, tokenize("."));
        assert_eq!(q.ground_truth, "Bob");
        assert_eq!(q.masked_tokens(), tokenize("A murder was committed by [MASK] and [MASK] ."));

        let single = doc("s", "Ann left .");
        let sp = t.extract(&single, None).unwrap();
        let q = make_masked_query(&single, &sp, &sp[0]).unwrap();
        assert!(q.prefix.is_empty());
        assert!(!q.suffix.contains(&MASK_TOKEN.to_string()));

        let mut other = spans[0].clone();
        other.start += 1;
        other.end += 1;
        assert!(make_masked_query(&d, &spans, &other).is_err());
    }

    #[test]
    fn multi_token_spans_collapse_to_one_mask() {
        let d = doc("d", "On 3 May 2021 , Jane Roe wrote .");
        let t = tagger(&[(PiiClass::Person, &["Jane Roe"]), (PiiClass::Date, &["3 May 2021"])]);
        let spans = t.extract(&d, None).unwrap();
        let q = make_masked_query(&d, &spans, &spans[1]).unwrap();
        assert_eq!(q.prefix, tokenize("On [MASK] ,"));
        assert_eq!(q.suffix, tokenize("wrote ."));
    }
}
