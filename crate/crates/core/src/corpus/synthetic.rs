//! Seedable synthetic corpus with planted PII.
//!
//! Each document instantiates one sentence template. Template words are
//! whitespace separated; a word of the form
//!
//! - `{class}` is a PII slot (e.g. `{person}`), filled from `pii_pool`,
//! - `{@name}` is a profile attribute of the document's subject (the first
//!   slot of `subject_class`, else the first slot), fixed per subject surface
//!   across the whole corpus,
//! - `{%name}` is a filler drawn independently per document.
//!
//! Per-surface occurrence counts follow a truncated discrete power law.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{tokenize, Corpus, Document, Split, SplitRatio, Token};
use crate::error::{LabError, Result};
use crate::tagger::{PiiClass, PiiSpan};
use crate::{derive_seed, streams};

/// Truncated discrete power law `P(d) ∝ d^-exponent` on `1..=max`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DuplicationLaw {
    /// When absent, the exponent is solved so the law's mean equals `mean`.
    #[serde(default)]
    pub exponent: Option<f64>,
    #[serde(default = "DuplicationLaw::default_mean")]
    pub mean: f64,
    #[serde(default = "DuplicationLaw::default_max")]
    pub max: u32,
}

impl Default for DuplicationLaw {
    fn default() -> Self {
        DuplicationLaw {
            exponent: None,
            mean: Self::default_mean(),
            max: Self::default_max(),
        }
    }
}

impl DuplicationLaw {
    fn default_mean() -> f64 {
        4.66
    }

    fn default_max() -> u32 {
        100
    }

    pub fn mean_for_exponent(exponent: f64, max: u32) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for d in 1..=max {
            let w = (d as f64).powf(-exponent);
            num += d as f64 * w;
            den += w;
        }
        num / den
    }

    pub fn resolved_exponent(&self) -> Result<f64> {
        if self.max == 0 {
            return Err(LabError::config("duplication max must be >= 1"));
        }
        if let Some(e) = self.exponent {
            if !e.is_finite() {
                return Err(LabError::config("duplication exponent must be finite"));
            }
            return Ok(e);
        }
        if self.max == 1 {
            return Ok(0.0);
        }
        let upper = (self.max as f64 + 1.0) / 2.0;
        if !(self.mean > 1.0 && self.mean < upper) {
            return Err(LabError::config(format!(
                "mean duplication {} must lie in (1, {upper}) for max {}",
                self.mean, self.max
            )));
        }
        // The mean decreases monotonically in the exponent.
        let (mut lo, mut hi) = (0.0_f64, 20.0_f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if Self::mean_for_exponent(mid, self.max) > self.mean {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(0.5 * (lo + hi))
    }

    /// Probability mass for `d = 1..=max` (index `d - 1`).
    pub fn pmf(&self) -> Result<Vec<f64>> {
        let e = self.resolved_exponent()?;
        let w: Vec<f64> = (1..=self.max).map(|d| (d as f64).powf(-e)).collect();
        let total: f64 = w.iter().sum();
        Ok(w.into_iter().map(|x| x / total).collect())
    }

    fn sampler(&self) -> Result<Vec<f64>> {
        let mut acc = 0.0;
        Ok(self
            .pmf()?
            .into_iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect())
    }
}

fn draw(cdf: &[f64], rng: &mut ChaCha8Rng) -> u32 {
    let u: f64 = rng.random::<f64>() * cdf[cdf.len() - 1];
    cdf.partition_point(|&c| c <= u).min(cdf.len() - 1) as u32 + 1
}

/// How documents are assigned to splits.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitUnit {
    /// Documents are shuffled individually.
    #[default]
    Document,
    /// All documents about the same subject land in the same split.
    Subject,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub templates: Vec<String>,
    pub pii_pool: BTreeMap<PiiClass, Vec<String>>,
    #[serde(default)]
    pub attributes: BTreeMap<String, Vec<String>>,
    #[serde(default)]
    pub duplication: DuplicationLaw,
    pub n_documents: usize,
    #[serde(default)]
    pub seed: u64,
    /// Seed of the PII population, i.e. which surfaces are duplicated how
    /// often. Defaults to `seed`; corpora sharing it are independent samples
    /// from the same population.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub population_seed: Option<u64>,
    #[serde(default)]
    pub split: SplitRatio,
    #[serde(default)]
    pub split_unit: SplitUnit,
    #[serde(default = "SyntheticSpec::default_subject_class")]
    pub subject_class: PiiClass,
}

#[derive(Debug, Clone, PartialEq)]
enum Piece {
    Literal(Vec<Token>),
    Pii(PiiClass),
    Subject(String),
    Filler(String),
}

fn parse_template(template: &str, spec: &SyntheticSpec) -> Result<Vec<Piece>> {
    let mut pieces = Vec::new();
    for word in template.split_whitespace() {
        let slot = word
            .strip_prefix('{')
            .and_then(|w| w.strip_suffix('}'))
            .filter(|w| !w.is_empty() && !w.contains(['{', '}']));
        let piece = match slot {
            Some(name) if name.starts_with('@') || name.starts_with('%') => {
                let attr = &name[1..];
                if !spec.attributes.get(attr).is_some_and(|v| !v.is_empty()) {
                    return Err(LabError::config(format!(
                        "template {template:?} uses attribute {attr:?} with no values"
                    )));
                }
                if name.starts_with('@') {
                    Piece::Subject(attr.to_string())
                } else {
                    Piece::Filler(attr.to_string())
                }
            }
            Some(name) => {
                let class: PiiClass = name.parse().map_err(|_| {
                    LabError::config(format!("template {template:?}: unknown PII class {name:?}"))
                })?;
                if !spec.pii_pool.get(&class).is_some_and(|v| !v.is_empty()) {
                    return Err(LabError::config(format!(
                        "template {template:?}: class {class} missing from pii_pool"
                    )));
                }
                Piece::Pii(class)
            }
            None => {
                let tokens = tokenize(word);
                if tokens.is_empty() {
                    continue;
                }
                Piece::Literal(tokens)
            }
        };
        if let (Some(Piece::Pii(_)), Piece::Pii(_)) = (pieces.last(), &piece) {
            return Err(LabError::config(format!(
                "template {template:?} places two PII slots next to each other"
            )));
        }
        pieces.push(piece);
    }
    let has_pii = pieces.iter().any(|p| matches!(p, Piece::Pii(_)));
    if !has_pii && pieces.iter().any(|p| matches!(p, Piece::Subject(_))) {
        return Err(LabError::config(format!(
            "template {template:?} uses a subject attribute but has no PII slot"
        )));
    }
    if !pieces
        .iter()
        .any(|p| matches!(p, Piece::Literal(_) | Piece::Pii(_) | Piece::Filler(_) | Piece::Subject(_)))
    {
        return Err(LabError::config(format!("template {template:?} is empty")));
    }
    Ok(pieces)
}

/// Index into `values` fixed by `(attribute, subject)` only, so the profile
/// of a subject is stable across corpora drawn with different seeds.
fn profile_index(attribute: &str, subject: &str, len: usize) -> usize {
    let mut h = Sha256::new();
    h.update(attribute.as_bytes());
    h.update([0u8]);
    h.update(subject.as_bytes());
    let digest = h.finalize();
    let mut b = [0u8; 8];
    b.copy_from_slice(&digest[..8]);
    (u64::from_le_bytes(b) % len as u64) as usize
}

/// A generated corpus together with its planted ground truth.
#[derive(Debug, Clone)]
pub struct GeneratedCorpus {
    pub corpus: Corpus,
    pub ground_truth: Vec<PiiSpan>,
    /// Power-law exponent actually used.
    pub exponent: f64,
}

impl GeneratedCorpus {
    /// Occurrence count per surface of `class`, optionally restricted to one split.
    pub fn duplication_counts(&self, class: PiiClass, split: Option<Split>) -> BTreeMap<String, usize> {
        let splits: HashMap<&str, Split> = self
            .corpus
            .documents()
            .iter()
            .map(|d| (d.id.as_str(), d.split))
            .collect();
        let mut counts = BTreeMap::new();
        for span in &self.ground_truth {
            if span.class != class {
                continue;
            }
            if split.is_some_and(|s| splits.get(span.doc_id.as_str()) != Some(&s)) {
                continue;
            }
            *counts.entry(span.surface.clone()).or_insert(0) += 1;
        }
        counts
    }

    /// Mean occurrences per unique surface of `class`.
    pub fn mean_duplication(&self, class: PiiClass) -> Option<f64> {
        let counts = self.duplication_counts(class, None);
        if counts.is_empty() {
            return None;
        }
        Some(counts.values().sum::<usize>() as f64 / counts.len() as f64)
    }

    /// Planted spans of one document.
    pub fn spans_of<'a>(&'a self, doc_id: &'a str) -> impl Iterator<Item = &'a PiiSpan> + 'a {
        self.ground_truth.iter().filter(move |s| s.doc_id == doc_id)
    }
}

impl SyntheticSpec {
    fn default_subject_class() -> PiiClass {
        PiiClass::Person
    }

    pub fn validate(&self) -> Result<()> {
        if self.templates.is_empty() {
            return Err(LabError::config("template_pool is empty"));
        }
        if self.pii_pool.values().all(|v| v.is_empty()) {
            return Err(LabError::config("pii_pool is empty"));
        }
        if self.n_documents == 0 {
            return Err(LabError::config("n_documents must be >= 1"));
        }
        for (class, surfaces) in &self.pii_pool {
            if surfaces.iter().any(|s| tokenize(s).is_empty()) {
                return Err(LabError::config(format!("pii_pool[{class}] has a blank surface")));
            }
        }
        self.split.validate()?;
        self.duplication.resolved_exponent()?;
        for t in &self.templates {
            parse_template(t, self)?;
        }
        Ok(())
    }
}

/// Generates the corpus described by `spec`; identical specs give identical corpora.
pub fn generate_corpus(spec: &SyntheticSpec) -> Result<GeneratedCorpus> {
    spec.validate()?;
    let templates: Vec<Vec<Piece>> = spec
        .templates
        .iter()
        .map(|t| parse_template(t, spec))
        .collect::<Result<_>>()?;
    let exponent = spec.duplication.resolved_exponent()?;
    let cdf = spec.duplication.sampler()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, streams::CORPUS, 0));

    let chosen: Vec<usize> = (0..spec.n_documents)
        .map(|_| rng.random_range(0..templates.len()))
        .collect();

    // Per class: a shuffled stream of surfaces whose multiplicities follow the law.
    let mut streams_by_class: BTreeMap<PiiClass, std::vec::IntoIter<String>> = BTreeMap::new();
    // Popularity comes from its own per-class stream, so corpora that share a
    // population differ only in how many occurrences they need.
    let population = spec.population_seed.unwrap_or(spec.seed);
    for (k, (class, pool)) in spec.pii_pool.iter().enumerate() {
        let need: usize = chosen
            .iter()
            .map(|&t| templates[t].iter().filter(|p| **p == Piece::Pii(*class)).count())
            .sum();
        if need == 0 {
            continue;
        }
        let mut pop_rng = ChaCha8Rng::seed_from_u64(derive_seed(population, streams::POPULATION, k as u64));
        let mut order: Vec<usize> = (0..pool.len()).collect();
        order.shuffle(&mut pop_rng);
        let mut counts = vec![0usize; pool.len()];
        let mut total = 0usize;
        let mut i = 0usize;
        while total < need {
            let d = draw(&cdf, &mut pop_rng) as usize;
            let take = d.min(need - total);
            counts[order[i % pool.len()]] += take;
            total += take;
            i += 1;
        }
        let mut occurrences: Vec<String> = Vec::with_capacity(need);
        for &idx in &order {
            for _ in 0..counts[idx] {
                occurrences.push(pool[idx].clone());
            }
        }
        occurrences.shuffle(&mut rng);
        streams_by_class.insert(*class, occurrences.into_iter());
    }

    let width = spec.n_documents.to_string().len().max(6);
    let mut docs = Vec::with_capacity(spec.n_documents);
    let mut subjects = Vec::with_capacity(spec.n_documents);
    let mut truth = Vec::new();
    for (i, &t) in chosen.iter().enumerate() {
        let id = format!("doc-{i:0width$}");
        let pieces = &templates[t];
        let fills: Vec<Option<String>> = pieces
            .iter()
            .map(|p| match p {
                Piece::Pii(class) => streams_by_class
                    .get_mut(class)
                    .and_then(|s| s.next()),
                _ => None,
            })
            .collect();
        let subject = pieces
            .iter()
            .zip(&fills)
            .find(|(p, _)| **p == Piece::Pii(spec.subject_class))
            .and_then(|(_, f)| f.clone())
            .or_else(|| fills.iter().flatten().next().cloned());
        let mut tokens = Vec::new();
        for (piece, fill) in pieces.iter().zip(&fills) {
            match piece {
                Piece::Literal(lit) => tokens.extend(lit.iter().cloned()),
                Piece::Pii(class) => {
                    let surface = fill.as_ref().expect("stream sized to demand");
                    let start = tokens.len();
                    tokens.extend(tokenize(surface));
                    truth.push(PiiSpan {
                        class: *class,
                        surface: crate::tagger::normalize_surface(surface, false),
                        start,
                        end: tokens.len(),
                        doc_id: id.clone(),
                    });
                }
                Piece::Subject(attr) => {
                    let values = &spec.attributes[attr];
                    let subject = subject.as_deref().expect("validated: template has a PII slot");
                    let v = &values[profile_index(attr, subject, values.len())];
                    tokens.extend(tokenize(v));
                }
                Piece::Filler(attr) => {
                    let values = &spec.attributes[attr];
                    let v = &values[rng.random_range(0..values.len())];
                    tokens.extend(tokenize(v));
                }
            }
        }
        subjects.push(subject);
        docs.push((id, tokens));
    }

    let splits = assign_splits(spec, &subjects, &mut rng);
    let documents = docs
        .into_iter()
        .zip(splits)
        .map(|((id, tokens), split)| Document::new(id, tokens, split))
        .collect();
    Ok(GeneratedCorpus {
        corpus: Corpus::new(documents)?,
        ground_truth: truth,
        exponent,
    })
}

fn assign_splits(spec: &SyntheticSpec, subjects: &[Option<String>], rng: &mut ChaCha8Rng) -> Vec<Split> {
    let n = subjects.len();
    let targets = spec.split.counts(n, rng);
    let mut out = vec![Split::Train; n];
    match spec.split_unit {
        SplitUnit::Document => {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(rng);
            let mut it = order.into_iter();
            for (split, count) in Split::ALL.iter().zip(targets) {
                for idx in it.by_ref().take(count) {
                    out[idx] = *split;
                }
            }
        }
        SplitUnit::Subject => {
            let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
            for (i, s) in subjects.iter().enumerate() {
                let key = match s {
                    Some(s) => format!("s:{s}"),
                    None => format!("d:{i}"),
                };
                groups.entry(key).or_default().push(i);
            }
            let mut groups: Vec<Vec<usize>> = groups.into_values().collect();
            groups.shuffle(rng);
            groups.sort_by_key(|g| std::cmp::Reverse(g.len()));
            let mut filled = [0usize; 3];
            for g in groups {
                let k = (0..3)
                    .max_by(|&a, &b| {
                        let da = targets[a] as f64 - filled[a] as f64;
                        let db = targets[b] as f64 - filled[b] as f64;
                        da.total_cmp(&db).then(b.cmp(&a))
                    })
                    .expect("three splits");
                filled[k] += g.len();
                for idx in g {
                    out[idx] = Split::ALL[k];
                }
            }
        }
    }
    out
}

const FIRST_NAMES: &[&str] = &[
    "James", "Mary", "Robert", "Patricia", "John", "Jennifer", "Michael", "Linda", "David",
    "Elizabeth", "William", "Barbara", "Richard", "Susan", "Joseph", "Jessica", "Thomas", "Sarah",
    "Charles", "Karen", "Daniel", "Nancy", "Matthew", "Lisa", "Anthony", "Betty", "Mark",
    "Margaret", "Donald", "Sandra", "Steven", "Ashley", "Paul", "Kimberly", "Andrew", "Emily",
    "Joshua", "Donna", "Kenneth", "Michelle", "Kevin", "Carol", "Brian", "Amanda", "George",
    "Melissa", "Edward", "Deborah", "Ronald", "Stephanie", "Timothy", "Rebecca", "Jason", "Laura",
    "Jeffrey", "Sharon", "Ryan", "Cynthia", "Jacob", "Kathleen", "Gary", "Amy", "Nicholas",
    "Shirley",
];

const LAST_NAMES: &[&str] = &[
    "Smith", "Johnson", "Williams", "Brown", "Jones", "Garcia", "Miller", "Davis", "Rodriguez",
    "Martinez", "Hernandez", "Lopez", "Gonzalez", "Wilson", "Anderson", "Thomas", "Taylor",
    "Moore", "Jackson", "Martin", "Lee", "Perez", "Thompson", "White", "Harris", "Sanchez",
    "Clark", "Ramirez", "Lewis", "Robinson", "Walker", "Young", "Allen", "King", "Wright",
    "Scott", "Torres", "Nguyen", "Hill", "Flores", "Green", "Adams", "Nelson", "Baker", "Hall",
    "Rivera", "Campbell", "Mitchell", "Carter", "Roberts", "Gomez", "Phillips", "Evans",
    "Turner", "Diaz", "Parker", "Cruz", "Edwards", "Collins", "Reyes", "Stewart", "Morris",
    "Morales", "Murphy",
];

const MONTHS: &[&str] = &[
    "January", "February", "March", "April", "May", "June", "July", "August", "September",
    "October", "November", "December",
];

const ORGS: &[&str] = &[
    "Riverside Clinic", "Northgate Hospital", "LHS", "Mercy Hospital", "Lakeview Clinic",
    "Harbor Medical", "Summit Health", "Oakwood Hospital", "Westfield Clinic", "Cedar Hospital",
    "Pinecrest Medical", "Valley Health", "Bayside Clinic", "Hillcrest Hospital",
    "Maple Clinic", "Granite Medical", "Brookside Hospital", "Elm Clinic", "Eastwood Health",
    "Kingsway Hospital", "Fairview Clinic", "Stonebridge Medical", "Meadow Hospital",
    "Highland Clinic",
];

const CITIES: &[&str] = &[
    "Strasbourg", "Lyon", "Vienna", "Warsaw", "Prague", "Lisbon", "Madrid", "Rome", "Athens",
    "Dublin", "Oslo", "Helsinki", "Riga", "Vilnius", "Tallinn", "Sofia", "Bucharest", "Zagreb",
    "Ljubljana", "Bratislava", "Budapest", "Brussels", "Amsterdam", "Copenhagen", "Stockholm",
    "Berlin", "Munich", "Milan", "Porto", "Geneva",
];

const TREATMENTS: &[&str] = &[
    "chemotherapy", "dialysis", "surgery", "radiotherapy", "physiotherapy", "psychotherapy",
    "immunotherapy", "transfusion", "rehabilitation", "angioplasty", "biopsy", "endoscopy",
    "acupuncture", "vaccination", "counselling", "hydrotherapy",
];

const OCCUPATIONS: &[&str] = &[
    "teacher", "nurse", "engineer", "farmer", "journalist", "lawyer", "mechanic", "baker",
    "pharmacist", "accountant", "carpenter", "electrician", "librarian", "plumber", "architect",
    "translator",
];

const SYMPTOMS: &[&str] = &[
    "chest pain", "fever", "headaches", "dizziness", "fatigue", "nausea", "back pain",
    "insomnia", "a rash", "shortness of breath", "joint pain", "a cough", "blurred vision",
    "anxiety", "abdominal pain", "palpitations", "numbness", "a fracture", "swelling",
    "memory loss",
];

const MATTERS: &[&str] = &[
    "the detention", "the eviction", "the search", "the custody dispute", "the tax assessment",
    "the dismissal", "the surveillance", "the expropriation", "the extradition",
    "the pension claim", "the defamation case", "the inheritance", "the injury claim",
    "the permit refusal", "the fine", "the arrest",
];

impl SyntheticSpec {
    /// A medical/legal-records corpus with person names as the principal PII.
    ///
    /// Persons carry a stable profile (treatment and occupation) that the
    /// surrounding context reveals, so reconstruction from a suffix is
    /// possible; dates, organisations, cities and e-mail addresses are
    /// planted as secondary PII classes.
    pub fn benchmark(n_documents: usize, seed: u64) -> SyntheticSpec {
        let persons: Vec<String> = FIRST_NAMES
            .iter()
            .flat_map(|f| LAST_NAMES.iter().map(move |l| format!("{f} {l}")))
            .collect();
        let emails: Vec<String> = FIRST_NAMES
            .iter()
            .zip(LAST_NAMES.iter().cycle().skip(7))
            .map(|(f, l)| format!("{}.{}@anon.com", f.to_lowercase(), l.to_lowercase()))
            .collect();
        let dates: Vec<String> = (2010..2024)
            .flat_map(|y| MONTHS.iter().map(move |m| format!("{m} {y}")))
            .collect();
        let owned = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<Vec<_>>();

        let mut pii_pool = BTreeMap::new();
        pii_pool.insert(PiiClass::Person, persons);
        pii_pool.insert(PiiClass::Date, dates);
        pii_pool.insert(PiiClass::Org, owned(ORGS));
        pii_pool.insert(PiiClass::Gpe, owned(CITIES));
        pii_pool.insert(PiiClass::EmailAddress, emails);

        let mut attributes = BTreeMap::new();
        attributes.insert("treatment".to_string(), owned(TREATMENTS));
        attributes.insert("occupation".to_string(), owned(OCCUPATIONS));
        attributes.insert("symptom".to_string(), owned(SYMPTOMS));
        attributes.insert("matter".to_string(), owned(MATTERS));

        let templates = [
            "In {date} , {person} had {@treatment} at {org} .",
            "{person} , {@occupation} from {gpe} , was admitted in {date} with {%symptom} .",
            "The applicant {person} underwent {@treatment} after {%symptom} .",
            "On {date} the court heard {person} , {@occupation} , about {%matter} .",
            "{person} complained of {%symptom} and was referred to {org} .",
            "Please contact {person} at {email_address} regarding {%matter} .",
        ];

        SyntheticSpec {
            templates: templates.iter().map(|s| s.to_string()).collect(),
            pii_pool,
            attributes,
            duplication: DuplicationLaw::default(),
            n_documents,
            seed,
            split: SplitRatio::default(),
            split_unit: SplitUnit::Document,
            subject_class: PiiClass::Person,
            population_seed: None,
        }
    }
}
