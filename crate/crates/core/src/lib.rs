//! Measurement of PII leakage from language models through black-box
//! next-token-probability access.
//!
//! The crate is organised around the three leakage games (extraction,
//! reconstruction, inference) plus sentence-level membership inference:
//!
//! - [`corpus`]: tokenization, documents, and a seedable synthetic corpus
//!   generator with planted PII under a power-law duplication law.
//! - [`tagger`]: PII recognition (dictionary/regex or a remote NER endpoint).
//! - [`lm`]: the probability oracle abstraction, a trainable add-λ n-gram
//!   reference model, sequence scoring, perplexity and top-k sampling.
//! - [`scrub`]: masking of tagged PII and construction of masked queries.
//! - [`attacks`]: extraction, reconstruction, inference and TAB adversaries,
//!   mask filling and baseline-leakage filtering.
//! - [`games`]: game harnesses, success metrics, ROC/AUC and reports.

pub mod attacks;
pub mod corpus;
pub mod error;
pub mod games;
pub mod io;
pub mod lm;
pub mod remote;
pub mod scrub;
pub mod stats;
pub mod tagger;

pub use error::{LabError, Result};

/// Version string embedded in every report and model file.
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Derives an independent 64-bit seed for `(stream, index)` from a base seed.
///
/// Every randomized step (per-sequence sampling, per-trial query selection,
/// shadow training) draws from its own derived stream, so results do not
/// depend on how work is scheduled across threads.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    let mut x = splitmix64(base ^ splitmix64(stream.wrapping_add(0x9e37_79b9_7f4a_7c15)));
    x = splitmix64(x ^ index.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    x
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Named RNG streams used with [`derive_seed`].
pub(crate) mod streams {
    pub const SAMPLE: u64 = 1;
    pub const QUERY: u64 = 2;
    pub const DECOY: u64 = 3;
    pub const SHADOW: u64 = 4;
    pub const DATASET: u64 = 5;
    pub const MEMBERSHIP: u64 = 6;
    pub const CORPUS: u64 = 7;
    pub const POPULATION: u64 = 8;
    pub const GENERATED: u64 = 9;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_differ_per_stream_and_index() {
        let a = derive_seed(7, streams::SAMPLE, 0);
        let b = derive_seed(7, streams::SAMPLE, 1);
        let c = derive_seed(7, streams::QUERY, 0);
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(a, derive_seed(7, streams::SAMPLE, 0));
    }
}
