//! Whitespace + punctuation tokenizer used by the reference model and the
//! dictionary tagger.

use std::ops::Range;
use std::sync::OnceLock;

use regex::Regex;
use unicode_normalization::UnicodeNormalization;

use super::Token;

/// Bracketed upper-case placeholders such as `[MASK]` or `[PERSON]` stay whole.
fn placeholder_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\[[A-Z][A-Z0-9_]*\]").expect("valid placeholder regex"))
}

pub fn is_placeholder(token: &str) -> bool {
    placeholder_re()
        .find(token)
        .is_some_and(|m| m.start() == 0 && m.end() == token.len())
}

pub(crate) fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(
            c,
            '“' | '”' | '‘' | '’' | '«' | '»' | '…' | '–' | '—' | '¿' | '¡' | '·' | '„'
        )
}

/// Splits `text` into tokens.
///
/// The text is NFC-normalized and split on Unicode whitespace; each word then
/// sheds its leading and trailing punctuation characters as one-character
/// tokens. Internal punctuation (`john.doe@anon.com`, `O'Neil`) is kept.
pub fn tokenize(text: &str) -> Vec<Token> {
    let normalized: String = text.nfc().collect();
    let mut out = Vec::new();
    for word in normalized.split_whitespace() {
        let mut last = 0;
        for m in placeholder_re().find_iter(word) {
            push_word(&word[last..m.start()], &mut out);
            out.push(m.as_str().to_string());
            last = m.end();
        }
        push_word(&word[last..], &mut out);
    }
    out
}

fn push_word(word: &str, out: &mut Vec<Token>) {
    if word.is_empty() {
        return;
    }
    let chars: Vec<(usize, char)> = word.char_indices().collect();
    let mut lo = 0;
    while lo < chars.len() && is_punct(chars[lo].1) {
        out.push(chars[lo].1.to_string());
        lo += 1;
    }
    if lo == chars.len() {
        return;
    }
    let mut hi = chars.len();
    while hi > lo && is_punct(chars[hi - 1].1) {
        hi -= 1;
    }
    let start = chars[lo].0;
    let end = if hi == chars.len() {
        word.len()
    } else {
        chars[hi].0
    };
    out.push(word[start..end].to_string());
    for &(_, c) in &chars[hi..] {
        out.push(c.to_string());
    }
}

fn attaches_left(token: &str) -> bool {
    matches!(
        token,
        "," | "." | "!" | "?" | ";" | ":" | ")" | "]" | "}" | "%" | "”" | "’" | "…" | "»"
    )
}

fn attaches_right(token: &str) -> bool {
    matches!(token, "(" | "[" | "{" | "“" | "‘" | "«" | "¿" | "¡" | "$")
}

/// Joins tokens back into text, also returning each token's character
/// (Unicode scalar) range in the output.
pub fn detokenize_with_offsets<S: AsRef<str>>(tokens: &[S]) -> (String, Vec<Range<usize>>) {
    let mut text = String::new();
    let mut offsets = Vec::with_capacity(tokens.len());
    let mut chars = 0usize;
    let mut prev: Option<&str> = None;
    for token in tokens {
        let token = token.as_ref();
        if let Some(p) = prev {
            if !attaches_left(token) && !attaches_right(p) {
                text.push(' ');
                chars += 1;
            }
        }
        let len = token.chars().count();
        offsets.push(chars..chars + len);
        text.push_str(token);
        chars += len;
        prev = Some(token);
    }
    (text, offsets)
}

/// Inverse of [`tokenize`] up to whitespace normalization.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    detokenize_with_offsets(tokens).0
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<String> {
        tokenize(s)
    }

    #[test]
    fn empty_input() {
        assert!(toks("").is_empty());
        assert!(toks("   \t\n").is_empty());
    }

    #[test]
    fn trailing_punctuation_is_split() {
        assert_eq!(toks("John plays soccer."), ["John", "plays", "soccer", "."]);
        assert_eq!(
            toks("Hello John Doe, hi!"),
            ["Hello", "John", "Doe", ",", "hi", "!"]
        );
    }

    #[test]
    fn internal_punctuation_is_kept() {
        assert_eq!(
            toks("mail john.doe@anon.com."),
            ["mail", "john.doe@anon.com", "."]
        );
        assert_eq!(toks("(O'Neil)"), ["(", "O'Neil", ")"]);
        assert_eq!(toks("..."), [".", ".", "."]);
    }

    #[test]
    fn placeholders_stay_whole() {
        assert_eq!(
            toks("Hello [MASK], see [PERSON]."),
            ["Hello", "[MASK]", ",", "see", "[PERSON]", "."]
        );
        assert!(is_placeholder("[WORK_OF_ART]"));
        assert!(!is_placeholder("[mask]"));
    }

    #[test]
    fn nfc_normalization() {
        // "e" + combining acute accent composes to a single scalar.
        assert_eq!(toks("Jose\u{301}"), ["Jos\u{e9}"]);
    }

    #[test]
    fn detokenize_offsets_index_the_text() {
        let tokens = toks("In May 2022, Jane had chemotherapy at LHS.");
        let (text, offsets) = detokenize_with_offsets(&tokens);
        assert_eq!(text, "In May 2022, Jane had chemotherapy at LHS.");
        let chars: Vec<char> = text.chars().collect();
        for (tok, r) in tokens.iter().zip(offsets) {
            let piece: String = chars[r].iter().collect();
            assert_eq!(&piece, tok);
        }
    }

    proptest! {
        #[test]
        fn round_trip_up_to_whitespace(words in prop::collection::vec("[A-Za-z]{1,6}[,.!?]?", 0..12)) {
            let text = words.join(" ");
            let tokens = tokenize(&text);
            prop_assert_eq!(detokenize(&tokens), text.split_whitespace().collect::<Vec<_>>().join(" "));
            prop_assert_eq!(tokenize(&detokenize(&tokens)), tokens);
        }
    }
}
