//! Pluggable phonemizer interface with a grapheme-based default.

use crate::error::{Error, Result};

/// Word-boundary symbol.
pub const SP: &str = "sp";

pub trait Phonemizer {
    fn phonemize(&self, text: &str) -> Result<Vec<String>>;
}

/// Maps each ASCII letter to a single-character phoneme symbol and
/// whitespace to the `sp` boundary. Characters outside the inventory are
/// skipped; text with no usable symbols fails.
pub struct GraphemePhonemizer;

impl Phonemizer for GraphemePhonemizer {
    fn phonemize(&self, text: &str) -> Result<Vec<String>> {
        let mut out: Vec<String> = Vec::new();
        for word in text.to_lowercase().split_whitespace() {
            let start = out.len();
            for ch in word.chars() {
                if ch.is_ascii_lowercase() {
                    out.push(ch.to_string());
                }
            }
            if out.len() > start {
                out.push(SP.to_string());
            }
        }
        if out.last().map(String::as_str) == Some(SP) {
            out.pop();
        }
        if out.is_empty() {
            return Err(Error::Phonemize(format!("no phonemizable symbols in {text:?}")));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn words_get_boundaries() {
        let p = GraphemePhonemizer.phonemize("mara kesu").unwrap();
        assert_eq!(p, vec!["m", "a", "r", "a", "sp", "k", "e", "s", "u"]);
    }

    #[test]
    fn unusable_text_errors() {
        assert!(matches!(GraphemePhonemizer.phonemize("123 !!"), Err(Error::Phonemize(_))));
    }
}
