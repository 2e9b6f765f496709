//! Word-level vocabulary shared by the language model and the corpus.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const SEP: usize = 3;
pub const EOS: usize = 4;

/// Fixed instruction prepended to every report.
pub const PROMPT: &str =
    "Generate a comprehensive and detailed diagnosis report for this chest X-ray image.";

const SPECIALS: [&str; 5] = ["<pad>", "<unk>", "<bos>", "<sep>", "<eos>"];

/// Splits text into lower-case words, with `.` `,` `:` `;` as separate tokens.
pub fn lm_tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let mut cur = String::new();
        for ch in word.chars() {
            if matches!(ch, '.' | ',' | ':' | ';') {
                if !cur.is_empty() {
                    out.push(core::mem::take(&mut cur));
                }
                out.push(ch.to_string());
            } else {
                cur.extend(ch.to_lowercase());
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(from = "Vec<String>", into = "Vec<String>"))]
pub struct Vocabulary {
    words: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(words: Vec<String>) -> Self {
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Vocabulary { words, index }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.words
    }
}

impl Vocabulary {
    /// Special tokens first, then every distinct word of `texts` in sorted order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut seen = alloc::collections::BTreeSet::new();
        for t in texts {
            for w in lm_tokens(t) {
                seen.insert(w);
            }
        }
        let mut words: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        words.extend(seen.into_iter().filter(|w| !SPECIALS.contains(&w.as_str())));
        Vocabulary::from(words)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: usize) -> Result<&str> {
        self.words
            .get(id)
            .map(String::as_str)
            .ok_or(Error::Vocabulary(id))
    }

    /// Unknown words map to [`UNK`].
    pub fn encode(&self, text: &str) -> Vec<usize> {
        lm_tokens(text)
            .iter()
            .map(|w| self.id(w).unwrap_or(UNK))
            .collect()
    }

    /// Joins words with single spaces, attaching punctuation to the previous
    /// word. Special tokens are skipped.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            if id < SPECIALS.len() {
                continue;
            }
            let w = self.word(id)?;
            let punct = matches!(w, "." | "," | ":" | ";");
            if !out.is_empty() && !punct {
                out.push(' ');
            }
            out.push_str(w);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_canonical_text() {
        let text = "the heart is normal. no evidence of effusion, pneumothorax.";
        let v = Vocabulary::build([text]);
        assert_eq!(v.word(BOS).unwrap(), "<bos>");
        let ids = v.encode(text);
        assert!(ids.iter().all(|&i| i >= 5));
        assert_eq!(v.decode(&ids).unwrap(), text);
    }

    #[test]
    fn unknown_and_out_of_range() {
        let v = Vocabulary::build(["a b"]);
        assert_eq!(v.encode("a zebra"), [v.id("a").unwrap(), UNK]);
        assert!(matches!(v.decode(&[99]), Err(Error::Vocabulary(99))));
    }

    #[test]
    fn sorted_and_deterministic() {
        let v = Vocabulary::build(["b a c", "a"]);
        assert_eq!(&v.words()[5..], ["a", "b", "c"]);
    }
}
