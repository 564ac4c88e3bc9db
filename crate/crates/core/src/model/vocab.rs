use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::text::tokenize;

pub const PAD: u32 = 0;
pub const IMG: u32 = 1;
pub const QTN: u32 = 2;
pub const ANS: u32 = 3;
pub const EOS: u32 = 4;

const SPECIALS: [&str; 5] = ["<pad>", "<img>", "<qtn>", "<ans>", "<eos>"];

/// Token strings and their ids. Ids 0..=4 are the special tokens, in the
/// order pad, img, qtn, ans, eos.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
}

impl Vocabulary {
    /// Specials followed by `words` in first-seen order.
    pub fn new<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        for w in words {
            for t in tokenize(w) {
                if !tokens.contains(&t) {
                    tokens.push(t);
                }
            }
        }
        Self { tokens }
    }

    /// Vocabulary covering every question and answer the synthetic corpus
    /// can produce.
    pub fn synthetic() -> Self {
        let corpus = crate::synth::corpus_words();
        Self::new(corpus.iter().map(String::as_str))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.tokens.iter().position(|t| t == token).map(|i| i as u32)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn is_special(id: u32) -> bool {
        id <= EOS
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        tokenize(text)
            .into_iter()
            .map(|t| self.id(&t).ok_or(Error::UnknownToken(t)))
            .collect()
    }

    /// Space-joined tokens; stops at the first `<eos>`.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut parts = Vec::with_capacity(ids.len());
        for &id in ids {
            if id == EOS {
                break;
            }
            parts.push(self.token(id).ok_or(Error::TokenOutOfRange(id))?);
        }
        Ok(parts.join(" "))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specials_are_fixed() {
        let v = Vocabulary::new(["hello world"]);
        assert_eq!(v.id("<pad>"), Some(PAD));
        assert_eq!(v.id("<img>"), Some(IMG));
        assert_eq!(v.id("<qtn>"), Some(QTN));
        assert_eq!(v.id("<ans>"), Some(ANS));
        assert_eq!(v.id("<eos>"), Some(EOS));
        assert_eq!(v.id("hello"), Some(5));
    }

    #[test]
    fn round_trip_and_unknown() {
        let v = Vocabulary::synthetic();
        let ids = v.encode("What has changed?").unwrap();
        assert_eq!(v.encode(&v.decode(&ids).unwrap()).unwrap(), ids);
        assert!(matches!(v.encode("zebra"), Err(Error::UnknownToken(_))));
    }
}
