//! Single-keyword extraction from an answer and its conversion into a
//! Grad-CAM target.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model::Vocabulary;
use crate::saliency::CamTarget;
use crate::text::{tokenize, words};

/// Salient terms with priorities (lower wins) and a stopword list.
#[derive(Clone, Debug, PartialEq)]
pub struct KeywordLexicon {
    terms: Vec<(String, u32)>,
    stopwords: Vec<String>,
}

impl KeywordLexicon {
    /// Terms are lowercased; duplicates are rejected. Terms may span several
    /// tokens ("pleural effusion").
    pub fn new<'a>(
        terms: impl IntoIterator<Item = (&'a str, u32)>,
        stopwords: impl IntoIterator<Item = &'a str>,
    ) -> Result<Self> {
        let mut out: Vec<(String, u32)> = Vec::new();
        for (t, p) in terms {
            let t = words(t).join(" ");
            if t.is_empty() {
                return Err(Error::invalid("lexicon", "empty term"));
            }
            if out.iter().any(|(u, _)| *u == t) {
                return Err(Error::invalid("lexicon", alloc::format!("duplicate term `{t}`")));
            }
            out.push((t, p));
        }
        // priority, then term text
        out.sort_by(|a, b| a.1.cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
        Ok(Self {
            terms: out,
            stopwords: stopwords.into_iter().map(|s| s.to_lowercase()).collect(),
        })
    }

    /// The lesion kinds of the synthetic corpus and common function words.
    pub fn synthetic() -> Self {
        let terms = crate::synth::LesionKind::ALL.map(|k| (k.name(), 1));
        Self::new(terms, STOPWORDS.iter().copied()).expect("static lexicon is valid")
    }

    pub fn terms(&self) -> &[(String, u32)] {
        &self.terms
    }

    pub fn is_stopword(&self, w: &str) -> bool {
        self.stopwords.iter().any(|s| s == w)
    }
}

const STOPWORDS: [&str; 24] = [
    "a", "an", "the", "no", "is", "are", "has", "have", "been", "in", "on", "of", "at", "to", "and", "or", "new", "there",
    "be", "was", "were", "it", "this", "that",
];

/// Lexicon-based keyword extraction.
///
/// Whole-word lexicon matches win by priority, then by earliest position;
/// otherwise the first non-stopword; otherwise the first token.
pub fn extract_keyword(answer: &str, lex: &KeywordLexicon) -> Result<String> {
    let toks = words(answer);
    if toks.is_empty() {
        return Err(Error::Empty("answer"));
    }
    let mut best: Option<(u32, usize, &str)> = None;
    for (term, prio) in &lex.terms {
        let span: Vec<&str> = term.split(' ').collect();
        let pos = toks
            .windows(span.len())
            .position(|w| w.iter().zip(&span).all(|(a, b)| a == b));
        if let Some(pos) = pos {
            let cand = (*prio, pos, term.as_str());
            if best.is_none_or(|b| (cand.0, cand.1) < (b.0, b.1)) {
                best = Some(cand);
            }
        }
    }
    if let Some((_, _, t)) = best {
        return Ok(t.to_string());
    }
    Ok(toks
        .iter()
        .find(|t| !lex.is_stopword(t))
        .unwrap_or(&toks[0])
        .clone())
}

/// Default prompt; `{answer}` is substituted.
pub const DEFAULT_PROMPT: &str =
    "Extract exactly one medically salient keyword from this answer. Reply with one word only. Answer: {answer}";

/// Settings of the optional LLM keyword extractor.
#[derive(Clone, Debug, PartialEq)]
pub struct LlmClientConfig {
    /// Base URL, e.g. `http://localhost:11434`.
    pub endpoint: String,
    /// Path appended to `endpoint`.
    pub path: String,
    pub model: String,
    pub prompt_template: String,
    pub timeout_secs: f64,
    pub retries: u32,
}

impl Default for LlmClientConfig {
    fn default() -> Self {
        Self {
            endpoint: String::from("http://localhost:11434"),
            path: String::from("/api/generate"),
            model: String::from("llama3:70b"),
            prompt_template: String::from(DEFAULT_PROMPT),
            timeout_secs: 10.0,
            retries: 1,
        }
    }
}

impl LlmClientConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.timeout_secs > 0.0 && self.timeout_secs.is_finite()) {
            return Err(Error::invalid("llm", "timeout must be positive"));
        }
        if !self.prompt_template.contains("{answer}") {
            return Err(Error::invalid("llm", "prompt template lacks {answer}"));
        }
        Ok(())
    }

    pub fn prompt(&self, answer: &str) -> String {
        self.prompt_template.replace("{answer}", answer)
    }

    pub fn url(&self) -> String {
        alloc::format!("{}{}", self.endpoint.trim_end_matches('/'), self.path)
    }
}

/// First whitespace token of an LLM reply, lowercased, with punctuation
/// stripped. `None` when nothing usable remains.
pub fn normalize_llm_reply(reply: &str) -> Option<String> {
    let first = reply.split_whitespace().next()?;
    let w: String = first
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .flat_map(char::to_lowercase)
        .collect();
    if w.is_empty() || tokenize(&w).len() != 1 {
        None
    } else {
        Some(w)
    }
}

/// Locates the keyword's token span in `answer_ids`. `None` when the keyword
/// is absent or out of vocabulary.
pub fn keyword_to_target(keyword: &str, vocab: &Vocabulary, answer_ids: &[u32]) -> Option<CamTarget> {
    let kw = vocab.encode(keyword).ok()?;
    if kw.is_empty() || kw.len() > answer_ids.len() {
        return None;
    }
    let start = answer_ids.windows(kw.len()).position(|w| w == kw.as_slice())?;
    let positions = (start..start + kw.len()).collect();
    CamTarget::new(kw, answer_ids.to_vec(), positions).ok()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lexicon_match() {
        let lex = KeywordLexicon::new([("opacity", 1), ("effusion", 1)], []).unwrap();
        assert_eq!(extract_keyword("the opacity in the left lung has increased", &lex).unwrap(), "opacity");
    }

    #[test]
    fn fallback_skips_stopwords() {
        let lex = KeywordLexicon::new([("opacity", 1)], ["no", "is"]).unwrap();
        assert_eq!(extract_keyword("no change is observed", &lex).unwrap(), "change");
        assert_eq!(extract_keyword("no is", &lex).unwrap(), "no");
        assert!(extract_keyword(" . ", &lex).is_err());
    }

    #[test]
    fn priority_then_position() {
        let lex = KeywordLexicon::new([("effusion", 1), ("opacity", 2)], []).unwrap();
        assert_eq!(extract_keyword("opacity and effusion", &lex).unwrap(), "effusion");
        let tie = KeywordLexicon::new([("effusion", 1), ("opacity", 1)], []).unwrap();
        assert_eq!(extract_keyword("opacity and effusion", &tie).unwrap(), "opacity");
    }

    #[test]
    fn multi_token_terms_match_whole_words() {
        let lex = KeywordLexicon::new([("pleural effusion", 1), ("nodule", 2)], []).unwrap();
        assert_eq!(extract_keyword("a nodule and a pleural effusion", &lex).unwrap(), "pleural effusion");
        assert_eq!(extract_keyword("nodules", &lex).unwrap(), "nodules");
        assert!(KeywordLexicon::new([("a", 1), ("A", 2)], []).is_err());
    }

    #[test]
    fn synthetic_answers() {
        let lex = KeywordLexicon::synthetic();
        for a in crate::synth::corpus_words() {
            let k = extract_keyword(&a, &lex).unwrap();
            assert!(tokenize(&a).contains(&k));
        }
        assert_eq!(extract_keyword("no change is observed", &lex).unwrap(), "change");
    }

    #[test]
    fn reply_normalization() {
        assert_eq!(normalize_llm_reply("effusion").as_deref(), Some("effusion"));
        assert_eq!(normalize_llm_reply(" Effusion.\n").as_deref(), Some("effusion"));
        assert_eq!(normalize_llm_reply("..."), None);
        assert_eq!(normalize_llm_reply(""), None);
        assert_eq!(normalize_llm_reply("pleural-effusion"), Some("pleuraleffusion".into()));
    }

    #[test]
    fn targets() {
        let v = Vocabulary::new(["opacity increased", "pleural effusion", "the"]);
        let ids = v.encode("opacity increased").unwrap();
        let t = keyword_to_target("opacity", &v, &ids).unwrap();
        assert_eq!(t.positions(), [0]);
        assert!(keyword_to_target("effusion", &v, &ids).is_none());
        assert!(keyword_to_target("zebra", &v, &ids).is_none());
        let ids = v.encode("the pleural effusion").unwrap();
        let t = keyword_to_target("pleural effusion", &v, &ids).unwrap();
        assert_eq!(t.positions(), [1, 2]);
    }
}
