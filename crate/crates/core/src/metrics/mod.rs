//! Corpus-level caption metrics and the combined model-selection score.
//!
//! Variants: BLEU is corpus-level without smoothing; METEOR aligns exact
//! then Porter-stem matches (no synonyms); ROUGE-L uses beta = 1.2; CIDEr is
//! CIDEr-D with sigma = 6, clipped counts and x10 scaling, idf taken over the
//! corpus references.

mod cider;
mod porter;

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use cider::cider;
pub use porter::stem;

/// One hypothesis and its references, already tokenized.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EvalPair {
    pub hyp: Vec<String>,
    pub refs: Vec<Vec<String>>,
}

impl EvalPair {
    /// Tokenizes both sides with [`crate::text::tokenize`].
    pub fn new(hyp: &str, refs: &[&str]) -> Self {
        Self {
            hyp: crate::text::tokenize(hyp),
            refs: refs.iter().map(|r| crate::text::tokenize(r)).collect(),
        }
    }
}

/// Counted n-grams of one order, sorted by n-gram.
pub(crate) fn ngrams(tokens: &[String], n: usize) -> Vec<(&[String], usize)> {
    let mut grams: Vec<&[String]> = if tokens.len() >= n { tokens.windows(n).collect() } else { Vec::new() };
    grams.sort_unstable();
    let mut out: Vec<(&[String], usize)> = Vec::new();
    for g in grams {
        match out.last_mut() {
            Some((last, c)) if *last == g => *c += 1,
            _ => out.push((g, 1)),
        }
    }
    out
}

fn count_of(counts: &[(&[String], usize)], g: &[String]) -> usize {
    counts
        .binary_search_by(|(k, _)| (*k).cmp(g))
        .map(|i| counts[i].1)
        .unwrap_or(0)
}

/// Corpus BLEU-`n` (geometric mean of orders `1..=n`, brevity penalty from
/// the closest reference length).
pub fn bleu(pairs: &[EvalPair], n: usize) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    if !(1..=4).contains(&n) {
        return Err(Error::invalid("bleu", "order must be in 1..=4"));
    }
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut c, mut r) = (0usize, 0usize);
    for p in pairs {
        c += p.hyp.len();
        r += p
            .refs
            .iter()
            .map(Vec::len)
            .min_by_key(|&l| (l.abs_diff(p.hyp.len()), l))
            .unwrap_or(0);
        for k in 1..=n {
            let h = ngrams(&p.hyp, k);
            let refs: Vec<_> = p.refs.iter().map(|t| ngrams(t, k)).collect();
            for (g, cnt) in &h {
                let max_ref = refs.iter().map(|rc| count_of(rc, g)).max().unwrap_or(0);
                matched[k - 1] += (*cnt).min(max_ref);
                total[k - 1] += cnt;
            }
        }
    }
    if c == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for k in 0..n {
        if matched[k] == 0 {
            return Ok(0.0);
        }
        log_sum += libm::log(matched[k] as f64 / total[k] as f64);
    }
    let bp = libm::exp(1.0 - r as f64 / c as f64).min(1.0);
    Ok(bp * libm::exp(log_sum / n as f64))
}

/// Greedy two-stage alignment: hyp positions matched to ref positions.
fn align(hyp: &[String], reference: &[String]) -> Vec<(usize, usize)> {
    let mut used_h = alloc::vec![false; hyp.len()];
    let mut used_r = alloc::vec![false; reference.len()];
    let mut links = Vec::new();
    let hs: Vec<String> = hyp.iter().map(|t| stem(t)).collect();
    let rs: Vec<String> = reference.iter().map(|t| stem(t)).collect();
    for stage in 0..2 {
        for i in 0..hyp.len() {
            if used_h[i] {
                continue;
            }
            let hit = (0..reference.len()).find(|&j| {
                !used_r[j]
                    && if stage == 0 {
                        hyp[i] == reference[j]
                    } else {
                        hs[i] == rs[j]
                    }
            });
            if let Some(j) = hit {
                used_h[i] = true;
                used_r[j] = true;
                links.push((i, j));
            }
        }
    }
    links.sort_unstable();
    links
}

fn meteor_pair(hyp: &[String], reference: &[String]) -> f64 {
    let links = align(hyp, reference);
    let m = links.len();
    if m == 0 {
        return 0.0;
    }
    let chunks = 1 + links
        .windows(2)
        .filter(|w| !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1))
        .count();
    let p = m as f64 / hyp.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let f = 10.0 * p * r / (r + 9.0 * p);
    let frag = chunks as f64 / m as f64;
    f * (1.0 - 0.5 * frag * frag * frag)
}

/// Mean per-pair METEOR (best reference per pair).
pub fn meteor(pairs: &[EvalPair]) -> Result<f64> {
    mean_over(pairs, meteor_pair)
}

fn lcs(a: &[String], b: &[String]) -> usize {
    let mut prev = alloc::vec![0usize; b.len() + 1];
    let mut cur = prev.clone();
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        core::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub const ROUGE_BETA: f64 = 1.2;

fn rouge_pair(hyp: &[String], reference: &[String]) -> f64 {
    let l = lcs(hyp, reference);
    if l == 0 {
        return 0.0;
    }
    let p = l as f64 / hyp.len() as f64;
    let r = l as f64 / reference.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * r / (r + b2 * p)
}

/// Mean per-pair ROUGE-L F-measure (best reference per pair).
pub fn rouge_l(pairs: &[EvalPair]) -> Result<f64> {
    mean_over(pairs, rouge_pair)
}

fn mean_over(pairs: &[EvalPair], f: fn(&[String], &[String]) -> f64) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    let mut sum = 0.0;
    for p in pairs {
        sum += p.refs.iter().map(|r| f(&p.hyp, r)).fold(0.0, f64::max);
    }
    Ok(sum / pairs.len() as f64)
}

/// `0.6 * c / (1 + c) + 0.4 * m`.
pub fn combined(cider: f64, meteor: f64) -> Result<f64> {
    if !(cider >= 0.0 && cider.is_finite() && (0.0..=1.0).contains(&meteor)) {
        return Err(Error::invalid("combined", "need cider >= 0 and meteor in [0, 1]"));
    }
    Ok(0.6 * cider / (1.0 + cider) + 0.4 * meteor)
}

/// All metrics of one corpus.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub meteor: f64,
    pub rouge_l: f64,
    pub cider: f64,
    pub combined: f64,
}

impl ScoreReport {
    pub const HEADER: &'static str =
        "BLEU corpus-level, no smoothing | METEOR exact+stem | ROUGE-L beta=1.2 | CIDEr-D sigma=6 x10";

    pub fn compute(pairs: &[EvalPair]) -> Result<Self> {
        let cider = cider(pairs)?;
        let meteor = meteor(pairs)?;
        Ok(Self {
            bleu1: bleu(pairs, 1)?,
            bleu2: bleu(pairs, 2)?,
            bleu3: bleu(pairs, 3)?,
            bleu4: bleu(pairs, 4)?,
            meteor,
            rouge_l: rouge_l(pairs)?,
            cider,
            combined: combined(cider, meteor)?,
        })
    }

    /// `(name, value)` in report order.
    pub fn fields(&self) -> [(&'static str, f64); 8] {
        [
            ("bleu1", self.bleu1),
            ("bleu2", self.bleu2),
            ("bleu3", self.bleu3),
            ("bleu4", self.bleu4),
            ("meteor", self.meteor),
            ("rouge_l", self.rouge_l),
            ("cider", self.cider),
            ("combined", self.combined),
        ]
    }

    /// Aligned two-column text table preceded by the variant header.
    pub fn to_table(&self) -> String {
        let mut s = alloc::format!("# {}\n", Self::HEADER);
        for (k, v) in self.fields() {
            s.push_str(&alloc::format!("{k:<10} {v:>8.4}\n"));
        }
        s
    }
}

/// Scores aligned hypothesis/reference sentence lists.
pub fn score_corpus(hyps: &[&str], refs: &[&str]) -> Result<ScoreReport> {
    if hyps.len() != refs.len() {
        return Err(Error::invalid(
            "score_corpus",
            alloc::format!("{} hypotheses vs {} references", hyps.len(), refs.len()),
        ));
    }
    let pairs: Vec<EvalPair> = hyps.iter().zip(refs).map(|(h, r)| EvalPair::new(h, &[r])).collect();
    ScoreReport::compute(&pairs)
}
