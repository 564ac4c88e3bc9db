use alloc::string::String;
use alloc::vec::Vec;

use super::{count_of, ngrams, EvalPair};
use crate::error::{Error, Result};

pub const CIDER_SIGMA: f64 = 6.0;
const MAX_N: usize = 4;

type Counts<'a> = Vec<(&'a [String], usize)>;

/// TF-IDF weighted n-gram vector of one sentence for one order, with its norm.
struct Weighted<'a> {
    w: Vec<(&'a [String], f64)>,
    norm: f64,
}

fn weigh<'a>(counts: &Counts<'a>, df: &Counts<'_>, log_docs: f64) -> Weighted<'a> {
    let w: Vec<(&[String], f64)> = counts
        .iter()
        .map(|(g, tf)| {
            let d = count_of(df, g).max(1) as f64;
            (*g, *tf as f64 * (log_docs - libm::log(d)))
        })
        .collect();
    let norm = libm::sqrt(w.iter().map(|(_, v)| v * v).sum::<f64>());
    Weighted { w, norm }
}

fn lookup(w: &Weighted<'_>, g: &[String]) -> f64 {
    w.w.binary_search_by(|(k, _)| (*k).cmp(g)).map(|i| w.w[i].1).unwrap_or(0.0)
}

/// CIDEr-D over the corpus; document frequencies come from the references.
pub fn cider(pairs: &[EvalPair]) -> Result<f64> {
    if pairs.len() < 2 {
        return Err(Error::DegenerateCorpus("CIDEr needs at least two pairs"));
    }
    let mut profiles: Vec<&Vec<String>> = pairs.iter().flat_map(|p| &p.refs).collect();
    profiles.sort();
    profiles.dedup();
    if profiles.len() < 2 {
        return Err(Error::DegenerateCorpus("CIDEr needs two distinct references"));
    }
    // document frequency: number of pairs whose reference set holds the n-gram
    let mut df: Vec<Counts> = Vec::with_capacity(MAX_N);
    for n in 1..=MAX_N {
        let mut all: Vec<&[String]> = Vec::new();
        for p in pairs {
            let mut seen: Vec<&[String]> = p.refs.iter().flat_map(|r| ngrams(r, n)).map(|(g, _)| g).collect();
            seen.sort_unstable();
            seen.dedup();
            all.extend(seen);
        }
        all.sort_unstable();
        let mut counts: Counts = Vec::new();
        for g in all {
            match counts.last_mut() {
                Some((last, c)) if *last == g => *c += 1,
                _ => counts.push((g, 1)),
            }
        }
        df.push(counts);
    }
    let log_docs = libm::log(pairs.len() as f64);
    let mut total = 0.0;
    for p in pairs {
        let hyp: Vec<Weighted> = (1..=MAX_N).map(|n| weigh(&ngrams(&p.hyp, n), &df[n - 1], log_docs)).collect();
        let mut per_ref = 0.0;
        for r in &p.refs {
            let delta = p.hyp.len() as f64 - r.len() as f64;
            let penalty = libm::exp(-delta * delta / (2.0 * CIDER_SIGMA * CIDER_SIGMA));
            let mut s = 0.0;
            for n in 1..=MAX_N {
                let rw = weigh(&ngrams(r, n), &df[n - 1], log_docs);
                let h = &hyp[n - 1];
                let mut dot = 0.0;
                for (g, hv) in &h.w {
                    let rv = lookup(&rw, g);
                    dot += hv.min(rv) * rv;
                }
                if h.norm != 0.0 && rw.norm != 0.0 {
                    s += dot / (h.norm * rw.norm) * penalty;
                }
            }
            per_ref += s;
        }
        total += per_ref / p.refs.len() as f64 / MAX_N as f64 * 10.0;
    }
    Ok(total / pairs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{self, Rng};
    use std::collections::{HashMap, HashSet};

    /// Independent CIDEr-D: full TF-IDF vectors as hash maps.
    fn oracle(pairs: &[(Vec<String>, Vec<String>)]) -> f64 {
        let grams = |t: &[String], n: usize| -> HashMap<Vec<String>, f64> {
            let mut m = HashMap::new();
            if t.len() >= n {
                for i in 0..=t.len() - n {
                    *m.entry(t[i..i + n].to_vec()).or_insert(0.0) += 1.0;
                }
            }
            m
        };
        let docs = pairs.len() as f64;
        let mut score = 0.0;
        for (hyp, reference) in pairs {
            let mut s = 0.0;
            for n in 1..=4 {
                let mut df: HashMap<Vec<String>, f64> = HashMap::new();
                for (_, r) in pairs {
                    let uniq: HashSet<Vec<String>> = grams(r, n).into_keys().collect();
                    for g in uniq {
                        *df.entry(g).or_insert(0.0) += 1.0;
                    }
                }
                let tfidf = |m: HashMap<Vec<String>, f64>| -> HashMap<Vec<String>, f64> {
                    m.into_iter()
                        .map(|(g, tf)| {
                            let d = df.get(&g).copied().unwrap_or(0.0).max(1.0);
                            (g, tf * (docs / d).ln())
                        })
                        .collect()
                };
                let h = tfidf(grams(hyp, n));
                let r = tfidf(grams(reference, n));
                let nh = h.values().map(|v| v * v).sum::<f64>().sqrt();
                let nr = r.values().map(|v| v * v).sum::<f64>().sqrt();
                if nh == 0.0 || nr == 0.0 {
                    continue;
                }
                let dot: f64 = h
                    .iter()
                    .map(|(g, hv)| {
                        let rv = r.get(g).copied().unwrap_or(0.0);
                        hv.min(rv) * rv
                    })
                    .sum();
                let d = hyp.len() as f64 - reference.len() as f64;
                s += dot / (nh * nr) * (-d * d / 72.0).exp();
            }
            score += s / 4.0 * 10.0;
        }
        score / docs
    }

    fn random_sentence(r: &mut impl Rng) -> Vec<String> {
        let words = ["a", "b", "c", "d", "e", "f"];
        let len = r.random_range(0..9);
        (0..len).map(|_| String::from(words[r.random_range(0..words.len())])).collect()
    }

    #[test]
    fn matches_brute_force_oracle() {
        let mut r = rng::stream(2024, 0);
        let mut checked = 0;
        while checked < 100 {
            let n = r.random_range(2..8);
            let raw: Vec<(Vec<String>, Vec<String>)> =
                (0..n).map(|_| (random_sentence(&mut r), random_sentence(&mut r))).collect();
            let pairs: Vec<EvalPair> = raw
                .iter()
                .map(|(h, rf)| EvalPair {
                    hyp: h.clone(),
                    refs: alloc::vec![rf.clone()],
                })
                .collect();
            let Ok(got) = cider(&pairs) else { continue };
            let want = oracle(&raw);
            assert!((got - want).abs() <= 1e-9, "{got} vs {want}");
            checked += 1;
        }
    }

    #[test]
    fn orthogonal_corpus_scores_ten() {
        let pairs = [
            EvalPair::new("a b c d", &["a b c d"]),
            EvalPair::new("e f g h", &["w x y z"]),
        ];
        let s = super::super::cider(&pairs[..1]);
        assert!(s.is_err());
        let mut p = pairs.to_vec();
        p[1] = EvalPair::new("w x y z", &["w x y z"]);
        assert!((cider(&p).unwrap() - 10.0).abs() < 1e-12);
        p[1] = EvalPair::new("q", &["w x y z"]);
        assert!((cider(&p).unwrap() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_corpus_rejected() {
        let p = [EvalPair::new("a", &["b c"]), EvalPair::new("d", &["b c"])];
        assert!(matches!(cider(&p), Err(Error::DegenerateCorpus(_))));
    }
}
