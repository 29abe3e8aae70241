//! ROUGE scores and baseline comparisons.
//!
//! All scores are token-level over whatever tokens are passed in; there is
//! no stemming or case folding.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub fn from_counts(hits: usize, cand_total: usize, ref_total: usize) -> Prf {
        let precision = if cand_total == 0 { 0.0 } else { hits as f64 / cand_total as f64 };
        let recall = if ref_total == 0 { 0.0 } else { hits as f64 / ref_total as f64 };
        Prf::new(precision, recall)
    }

    pub fn new(precision: f64, recall: f64) -> Prf {
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Prf { precision, recall, f1 }
    }
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for g in tokens.windows(n) {
            *counts.entry(g).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram overlap. `n = 0` scores zero.
pub fn rouge_n<T: Eq + Hash>(candidate: &[T], reference: &[T], n: usize) -> Prf {
    let cand = ngram_counts(candidate, n);
    let refs = ngram_counts(reference, n);
    let hits: usize = cand
        .iter()
        .map(|(g, &c)| refs.get(g).map_or(0, |&r| c.min(r)))
        .sum();
    Prf::from_counts(hits, cand.values().sum(), refs.values().sum())
}

/// `[a.len()+1][b.len()+1]` LCS length table, row-major.
fn lcs_table<T: Eq>(a: &[T], b: &[T]) -> Vec<usize> {
    let w = b.len() + 1;
    let mut t = vec![0usize; (a.len() + 1) * w];
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            t[i * w + j] = if a[i - 1] == b[j - 1] {
                t[(i - 1) * w + j - 1] + 1
            } else {
                t[(i - 1) * w + j].max(t[i * w + j - 1])
            };
        }
    }
    t
}

pub fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    lcs_table(a, b)[a.len() * (b.len() + 1) + b.len()]
}

/// Indices into `reference` of one LCS with `candidate`, chosen by
/// backtracking from the end and preferring to drop a candidate token
/// when that keeps the length strictly larger.
pub fn lcs_indices<T: Eq>(reference: &[T], candidate: &[T]) -> Vec<usize> {
    let t = lcs_table(reference, candidate);
    let w = candidate.len() + 1;
    let (mut i, mut j) = (reference.len(), candidate.len());
    let mut out = Vec::new();
    while i > 0 && j > 0 {
        if reference[i - 1] == candidate[j - 1] {
            out.push(i - 1);
            i -= 1;
            j -= 1;
        } else if t[i * w + j - 1] > t[(i - 1) * w + j] {
            j -= 1;
        } else {
            i -= 1;
        }
    }
    out.reverse();
    out
}

/// Sentence-level ROUGE-L.
pub fn rouge_l_sentence<T: Eq>(candidate: &[T], reference: &[T]) -> Prf {
    Prf::from_counts(lcs_len(candidate, reference), candidate.len(), reference.len())
}

/// Summary-level ROUGE-L over pre-split sentences.
///
/// For each reference sentence the union of its LCS positions against
/// every candidate sentence is taken; each unioned token counts as a hit
/// only while both sides still have unused occurrences of it.
pub fn rouge_lsum<T: Eq + Hash + Clone>(candidate: &[Vec<T>], reference: &[Vec<T>]) -> Prf {
    let m: usize = reference.iter().map(Vec::len).sum();
    let n: usize = candidate.iter().map(Vec::len).sum();
    if m == 0 || n == 0 {
        return Prf::default();
    }
    let mut left_ref: HashMap<&T, usize> = HashMap::new();
    let mut left_cand: HashMap<&T, usize> = HashMap::new();
    for t in reference.iter().flatten() {
        *left_ref.entry(t).or_insert(0) += 1;
    }
    for t in candidate.iter().flatten() {
        *left_cand.entry(t).or_insert(0) += 1;
    }
    let mut hits = 0;
    for r in reference {
        let mut union: Vec<usize> = candidate.iter().flat_map(|c| lcs_indices(r, c)).collect();
        union.sort_unstable();
        union.dedup();
        for i in union {
            let tok = &r[i];
            let (Some(cr), Some(cc)) = (left_ref.get(tok).copied(), left_cand.get(tok).copied()) else {
                continue;
            };
            if cr > 0 && cc > 0 {
                hits += 1;
                left_ref.insert(tok, cr - 1);
                left_cand.insert(tok, cc - 1);
            }
        }
    }
    Prf::from_counts(hits, n, m)
}

/// Splits on `is_sep`, dropping empty sentences.
pub fn split_sentences<T: Clone>(tokens: &[T], is_sep: impl Fn(&T) -> bool) -> Vec<Vec<T>> {
    tokens
        .split(|t| is_sep(t))
        .filter(|s| !s.is_empty())
        .map(<[T]>::to_vec)
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RougeScores {
    pub r1: Prf,
    pub r2: Prf,
    pub rl: Prf,
    pub rlsum: Prf,
    /// Mean generation length.
    pub genl: f64,
}

/// Scores of one pair. Sentences for ROUGE-Lsum are split at `sep`.
pub fn score_pair<T: Eq + Hash + Clone>(candidate: &[T], reference: &[T], sep: Option<&T>) -> RougeScores {
    let is_sep = |t: &T| sep == Some(t);
    let cand: Vec<T> = candidate.iter().filter(|t| !is_sep(t)).cloned().collect();
    let refs: Vec<T> = reference.iter().filter(|t| !is_sep(t)).cloned().collect();
    RougeScores {
        r1: rouge_n(&cand, &refs, 1),
        r2: rouge_n(&cand, &refs, 2),
        rl: rouge_l_sentence(&cand, &refs),
        rlsum: rouge_lsum(&split_sentences(candidate, is_sep), &split_sentences(reference, is_sep)),
        genl: cand.len() as f64,
    }
}

/// Mean of per-pair precision, recall and F1. `genl` is the mean
/// candidate length; generation callers replace it with traced GenL.
pub fn score_corpus<T: Eq + Hash + Clone>(candidates: &[Vec<T>], references: &[Vec<T>], sep: Option<&T>) -> Result<RougeScores> {
    if candidates.len() != references.len() {
        return Err(Error::InvalidArgument(format!(
            "{} candidates for {} references",
            candidates.len(),
            references.len()
        )));
    }
    if candidates.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let k = candidates.len() as f64;
    let mut acc = [[0.0f64; 3]; 4];
    let mut genl = 0.0;
    for (c, r) in candidates.iter().zip(references) {
        let s = score_pair(c, r, sep);
        for (slot, prf) in acc.iter_mut().zip([s.r1, s.r2, s.rl, s.rlsum]) {
            slot[0] += prf.precision;
            slot[1] += prf.recall;
            slot[2] += prf.f1;
        }
        genl += s.genl;
    }
    let mean = |a: [f64; 3]| Prf {
        precision: a[0] / k,
        recall: a[1] / k,
        f1: a[2] / k,
    };
    Ok(RougeScores {
        r1: mean(acc[0]),
        r2: mean(acc[1]),
        rl: mean(acc[2]),
        rlsum: mean(acc[3]),
        genl: genl / k,
    })
}

/// Fixed 4-decimal rendering used in stored scores.
pub fn fmt4(x: f64) -> String {
    format!("{x:.4}")
}

impl RougeScores {
    pub fn summary_line(&self) -> String {
        format!(
            "r1={} r2={} rl={} rlsum={} genl={:.2}",
            fmt4(self.r1.f1),
            fmt4(self.r2.f1),
            fmt4(self.rl.f1),
            fmt4(self.rlsum.f1),
            self.genl
        )
    }
}

/// A candidate relative to the uncompressed baseline.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    /// `100 * score / baseline`; NaN when the baseline scored zero.
    #[serde(with = "nan_as_null")]
    pub recall_pct: f64,
    /// `recall_pct - 100`
    #[serde(with = "nan_as_null")]
    pub impact_pct: f64,
    pub speedup: Option<f64>,
}

pub fn compare(score: f64, baseline: f64) -> Result<Comparison> {
    if !(baseline > 0.0) || !score.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "cannot compare score {score} against baseline {baseline}"
        )));
    }
    let ratio = score / baseline;
    Ok(Comparison {
        recall_pct: 100.0 * ratio,
        impact_pct: 100.0 * (ratio - 1.0),
        speedup: None,
    })
}

impl Comparison {
    pub fn baseline() -> Self {
        Comparison {
            recall_pct: 100.0,
            impact_pct: 0.0,
            speedup: Some(1.0),
        }
    }

    /// Against a baseline that scored zero.
    pub fn undefined() -> Self {
        Comparison {
            recall_pct: f64::NAN,
            impact_pct: f64::NAN,
            speedup: None,
        }
    }

    pub fn is_defined(&self) -> bool {
        self.recall_pct.is_finite()
    }

    pub fn with_speedup(mut self, speedup: f64) -> Self {
        self.speedup = Some(speedup);
        self
    }
}

mod nan_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        if x.is_nan() {
            s.serialize_none()
        } else {
            s.serialize_some(x)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn words(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn bigram_example() {
        let p = rouge_n(&words("the cat sat"), &words("the cat ran"), 2);
        assert_eq!(p, Prf::new(0.5, 0.5));
        assert_eq!(p.f1, 0.5);
    }

    #[test]
    fn identical_sequences_score_one() {
        let s = words("a b c a");
        for n in 1..=4 {
            assert_eq!(rouge_n(&s, &s, n), Prf::new(1.0, 1.0));
        }
        assert_eq!(rouge_n(&s, &s, 5), Prf::default());
    }

    #[test]
    fn lcs_example() {
        let p = rouge_l_sentence(&words("the cat on the mat"), &words("the cat sat on the mat"));
        assert_eq!(p.recall, 5.0 / 6.0);
        assert_eq!(p.precision, 1.0);
        assert!((p.f1 - 10.0 / 11.0).abs() < 1e-15);
        assert_eq!(rouge_l_sentence(&words("a b"), &words("c d")), Prf::default());
    }

    #[test]
    fn lsum_two_sentence_case() {
        let reference = vec![words("a b"), words("c d")];
        let candidate = vec![words("a c"), words("b d")];
        // each reference sentence unions two single-token LCS hits
        assert_eq!(rouge_lsum(&candidate, &reference), Prf::new(1.0, 1.0));
        assert_eq!(rouge_lsum(&reference, &reference), Prf::new(1.0, 1.0));
    }

    #[test]
    fn published_cells() {
        assert!((compare(27.94, 29.03).unwrap().recall_pct - 96.24).abs() < 0.01);
        assert!((compare(19.49, 21.15).unwrap().impact_pct + 7.85).abs() < 0.1);
        let same = compare(3.0, 3.0).unwrap();
        assert_eq!((same.recall_pct, same.impact_pct), (100.0, 0.0));
        assert!(compare(1.0, 0.0).is_err());
    }

    #[test]
    fn corpus_scores_average_pairs() {
        let c = vec![vec![1u32, 2], vec![3]];
        let r = vec![vec![1u32, 2], vec![4]];
        let s = score_corpus(&c, &r, None).unwrap();
        assert_eq!(s.r1.f1, 0.5);
        assert_eq!(s.genl, 1.5);
        assert!(score_corpus::<u32>(&[], &[], None).is_err());
    }
}
