//! Lexical overlap, diversity and fluency metrics.
//!
//! Sequences are slices of any hashable token type so the same code scores
//! token ids and raw strings. n-grams never cross sequence boundaries.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::TokenId;

fn ngram_counts<T: Hash + Eq>(seq: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if n > 0 && seq.len() >= n {
        for w in seq.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

fn ngram_total(len: usize, n: usize) -> usize {
    if n == 0 || len < n {
        0
    } else {
        len - n + 1
    }
}

fn corpus_ngram_counts<T: Hash + Eq, S: AsRef<[T]>>(corpus: &[S], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    for seq in corpus {
        for (g, c) in ngram_counts(seq.as_ref(), n) {
            *counts.entry(g).or_insert(0) += c;
        }
    }
    counts
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BleuScore {
    pub score: f64,
    /// Set when the candidate was empty; the score is then 0.
    pub empty_candidate: bool,
}

/// Corpus-free sentence BLEU: geometric mean of clipped n-gram precisions for
/// `n = 1..=max_n` times the brevity penalty against the closest reference
/// length. Without smoothing any zero precision gives 0; with smoothing,
/// orders `n >= 2` use add-one counts.
pub fn bleu<T: Hash + Eq, R: AsRef<[T]>>(
    candidate: &[T],
    references: &[R],
    max_n: usize,
    smooth: bool,
) -> Result<BleuScore> {
    if !(1..=4).contains(&max_n) {
        return Err(Error::Metric(format!("bleu max_n must be 1..=4, got {max_n}")));
    }
    if references.is_empty() || references.iter().all(|r| r.as_ref().is_empty()) {
        return Err(Error::Metric("bleu needs a nonempty reference".into()));
    }
    if candidate.is_empty() {
        return Ok(BleuScore {
            score: 0.0,
            empty_candidate: true,
        });
    }
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let cand = ngram_counts(candidate, n);
        let mut max_ref: HashMap<&[T], usize> = HashMap::new();
        for r in references {
            for (g, c) in ngram_counts(r.as_ref(), n) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(c);
            }
        }
        let clipped: usize = cand
            .iter()
            .map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0)))
            .sum();
        let total = ngram_total(candidate.len(), n);
        let (num, den) = if smooth && n > 1 {
            (clipped as f64 + 1.0, total as f64 + 1.0)
        } else {
            (clipped as f64, total as f64)
        };
        if num == 0.0 || den == 0.0 {
            return Ok(BleuScore {
                score: 0.0,
                empty_candidate: false,
            });
        }
        log_sum += (num / den).ln();
    }
    let c = candidate.len();
    let r = references
        .iter()
        .map(|r| r.as_ref().len())
        .min_by_key(|&len| (len.abs_diff(c), len))
        .unwrap_or(0);
    let bp = if c > r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };
    Ok(BleuScore {
        score: bp * (log_sum / max_n as f64).exp(),
        empty_candidate: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RougeVariant {
    N(usize),
    L,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    fn from_overlap(overlap: usize, cand_total: usize, ref_total: usize) -> Self {
        let precision = if cand_total == 0 {
            0.0
        } else {
            overlap as f64 / cand_total as f64
        };
        let recall = if ref_total == 0 {
            0.0
        } else {
            overlap as f64 / ref_total as f64
        };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Prf {
            precision,
            recall,
            f1,
        }
    }
}

pub fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge<T: Hash + Eq>(candidate: &[T], reference: &[T], variant: RougeVariant) -> Prf {
    match variant {
        RougeVariant::N(n) => {
            let c = ngram_counts(candidate, n);
            let r = ngram_counts(reference, n);
            let overlap = c
                .iter()
                .map(|(g, &k)| k.min(r.get(g).copied().unwrap_or(0)))
                .sum();
            Prf::from_overlap(
                overlap,
                ngram_total(candidate.len(), n),
                ngram_total(reference.len(), n),
            )
        }
        RougeVariant::L => {
            Prf::from_overlap(lcs_len(candidate, reference), candidate.len(), reference.len())
        }
    }
}

/// Fraction of distinct n-grams among all n-grams in the corpus.
pub fn distinct_n<T: Hash + Eq, S: AsRef<[T]>>(corpus: &[S], n: usize) -> f64 {
    let counts = corpus_ngram_counts(corpus, n);
    let total: usize = counts.values().sum();
    if total == 0 {
        0.0
    } else {
        counts.len() as f64 / total as f64
    }
}

/// Number of n-grams occurring exactly once in the corpus.
pub fn unique_n<T: Hash + Eq, S: AsRef<[T]>>(corpus: &[S], n: usize) -> usize {
    corpus_ngram_counts(corpus, n)
        .values()
        .filter(|&&c| c == 1)
        .count()
}

/// Shannon entropy in bits of the empirical n-gram distribution.
pub fn ngram_entropy<T: Hash + Eq, S: AsRef<[T]>>(corpus: &[S], n: usize) -> Result<f64> {
    let counts = corpus_ngram_counts(corpus, n);
    let total: usize = counts.values().sum();
    if total == 0 {
        return Err(Error::Metric(format!("no {n}-grams in corpus")));
    }
    let total = total as f64;
    // fixed summation order keeps the result bit-stable across processes
    let mut sorted: Vec<usize> = counts.into_values().collect();
    sorted.sort_unstable();
    let h: f64 = sorted
        .into_iter()
        .map(|c| {
            let p = c as f64 / total;
            -p * p.log2()
        })
        .sum();
    Ok(h.max(0.0))
}

/// Mean type/token ratio over consecutive full segments of the concatenated
/// token stream; a trailing partial segment is dropped.
pub fn msttr<T: Hash + Eq, S: AsRef<[T]>>(corpus: &[S], segment_len: usize) -> Result<f64> {
    if segment_len == 0 {
        return Err(Error::Metric("segment length must be positive".into()));
    }
    let stream: Vec<&T> = corpus.iter().flat_map(|s| s.as_ref().iter()).collect();
    let segments = stream.len() / segment_len;
    if segments == 0 {
        return Err(Error::Metric(format!(
            "token stream of length {} is shorter than one segment of {segment_len}",
            stream.len()
        )));
    }
    let sum: f64 = stream
        .chunks_exact(segment_len)
        .map(|seg| seg.iter().collect::<HashSet<_>>().len() as f64 / segment_len as f64)
        .sum();
    Ok(sum / segments as f64)
}

/// Fraction of `concepts` that appear somewhere in `candidate`.
pub fn coverage<T: Hash + Eq>(concepts: &[T], candidate: &[T]) -> f64 {
    let set: HashSet<&T> = concepts.iter().collect();
    if set.is_empty() {
        return 0.0;
    }
    let present: HashSet<&T> = candidate.iter().collect();
    set.iter().filter(|c| present.contains(*c)).count() as f64 / set.len() as f64
}

/// Something that can score a continuation token by token.
pub trait LanguageModel {
    /// Natural-log probability of each `continuation` token given `context`
    /// and the preceding continuation tokens.
    fn continuation_log_probs(
        &self,
        context: &[TokenId],
        continuation: &[TokenId],
    ) -> Result<Vec<f64>>;
}

/// `exp` of the mean per-token negative log-likelihood under teacher forcing.
pub fn perplexity<M: LanguageModel + ?Sized>(
    lm: &M,
    items: &[(Vec<TokenId>, Vec<TokenId>)],
) -> Result<f64> {
    let mut nll = 0.0;
    let mut count = 0usize;
    for (context, continuation) in items {
        for lp in lm.continuation_log_probs(context, continuation)? {
            nll -= lp;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Metric("perplexity of an empty corpus".into()));
    }
    Ok((nll / count as f64).exp())
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub metrics: BTreeMap<String, f64>,
    pub population: usize,
}

impl MetricReport {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: f64) {
        self.metrics.insert(name.into(), value);
    }
}

/// Metric names understood by [`score_corpus`].
pub const METRIC_NAMES: &[&str] = &[
    "bleu", "bleu-1", "bleu-2", "bleu-3", "bleu-4", "rouge-1", "rouge-2", "rouge-l",
    "distinct-1", "distinct-2", "unique-1", "unique-2", "h1", "h2", "msttr", "coverage",
];

pub const DEFAULT_MSTTR_SEGMENT: usize = 25;

/// One candidate with the material needed to score it.
#[derive(Debug, Clone, Default)]
pub struct ScoredItem<T> {
    pub candidate: Vec<T>,
    pub references: Vec<Vec<T>>,
    pub concepts: Vec<T>,
}

/// Scores a candidate corpus. Per-candidate metrics (BLEU, ROUGE F1,
/// coverage) are averaged; diversity metrics are computed over the pooled
/// candidates. Corpus metrics that are undefined on the given corpus (e.g.
/// MSTTR on fewer tokens than one segment) are omitted.
pub fn score_corpus<T: Hash + Eq>(items: &[ScoredItem<T>], names: &[&str]) -> Result<MetricReport> {
    let mut report = MetricReport {
        population: items.len(),
        ..Default::default()
    };
    if items.is_empty() {
        return Ok(report);
    }
    let cands: Vec<&[T]> = items.iter().map(|i| i.candidate.as_slice()).collect();
    let mean = |f: &dyn Fn(&ScoredItem<T>) -> Result<f64>| -> Result<f64> {
        let mut s = 0.0;
        for i in items {
            s += f(i)?;
        }
        Ok(s / items.len() as f64)
    };
    for &name in names {
        let value = match name {
            "bleu" | "bleu-1" | "bleu-2" | "bleu-3" | "bleu-4" => {
                let n = name
                    .strip_prefix("bleu-")
                    .map_or(4, |d| d.parse().unwrap_or(4));
                Some(mean(&|i| {
                    if i.references.is_empty() {
                        return Err(Error::Metric("bleu needs references".into()));
                    }
                    Ok(bleu(&i.candidate, &i.references, n, false)?.score)
                })?)
            }
            "rouge-1" | "rouge-2" | "rouge-l" => {
                let variant = match name {
                    "rouge-1" => RougeVariant::N(1),
                    "rouge-2" => RougeVariant::N(2),
                    _ => RougeVariant::L,
                };
                Some(mean(&|i| {
                    let r = i
                        .references
                        .first()
                        .ok_or_else(|| Error::Metric("rouge needs a reference".into()))?;
                    Ok(rouge(&i.candidate, r, variant).f1)
                })?)
            }
            "coverage" => Some(mean(&|i| Ok(coverage(&i.concepts, &i.candidate)))?),
            "distinct-1" => Some(distinct_n(&cands, 1)),
            "distinct-2" => Some(distinct_n(&cands, 2)),
            "unique-1" => Some(unique_n(&cands, 1) as f64),
            "unique-2" => Some(unique_n(&cands, 2) as f64),
            "h1" => ngram_entropy(&cands, 1).ok(),
            "h2" => ngram_entropy(&cands, 2).ok(),
            "msttr" => msttr(&cands, DEFAULT_MSTTR_SEGMENT).ok(),
            other => return Err(Error::Metric(format!("unknown metric `{other}`"))),
        };
        if let Some(v) = value {
            report.insert(name, v);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn w(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn bleu_identity_and_zero_cases() {
        let c = w("the cat sat on the mat");
        assert_eq!(bleu(&c, &[c.clone()], 4, false).unwrap().score, 1.0);
        let z = bleu(&w("a b c"), &[w("b a c")], 2, false).unwrap();
        assert_eq!(z.score, 0.0);
        let e = bleu::<&str, _>(&[], &[w("a")], 4, false).unwrap();
        assert!(e.empty_candidate && e.score == 0.0);
    }

    #[test]
    fn bleu_clipped_unigram_hand_computed() {
        // clipped count of "a" is min(4, 1) = 1 over 4 candidate tokens;
        // the candidate is longer than the reference, so BP = 1
        let s = bleu(&w("a a a a"), &[w("a b")], 1, false).unwrap();
        assert!((s.score - 0.25).abs() < 1e-15);
        // shorter candidate: BP = exp(1 - 4/2)
        let s = bleu(&w("a b"), &[w("a b c d")], 1, false).unwrap();
        assert!((s.score - (1.0f64 - 2.0).exp()).abs() < 1e-15);
    }

    #[test]
    fn bleu_smoothing_rescues_missing_bigrams() {
        let s = bleu(&w("a b c"), &[w("b a c")], 2, true).unwrap();
        // p1 = 3/3, p2 = (0+1)/(2+1)
        assert!((s.score - (1.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert!(bleu(&w("a"), &[w("a")], 5, false).is_err());
    }

    #[test]
    fn bleu_is_invariant_to_reference_order() {
        let c = w("a b c d a b");
        let r1 = w("a b c");
        let r2 = w("d a b c d e f");
        let x = bleu(&c, &[r1.clone(), r2.clone()], 2, false).unwrap();
        let y = bleu(&c, &[r2, r1], 2, false).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn rouge_cases() {
        let c = w("a b c");
        for v in [RougeVariant::N(1), RougeVariant::N(2), RougeVariant::L] {
            assert_eq!(rouge(&c, &c, v).f1, 1.0);
        }
        let l = rouge(&w("a b c"), &w("a c"), RougeVariant::L);
        assert_eq!(l.recall, 1.0);
        assert!((l.precision - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(rouge(&w("a b"), &w("c d"), RougeVariant::L).f1, 0.0);
        assert_eq!(rouge(&w("a b"), &w("c d"), RougeVariant::N(1)).f1, 0.0);
        assert_eq!(rouge(&w("a"), &w("a"), RougeVariant::N(3)), Prf::default());
    }

    #[test]
    fn distinct_and_unique() {
        assert_eq!(distinct_n(&[w("a b c d")], 1), 1.0);
        let c = [w("a b a b a")];
        assert_eq!(distinct_n(&c, 2), 0.5);
        assert_eq!(unique_n(&c, 2), 0);
        assert_eq!(distinct_n(&[w("x x x x x")], 1), 0.2);
        assert_eq!(distinct_n(&[w("a")], 2), 0.0);
        assert_eq!(unique_n(&[w("a")], 2), 0);
    }

    #[test]
    fn entropy_cases() {
        let uniform = [w("a b c d")];
        assert!((ngram_entropy(&uniform, 1).unwrap() - 2.0).abs() < 1e-15);
        assert_eq!(ngram_entropy(&[w("a a a")], 1).unwrap(), 0.0);
        let h = ngram_entropy(&[w("a a a b")], 1).unwrap();
        let expected = -(0.75f64 * 0.75f64.log2()) - 0.25 * 0.25f64.log2();
        assert!((h - expected).abs() < 1e-15);
        assert!(ngram_entropy(&[w("a")], 2).is_err());
    }

    #[test]
    fn msttr_cases() {
        assert_eq!(msttr(&[w("a b c d")], 4).unwrap(), 1.0);
        assert_eq!(msttr(&[w("a a a a")], 4).unwrap(), 0.25);
        // segments "a b" and "c c", trailing "d" dropped
        assert_eq!(msttr(&[w("a b"), w("c c d")], 2).unwrap(), 0.75);
        assert!(msttr(&[w("a b")], 3).is_err());
    }

    #[test]
    fn coverage_cases() {
        assert_eq!(coverage(&w("a b"), &w("b x a")), 1.0);
        assert_eq!(coverage(&w("a b"), &w("x y")), 0.0);
        assert_eq!(coverage(&w("a b c d"), &w("a c z")), 0.5);
    }

    struct FixedLm(Vec<f64>);

    impl LanguageModel for FixedLm {
        fn continuation_log_probs(&self, _: &[TokenId], c: &[TokenId]) -> Result<Vec<f64>> {
            Ok(c.iter().map(|&t| self.0[t].ln()).collect())
        }
    }

    #[test]
    fn perplexity_cases() {
        let uniform = FixedLm(vec![0.1; 10]);
        let p = perplexity(&uniform, &[(vec![], vec![1, 2, 3])]).unwrap();
        assert!((p - 10.0).abs() < 1e-12);
        let perfect = FixedLm(vec![1.0; 4]);
        assert_eq!(perplexity(&perfect, &[(vec![0], vec![1, 2])]).unwrap(), 1.0);
        let lm = FixedLm(vec![0.5, 0.25]);
        let p = perplexity(&lm, &[(vec![], vec![0, 1])]).unwrap();
        assert!((p - 8f64.sqrt()).abs() < 1e-12);
        assert!(perplexity(&lm, &[]).is_err());
    }

    #[test]
    fn score_corpus_reports_requested_metrics() {
        let items = vec![ScoredItem {
            candidate: w("the dog and the ball"),
            references: vec![w("the dog and the ball")],
            concepts: w("dog ball"),
        }];
        let r = score_corpus(&items, &["bleu", "rouge-l", "coverage", "distinct-1", "msttr"]).unwrap();
        assert_eq!(r.get("bleu"), Some(1.0));
        assert_eq!(r.get("rouge-l"), Some(1.0));
        assert_eq!(r.get("coverage"), Some(1.0));
        assert_eq!(r.get("distinct-1"), Some(0.8));
        assert_eq!(r.get("msttr"), None);
        assert!(score_corpus(&items, &["meteor"]).is_err());
    }

    proptest! {
        #[test]
        fn bounded_metrics_stay_in_bounds(
            cand in prop::collection::vec(0u8..5, 0..12),
            refr in prop::collection::vec(0u8..5, 1..12),
            n in 1usize..4,
        ) {
            let b = bleu(&cand, &[refr.clone()], n, false).unwrap().score;
            prop_assert!((0.0..=1.0).contains(&b));
            let bs = bleu(&cand, &[refr.clone()], n, true).unwrap().score;
            prop_assert!((0.0..=1.0 + 1e-12).contains(&bs));
            for v in [RougeVariant::N(n), RougeVariant::L] {
                let r = rouge(&cand, &refr, v);
                for x in [r.precision, r.recall, r.f1] {
                    prop_assert!((0.0..=1.0).contains(&x));
                }
            }
            let corpus = [cand.clone(), refr.clone()];
            prop_assert!((0.0..=1.0).contains(&distinct_n(&corpus, n)));
            prop_assert!(ngram_entropy(&corpus, 1).unwrap() >= 0.0);
            if let Ok(m) = msttr(&corpus, 3) {
                prop_assert!((0.0..=1.0).contains(&m));
            }
            prop_assert!((0.0..=1.0).contains(&coverage(&refr, &cand)));
        }

        #[test]
        fn rouge_l_f1_is_symmetric(
            a in prop::collection::vec(0u8..4, 1..10),
            b in prop::collection::vec(0u8..4, 1..10),
        ) {
            let x = rouge(&a, &b, RougeVariant::L).f1;
            let y = rouge(&b, &a, RougeVariant::L).f1;
            prop_assert!((x - y).abs() < 1e-15);
        }
    }
}
