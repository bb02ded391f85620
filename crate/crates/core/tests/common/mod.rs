#![allow(dead_code)]

pub mod oracle;

use rand::Rng;
use seqrl::metrics::{self, RougeVariant};

/// Largest absolute difference between the library and the oracle over
/// `cases` random inputs, per metric.
pub fn oracle_discrepancies<R: Rng>(rng: &mut R, cases: usize) -> Vec<(&'static str, f64)> {
    use oracle as o;
    let mut worst: Vec<(&'static str, f64)> = [
        "bleu", "bleu-smooth", "rouge-1", "rouge-2", "rouge-l", "distinct-1", "distinct-2", "unique-1",
        "unique-2", "h1", "h2", "msttr", "coverage",
    ]
    .into_iter()
    .map(|m| (m, 0.0))
    .collect();
    let mut note = |name: &str, d: f64| {
        let w = worst.iter_mut().find(|(m, _)| *m == name).expect("metric listed");
        w.1 = w.1.max(if d.is_nan() { f64::INFINITY } else { d });
    };
    let seq = |rng: &mut R, min: usize| -> Vec<u8> {
        let len = rng.gen_range(min..=12);
        (0..len).map(|_| rng.gen_range(0..5u8)).collect()
    };
    for _ in 0..cases {
        let cand = seq(rng, 0);
        let refs: Vec<Vec<u8>> = (0..rng.gen_range(1..=3)).map(|_| seq(rng, 1)).collect();
        let max_n = rng.gen_range(1..=4);
        for smooth in [false, true] {
            let lib = metrics::bleu(&cand, &refs, max_n, smooth).unwrap().score;
            note(if smooth { "bleu-smooth" } else { "bleu" }, (lib - o::bleu(&cand, &refs, max_n, smooth)).abs());
        }
        let r = &refs[0];
        note("rouge-1", (metrics::rouge(&cand, r, RougeVariant::N(1)).f1 - o::rouge_n_f1(&cand, r, 1)).abs());
        note("rouge-2", (metrics::rouge(&cand, r, RougeVariant::N(2)).f1 - o::rouge_n_f1(&cand, r, 2)).abs());
        note("rouge-l", (metrics::rouge(&cand, r, RougeVariant::L).f1 - o::rouge_l_f1(&cand, r)).abs());

        let corpus: Vec<Vec<u8>> = (0..rng.gen_range(1..=4)).map(|_| seq(rng, 0)).collect();
        for n in [1, 2] {
            let dn = (metrics::distinct_n(&corpus, n) - o::distinct_n(&corpus, n)).abs();
            note(if n == 1 { "distinct-1" } else { "distinct-2" }, dn);
            let un = metrics::unique_n(&corpus, n).abs_diff(o::unique_n(&corpus, n)) as f64;
            note(if n == 1 { "unique-1" } else { "unique-2" }, un);
            let h = match (metrics::ngram_entropy(&corpus, n).ok(), o::entropy(&corpus, n)) {
                (Some(a), Some(b)) => (a - b).abs(),
                (None, None) => 0.0,
                _ => f64::INFINITY,
            };
            note(if n == 1 { "h1" } else { "h2" }, h);
        }
        let seg = rng.gen_range(1..=6);
        let m = match (metrics::msttr(&corpus, seg).ok(), o::msttr(&corpus, seg)) {
            (Some(a), Some(b)) => (a - b).abs(),
            (None, None) => 0.0,
            _ => f64::INFINITY,
        };
        note("msttr", m);
        let concepts = seq(rng, 0);
        note("coverage", (metrics::coverage(&concepts, &cand) - o::coverage(&concepts, &cand)).abs());
    }
    worst
}
