//! Scores a handful of candidate sentences with the lexical and diversity
//! metrics.

use seqrl::metrics::{bleu, rouge, score_corpus, RougeVariant, ScoredItem, METRIC_NAMES};

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_owned).collect()
}

fn main() -> seqrl::Result<()> {
    let pairs = [
        ("the dog runs across the park", "a dog runs across the green park", "dog park run"),
        ("the cat sleeps", "the cat sleeps on the warm mat", "cat mat sleep"),
        ("a bird sings in the tree", "the bird sings in the old tree", "bird tree sing"),
    ];
    for (c, r, _) in &pairs {
        let (c, r) = (words(c), words(r));
        println!(
            "bleu-4 {:.3}  bleu-2 (smoothed) {:.3}  rouge-l f1 {:.3}",
            bleu(&c, &[r.clone()], 4, false)?.score,
            bleu(&c, &[r.clone()], 2, true)?.score,
            rouge(&c, &r, RougeVariant::L).f1
        );
    }
    let items: Vec<ScoredItem<String>> = pairs
        .iter()
        .map(|(c, r, k)| ScoredItem {
            candidate: words(c),
            references: vec![words(r)],
            concepts: words(k),
        })
        .collect();
    let report = score_corpus(&items, METRIC_NAMES)?;
    for (name, value) in &report.metrics {
        println!("{name:>10} {value:.4}");
    }
    Ok(())
}
